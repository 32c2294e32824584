"""
Leaky-integrate-and-fire neurons with learnable threshold and leak.

    u[t] = drive[t] + lam * u[t-1] - v_th * o[t-1]      (soft reset, delayed one step)
    o[t] = H(u[t] - v_th)                               (fires at equality)

The numpy functions here (lif_step, run_sequence, lif_backward) are the
reference dynamics with an explicit BPTT; LifLayer runs the same update
on autodiff tensors inside the network, where the Heaviside is recorded as
a `spike` op whose backward uses the arctan surrogate.
"""

import math
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from . import autodiff as ad
from .autodiff import Tensor, record_op
from .errors import ShapeError
from .layers import Module

V_TH_INIT = 1.0
LEAK_INIT = 0.9
V_TH_MIN = 0.01
SURROGATE_WIDTH = 100.0


class LifParams(BaseModel):
    """Per-layer threshold and leak."""
    v_th: float = Field(V_TH_INIT, gt=0)
    lam: float = Field(LEAK_INIT, ge=0, le=1)


class LifState(NamedTuple):
    u_mem: np.ndarray
    o_prev: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


class LifTrace(NamedTuple):
    """Per-step membrane potentials and spikes of one sequence."""
    potentials: np.ndarray  # T x ...
    spikes: np.ndarray  # T x ...

    @property
    def u_final(self) -> np.ndarray:
        return self.potentials[-1]


class LifGrads(NamedTuple):
    drives: np.ndarray
    v_th: float
    lam: float


def surrogate_grad(u, v_th, gamma: float = SURROGATE_WIDTH):
    """Arctan pseudo-derivative gamma / (2 (1 + (pi/2 * gamma * (u - v_th))^2)); unit area."""
    x = np.asarray(u) - v_th
    with np.errstate(over="ignore"):
        return gamma / (2.0 * (1.0 + (0.5 * math.pi * gamma * x) ** 2))


def relaxed_spike(u, v_th, gamma: float = SURROGATE_WIDTH):
    """Smooth step whose derivative is surrogate_grad."""
    return 0.5 + np.arctan(0.5 * math.pi * gamma * (np.asarray(u) - v_th)) / math.pi


def _reset_term(o_prev: np.ndarray, v_th: float) -> np.ndarray:
    # a silent neuron contributes no reset even when v_th is infinite
    with np.errstate(invalid="ignore"):
        return np.where(o_prev != 0, v_th * o_prev, 0.0)


def lif_step(state: LifState, drive: np.ndarray, params: LifParams):
    """One update; returns (spikes, new state)."""
    drive = np.asarray(drive)
    if drive.shape != state.u_mem.shape:
        raise ShapeError(f"drive shape {drive.shape} does not match state {state.u_mem.shape}")
    u = drive + params.lam * state.u_mem - _reset_term(state.o_prev, params.v_th)
    spikes = (u >= params.v_th).astype(u.dtype)
    return spikes, LifState(u, spikes)


def run_sequence(bins: Sequence[np.ndarray], params: LifParams, relaxed: bool = False,
                 gamma: float = SURROGATE_WIDTH) -> LifTrace:
    """
    Iterate lif_step from a zeroed state over all bins.

    With `relaxed`, spikes are replaced by relaxed_spike so the sequence is
    the smooth system the surrogate backward differentiates.
    """
    bins = np.asarray(bins, dtype=np.float64)
    if len(bins) < 1:
        raise ShapeError("run_sequence needs at least one bin")
    state = LifState.zeros(bins.shape[1:])
    potentials, spikes = [], []
    for drive in bins:
        if relaxed:
            u = drive + params.lam * state.u_mem - _reset_term(state.o_prev, params.v_th)
            o = relaxed_spike(u, params.v_th, gamma)
            state = LifState(u, o)
        else:
            o, state = lif_step(state, drive, params)
        potentials.append(state.u_mem)
        spikes.append(o)
    return LifTrace(np.stack(potentials), np.stack(spikes))


def lif_backward(trace: LifTrace, params: LifParams, grad_u_final: np.ndarray,
                 grad_spikes: Optional[np.ndarray] = None,
                 gamma: float = SURROGATE_WIDTH) -> LifGrads:
    """
    Backpropagation through time for a loss depending on the final membrane
    map and, optionally, on every step's spikes.

    The Heaviside derivative is replaced by surrogate_grad. The reset term
    -v_th * o[t-1] contributes a direct v_th path and a path through o[t-1].
    """
    u, o = trace.potentials, trace.spikes
    steps = len(u)
    if grad_spikes is None:
        grad_spikes = np.zeros_like(o)
    s = surrogate_grad(u, params.v_th, gamma)

    grad_u = np.zeros_like(u)
    grad_v = 0.0
    grad_lam = 0.0
    carry = np.zeros_like(u[0])  # dL/du[t+1]
    for t in reversed(range(steps)):
        grad_o = grad_spikes[t] - params.v_th * carry
        grad_u[t] = grad_o * s[t] + params.lam * carry
        if t == steps - 1:
            grad_u[t] = grad_u[t] + grad_u_final
        grad_v -= float((grad_o * s[t]).sum())
        if t > 0:
            grad_v -= float((grad_u[t] * o[t - 1]).sum())
            grad_lam += float((grad_u[t] * u[t - 1]).sum())
        carry = grad_u[t]
    return LifGrads(grad_u, grad_v, grad_lam)


def fires_periodic(amplitude: float, lam: float, period: int, v_th: float) -> bool:
    """Closed form: pulses of `amplitude` every `period` steps eventually fire iff a/(1-lam^period) >= v_th."""
    if amplitude <= 0:
        return False
    decay = lam ** period
    if decay >= 1.0:
        return True
    return amplitude / (1.0 - decay) >= v_th


def periodic_drive(amplitude: float, period: int, steps: int) -> np.ndarray:
    drive = np.zeros(steps)
    drive[::period] = amplitude
    return drive


# Autodiff layer
def spike(u: Tensor, v_th: Tensor, gamma: float = SURROGATE_WIDTH) -> Tensor:
    """Exact Heaviside forward, arctan surrogate backward (w.r.t. u and v_th)."""
    out = (u.data >= v_th.data).astype(u.dtype)

    def _backward(g):
        gs = g * surrogate_grad(u.data, v_th.data, gamma).astype(u.dtype)
        return gs, -np.asarray(gs.sum()).reshape(v_th.shape)

    return record_op(out, (u, v_th), _backward)


class LifTensorState(NamedTuple):
    u_mem: Tensor
    spikes: Tensor


class LifLayer(Module):
    """Learnable v_th and lam shared by every neuron of a layer."""

    def __init__(self, gamma: float = SURROGATE_WIDTH, dtype=np.float32):
        self.v_th = Tensor(np.array([V_TH_INIT], dtype=dtype), requires_grad=True)
        self.lam = Tensor(np.array([LEAK_INIT], dtype=dtype), requires_grad=True)
        self.gamma = gamma

    def step(self, drive: Tensor, state: Optional[LifTensorState] = None):
        """Integrate one timestep; `state=None` is the zeroed start of a sequence."""
        if state is None:
            u = drive
        else:
            if drive.shape != state.u_mem.shape:
                raise ShapeError(f"drive shape {drive.shape} does not match state {state.u_mem.shape}")
            u = ad.sub(ad.add(drive, ad.mul(self.lam, state.u_mem)), ad.mul(self.v_th, state.spikes))
        o = spike(u, self.v_th, self.gamma)
        return o, LifTensorState(u, o)

    def clamp_(self) -> None:
        """Keep v_th >= 0.01 and lam in [0, 1]."""
        np.maximum(self.v_th.data, V_TH_MIN, out=self.v_th.data)
        np.clip(self.lam.data, 0.0, 1.0, out=self.lam.data)

    @property
    def params(self) -> LifParams:
        return LifParams(v_th=float(self.v_th.data[0]), lam=float(self.lam.data[0]))
