"""
Minimal reverse-mode differentiation over numpy arrays.

Operations executed while a Tape is active (``with Tape(): ...``) and that
touch a tensor with ``requires_grad`` are recorded in execution order;
``backward(loss)`` walks that record in reverse and accumulates ``.grad``
on every participating tensor. Without an active tape nothing is recorded,
which is how inference runs.

Tensors follow the N x C x H x W convention and keep the dtype they were
created with (float64 for gradient checks, float32 for normal runs).
"""

import contextvars
import logging
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import LabelError, ShapeError, UsageError

logger = logging.getLogger(__name__)

Pair = Tuple[int, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Array value with an optional gradient slot."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.tape: Optional["Tape"] = None
        self._index = -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class Node(NamedTuple):
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations; every node follows its producers."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        node.output.tape = self
        node.output._index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root: Tensor) -> None:
        """
        Accumulate d(root)/d(t) into t.grad for every tensor reached.

        The recorded graph is released afterwards; a second backward over the
        same record raises UsageError.
        """
        if root.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise UsageError("backward root does not depend on any tensor requiring grad")
        if root.tape is not self:
            raise UsageError("backward root was not recorded on this tape")

        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes[: root._index + 1]):
            upstream = node.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=tensor.dtype)
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        logger.debug("Backward over %d recorded operations", root._index + 1)
        for node in self.nodes:
            node.output.tape = None
            node.output._index = -1
        self.nodes.clear()


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Populate grads of everything `loss` depends on."""
    if loss.tape is None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
        raise UsageError("loss has no recorded graph (computed outside a Tape, or already released by backward)")
    loss.tape.backward(loss)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result; record it when a tape is active and an input needs grad."""
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(Node(out, tuple(inputs), backward_fn))
    return out


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operands(a, b) -> Tuple[Tensor, Tensor]:
    """Wrap plain numbers as constants in the dtype of the tensor operand."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# Elementwise
def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b)
    return record_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b)
    return record_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _broadcast_shape(a, b)
    return record_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(x: Tensor) -> Tensor:
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 1."""
    mask = x.data >= 0
    return record_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x); the subgradient at 0 is 1."""
    mask = x.data >= 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return record_op(x.data * scale, (x,), lambda g: (g * scale,))


# Convolution
def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: Pair, dilation: Pair, padding: Pair):
    n, c, h, w = x.shape
    (sh, sw), (rh, rw), (ph, pw) = stride, dilation, padding
    ho = conv_output_size(h, kh, sh, rh, ph)
    wo = conv_output_size(w, kw, sw, rw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"convolution output would be empty for input {x.shape}")
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        top = i * rh
        for j in range(kw):
            left = j * rw
            cols[:, :, i, j] = padded[:, :, top:top + sh * (ho - 1) + 1:sh, left:left + sw * (wo - 1) + 1:sw]
    return cols, padded.shape


def _col2im(cols: np.ndarray, padded_shape: tuple, stride: Pair, dilation: Pair, padding: Pair) -> np.ndarray:
    _, _, kh, kw, ho, wo = cols.shape
    (sh, sw), (rh, rw), (ph, pw) = stride, dilation, padding
    padded = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        top = i * rh
        for j in range(kw):
            left = j * rw
            padded[:, :, top:top + sh * (ho - 1) + 1:sh, left:left + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    hp, wp = padded_shape[2], padded_shape[3]
    return padded[:, :, ph:hp - ph, pw:wp - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: Pair = (1, 1), dilation: Pair = (1, 1), padding: Pair = (0, 0)) -> Tensor:
    """Cross-correlation of an N x C_in x H x W input with a C_out x C_in x k_h x k_w kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if min(stride) < 1 or min(dilation) < 1:
        raise ShapeError("stride and dilation must be >= 1")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")

    kh, kw = weight.shape[2], weight.shape[3]
    cols, padded_shape = _im2col(x.data, kh, kw, stride, dilation, padding)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def _backward(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_cols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        grad_x = _col2im(grad_cols, padded_shape, stride, dilation, padding)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record_op(out, inputs, _backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 channel mixing."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be C_out x C_in x 1 x 1, got {weight.shape}")
    return conv2d(x, weight, bias)


# Normalization
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """
    Per-channel normalization over N, H, W.

    Training mode uses batch statistics and updates the running buffers in
    place (unbiased variance, like the usual frameworks); eval mode uses the
    running buffers.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    view = (1, c, 1, 1)

    if training:
        axes = (0, 2, 3)
        count = x.data.size // c
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def _backward(g):
            dxhat = g * gamma.data.reshape(view)
            grad_x = (inv_std.reshape(view) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return grad_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(view)) * inv_std.reshape(view)

        def _backward(g):
            grad_x = g * (gamma.data * inv_std).reshape(view)
            return grad_x, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * gamma.data.reshape(view) + beta.data.reshape(view)).astype(x.dtype)
    return record_op(out, (x, gamma, beta), _backward)


# Resampling and layout
def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Row o holds the align_corners=False bilinear weights of output o."""
    matrix = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), in_size - 1)
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    return matrix


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize (align_corners=False)."""
    rows = _interp_matrix(out_h, x.shape[2], x.dtype)
    cols = _interp_matrix(out_w, x.shape[3], x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", rows, x.data, cols, optimize=True)

    def _backward(g):
        return (np.einsum("oh,ncop,pw->nchw", rows, g, cols, optimize=True),)

    return record_op(out.astype(x.dtype), (x,), _backward)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channels by default); the gradient splits back."""
    inputs = [as_tensor(t) for t in inputs]
    reference = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != len(reference) or any(
            a != b for d, (a, b) in enumerate(zip(t.shape, reference)) if d != axis
        ):
            raise ShapeError(f"cannot concatenate {t.shape} with {reference} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in inputs])[:-1]

    def _backward(g):
        return np.split(g, bounds, axis=axis)

    return record_op(np.concatenate([t.data for t in inputs], axis=axis), inputs, _backward)


# Loss
def weighted_cross_entropy(logits: Tensor, target: np.ndarray, class_weights: np.ndarray,
                           ignore_id: int = 255) -> Tensor:
    """
    Mean over non-ignored pixels of w[target] * -log softmax(logits)[target].

    Args:
        logits: N x K x H x W scores
        target: N x H x W integer class ids
        class_weights: K per-class weights
        ignore_id: label excluded from the loss

    Raises:
        LabelError: a target id is >= K and is not the ignore id
    """
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    weights = np.asarray(class_weights, dtype=logits.dtype)
    if weights.shape != (k,):
        raise ShapeError(f"expected {k} class weights, got {weights.shape}")

    valid = target != ignore_id
    bad = valid & ((target < 0) | (target >= k))
    if np.any(bad):
        raise LabelError(f"target id {int(target[bad][0])} outside [0, {k}) and not {ignore_id}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(exp.sum(axis=1, keepdims=True))

    safe = np.where(valid, target, 0).astype(np.int64)
    picked = np.take_along_axis(log_softmax, safe[:, None], axis=1)[:, 0]
    pixel_w = weights[safe] * valid
    count = int(valid.sum())
    loss = -(pixel_w * picked).sum() / count if count else 0.0

    def _backward(g):
        if not count:
            return (np.zeros_like(logits.data),)
        onehot = np.zeros_like(softmax)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (softmax - onehot) * (pixel_w / count)[:, None]
        return (g * grad,)

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), _backward)
