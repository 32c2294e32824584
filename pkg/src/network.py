"""
Hybrid segmentation network: spiking temporal encoder over event bins,
dense spatial encoder over frames, multi-scale mixer and semantic head.

Every ablation setting shares the mixer and head; settings differ only in
which encoders exist and which modality feeds them:

    A  spatial encoder on frames
    B  spatial encoder on events (bins stacked as channels)
    C  temporal encoder on events
    D  spatial encoders on frames and on events
    E  temporal encoders on events and on frames (frame repeated each bin)
    F  full hybrid, mixer without dilated branches
    H  full hybrid
"""

import logging
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .evio import EventVolume
from .layers import BatchNorm2d, Conv2d, Module
from .lif import SURROGATE_WIDTH, LifLayer, LifTensorState
from .models import NetworkSpec, Rate

logger = logging.getLogger(__name__)

SETTINGS = ("A", "B", "C", "D", "E", "F", "H")
SPATIAL_FRAMES = set("ADFH")
SPATIAL_EVENTS = set("BD")
TEMPORAL_EVENTS = set("CEFH")
TEMPORAL_FRAMES = set("E")

ArrayLike = Union[np.ndarray, Tensor]


def check_setting(setting: str) -> str:
    key = str(setting).strip().upper()
    if key not in SETTINGS:
        raise ConfigError(f"unknown ablation setting '{setting}' (expected one of {', '.join(SETTINGS)})")
    return key


class SpatialFeatures(NamedTuple):
    low: Tensor
    high: Tensor


class TemporalFeatures(NamedTuple):
    low: Tensor
    high: Tensor
    rates: List[float]  # mean input spike rate per stage conv


class FeaturePair(NamedTuple):
    """Low/high maps of both pathways; a missing pathway is None."""
    space_low: Optional[Tensor]
    space_high: Optional[Tensor]
    mem_low: Optional[Tensor]
    mem_high: Optional[Tensor]


def mix(u_space: Optional[Tensor], u_mem: Optional[Tensor]) -> Tensor:
    """Element-wise sum of spatial and membrane maps."""
    if u_space is None or u_mem is None:
        if u_space is None and u_mem is None:
            raise UsageError("mix needs at least one feature map")
        return u_mem if u_space is None else u_space
    if u_space.shape != u_mem.shape:
        raise ShapeError(f"cannot mix {u_space.shape} with {u_mem.shape}")
    return ad.add(u_space, u_mem)


# Building blocks
class ConvBnAct(Module):
    """conv -> BN -> ReLU (or LeakyReLU)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 stride: int = 1, rate: Rate = (1, 1), leaky: bool = False, dtype=np.float32):
        self.conv = Conv2d(in_channels, out_channels, 3, stride=stride, dilation=rate,
                           padding=rate, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)
        self.leaky = leaky

    def __call__(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x))
        return ad.leaky_relu(x) if self.leaky else ad.relu(x)


class SpikingStage(Module):
    """Stride-2 3x3 conv feeding a LIF layer."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 gamma: float = SURROGATE_WIDTH, dtype=np.float32):
        self.conv = Conv2d(in_channels, out_channels, 3, stride=2, padding=1,
                           bias=False, rng=rng, dtype=dtype)
        self.conv.spiking = True
        self.lif = LifLayer(gamma, dtype=dtype)

    def step(self, x: Tensor, state: Optional[LifTensorState]):
        return self.lif.step(self.conv(x), state)


class SpatialEncoder(Module):
    def __init__(self, in_channels: int, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.stages = []
        for s in range(spec.stages):
            self.stages.append(ConvBnAct(in_channels, spec.stage_channels(s), rng,
                                         stride=2, leaky=True, dtype=dtype))
            in_channels = spec.stage_channels(s)

    def __call__(self, x: Tensor) -> SpatialFeatures:
        low = None
        for s, stage in enumerate(self.stages):
            x = stage(x)
            if s == 0:
                low = x
        return SpatialFeatures(low, x)


class TemporalEncoder(Module):
    """Processes bins sequentially; membranes after the last bin are the readout."""

    def __init__(self, in_channels: int, spec: NetworkSpec, rng: np.random.Generator,
                 gamma: float = SURROGATE_WIDTH, dtype=np.float32):
        self.stages = []
        for s in range(spec.stages):
            self.stages.append(SpikingStage(in_channels, spec.stage_channels(s), rng, gamma, dtype))
            in_channels = spec.stage_channels(s)
        self.output_rate = 0.0

    def __call__(self, sequence: np.ndarray) -> TemporalFeatures:
        """
        Args:
            sequence: N x T x C x H x W array, one entry per timestep

        Returns:
            Membrane maps of the first and last stage plus the mean input
            spike rate of every stage (first stage: nonzero density of the input).
        """
        steps = sequence.shape[1]
        states: List[Optional[LifTensorState]] = [None] * len(self.stages)
        rate_sums = np.zeros(len(self.stages))
        output_sum = 0.0
        for t in range(steps):
            x_np = sequence[:, t]
            rate_sums[0] += np.count_nonzero(x_np) / x_np.size
            x = Tensor(x_np)
            for s, stage in enumerate(self.stages):
                if s > 0:
                    rate_sums[s] += float(np.mean(x.data, dtype=np.float64))
                x, states[s] = stage.step(x, states[s])
            output_sum += float(np.mean(x.data, dtype=np.float64))
        self.output_rate = output_sum / steps
        rates = (rate_sums / steps).tolist()
        return TemporalFeatures(states[0].u_mem, states[-1].u_mem, rates)


class MultiScaleMixer(Module):
    """
    Dilated branches over the high-level map (lead, parallel trio, tail),
    pointwise mixing of both scales, concatenation at the low-level scale.
    Without `dilated` the high-level map goes straight to its pointwise mixer.
    """

    def __init__(self, high_channels: int, low_channels: int, spec: NetworkSpec,
                 rng: np.random.Generator, dilated: bool = True, dtype=np.float32):
        width = spec.mixer_width
        rates = spec.rates
        self.dilated = dilated
        self.lead = self.fuse = self.tail = None
        self.parallel = []
        if dilated:
            self.lead = ConvBnAct(high_channels, width, rng, rate=rates.lead, dtype=dtype)
            self.parallel = [ConvBnAct(width, width, rng, rate=r, dtype=dtype) for r in rates.parallel]
            self.fuse = Conv2d(width * len(self.parallel), width, 1, rng=rng, dtype=dtype)
            self.tail = ConvBnAct(width, width, rng, rate=rates.tail, dtype=dtype)
            high_channels = width
        self.high_mix = Conv2d(high_channels, width, 1, rng=rng, dtype=dtype)
        self.low_mix = Conv2d(low_channels, spec.low_channels, 1, rng=rng, dtype=dtype)
        self.out_channels = width + spec.low_channels

    def __call__(self, u_high: Tensor, u_low: Tensor) -> Tensor:
        x = u_high
        if self.dilated:
            x = self.lead(x)
            if self.parallel:
                x = ad.concat([branch(x) for branch in self.parallel])
                x = self.fuse(x)
            x = self.tail(x)
        x = self.high_mix(x)
        x = ad.upsample_bilinear(x, u_low.shape[2], u_low.shape[3])
        return ad.concat([x, self.low_mix(u_low)])


class SegmentationHead(Module):
    def __init__(self, in_channels: int, width: int, classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.blocks = [
            ConvBnAct(in_channels, width, rng, dtype=dtype),
            ConvBnAct(width, width, rng, dtype=dtype),
        ]
        self.classifier = Conv2d(width, classes, 1, rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, height: int, width: int) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return ad.upsample_bilinear(self.classifier(x), height, width)


# Model
class HalsieModel(Module):
    """Encoders per ablation setting, shared mixer and head."""

    def __init__(self, spec: NetworkSpec, setting: str = "H", seed: int = 0,
                 gamma: float = SURROGATE_WIDTH, dtype=np.float32):
        self.spec = spec
        self.setting = check_setting(setting)
        self.gamma = float(gamma)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        self.sfe = SpatialEncoder(spec.frame_channels, spec, rng, dtype) if self.setting in SPATIAL_FRAMES else None
        self.sfe_events = SpatialEncoder(2 * spec.bins, spec, rng, dtype) if self.setting in SPATIAL_EVENTS else None
        self.tfe = TemporalEncoder(2, spec, rng, gamma, dtype) if self.setting in TEMPORAL_EVENTS else None
        self.tfe_frames = (
            TemporalEncoder(spec.frame_channels, spec, rng, gamma, dtype)
            if self.setting in TEMPORAL_FRAMES else None
        )
        self.mmix = MultiScaleMixer(spec.stage_channels(spec.stages - 1), spec.stage_channels(0),
                                    spec, rng, dilated=self.setting != "F", dtype=dtype)
        self.head = SegmentationHead(self.mmix.out_channels, spec.head_width, spec.classes, rng, dtype)
        self.last_rates: Dict[str, List[float]] = {}
        logger.debug("Built setting %s model with %d parameters", self.setting, self.num_params())

    # input plumbing
    def _frame_batch(self, frame: ArrayLike) -> np.ndarray:
        data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
        if data.ndim == 2:
            data = data[None, None]
        elif data.ndim == 3:
            data = data[None]
        expected = (self.spec.frame_channels, self.spec.height, self.spec.width)
        if data.ndim != 4 or data.shape[1:] != expected:
            raise ShapeError(f"frame shape {data.shape} does not match N x {' x '.join(map(str, expected))}")
        return data.astype(self.dtype, copy=False)

    def _volume_batch(self, volume: Union[ArrayLike, EventVolume]) -> np.ndarray:
        if isinstance(volume, EventVolume):
            data = volume.data
        else:
            data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
        if data.ndim == 4:
            data = data[None]
        expected = (self.spec.bins, 2, self.spec.height, self.spec.width)
        if data.ndim != 5 or data.shape[1:] != expected:
            raise ShapeError(f"volume shape {data.shape} does not match N x {' x '.join(map(str, expected))}")
        return data.astype(self.dtype, copy=False)

    # pathways
    def tfe_forward(self, volume) -> TemporalFeatures:
        if self.tfe is None:
            raise UsageError(f"setting {self.setting} has no temporal encoder on events")
        features = self.tfe(self._volume_batch(volume))
        self.last_rates["tfe"] = features.rates
        return features

    def sfe_forward(self, frame) -> SpatialFeatures:
        if self.sfe is None:
            raise UsageError(f"setting {self.setting} has no spatial encoder on frames")
        return self.sfe(Tensor(self._frame_batch(frame)))

    def encode(self, frame, volume) -> FeaturePair:
        """
        Run the encoders of this setting. Dual-encoder ablations (D, E) put
        the event-side encoder in the mem slot.
        """
        space = mem = None
        if self.sfe is not None:
            space = self.sfe_forward(frame)
        if self.tfe_frames is not None:
            frames = self._frame_batch(frame)
            repeated = np.repeat(frames[:, None], self.spec.bins, axis=1)
            temporal = self.tfe_frames(repeated)
            self.last_rates["tfe_frames"] = temporal.rates
            space = SpatialFeatures(temporal.low, temporal.high)
        if self.tfe is not None:
            temporal = self.tfe_forward(volume)
            mem = SpatialFeatures(temporal.low, temporal.high)
        if self.sfe_events is not None:
            stacked = self._volume_batch(volume)
            n = stacked.shape[0]
            mem = self.sfe_events(Tensor(stacked.reshape(n, -1, self.spec.height, self.spec.width)))
        return FeaturePair(
            space.low if space else None, space.high if space else None,
            mem.low if mem else None, mem.high if mem else None,
        )

    def mmix_forward(self, u_high: Tensor, u_low: Tensor) -> Tensor:
        return self.mmix(u_high, u_low)

    def head_forward(self, u_mix: Tensor) -> Tensor:
        return self.head(u_mix, self.spec.height, self.spec.width)

    def mixed_features(self, frame, volume) -> Tensor:
        pair = self.encode(frame, volume)
        u_low = mix(pair.space_low, pair.mem_low)
        u_high = mix(pair.space_high, pair.mem_high)
        return self.mmix_forward(u_high, u_low)

    def forward(self, frame, volume) -> Tensor:
        """Logits N x K x H x W."""
        return self.head_forward(self.mixed_features(frame, volume))

    __call__ = forward

    # introspection
    def lif_layers(self) -> Iterator[Tuple[str, LifLayer]]:
        for name, module in self.named_modules():
            if isinstance(module, LifLayer):
                yield name, module

    def conv_layers(self) -> Iterator[Tuple[str, Conv2d]]:
        for name, module in self.named_modules():
            if isinstance(module, Conv2d):
                yield name, module

    def clamp_lif_(self) -> None:
        for _, layer in self.lif_layers():
            layer.clamp_()

    def set_surrogate_width(self, gamma: float) -> None:
        self.gamma = float(gamma)
        for _, layer in self.lif_layers():
            layer.gamma = gamma


def ablation_forward(setting: str, frame, volume, model: Optional[HalsieModel] = None,
                     spec: Optional[NetworkSpec] = None, seed: int = 0) -> Tensor:
    """Logits of one ablation setting; builds a fresh model unless one is given."""
    setting = check_setting(setting)
    if model is None:
        model = HalsieModel(spec or NetworkSpec(), setting=setting, seed=seed)
    elif model.setting != setting:
        raise ConfigError(f"model was built for setting {model.setting}, not {setting}")
    return model.forward(frame, volume)


def count_params(spec: NetworkSpec, setting: str = "H") -> int:
    """Learnable scalars: conv weights and biases, BN gamma/beta, per-layer v_th and lam."""
    return HalsieModel(spec, setting=setting).num_params()
