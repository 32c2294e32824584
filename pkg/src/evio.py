"""
Event stream input: CSV parsing, windowing, voxelization and a synthetic
moving-shapes scene generator.

Events are kept column-wise (numpy arrays) inside EventWindow; the
single-record Event model is used at the edges (API, tests).
"""

import io
import logging
import math
import re
from typing import Dict, Iterable, List, NamedTuple, Optional, TextIO, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError, ParseError
from .models import BinningPolicy, SceneConfig

logger = logging.getLogger(__name__)

CSV_HEADER = "t_us,x,y,p"
INT64_MAX = int(np.iinfo(np.int64).max)
_DECIMAL = re.compile(r"-?[0-9]+")


class Event(BaseModel):
    """A single polarity change at a pixel."""
    t: int = Field(..., ge=0, description="Timestamp in microseconds")
    x: int = Field(..., ge=0)
    y: int = Field(..., ge=0)
    p: int = Field(..., ge=0, le=1)


class EventWindow(BaseModel):
    """Time-ordered batch of events with sensor geometry."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    t_start: int = 0
    t_end: int = 0

    @model_validator(mode="before")
    @classmethod
    def _coerce_columns(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            for key, dtype in (("t", np.int64), ("x", np.int32), ("y", np.int32), ("p", np.uint8)):
                data[key] = np.ascontiguousarray(np.asarray(data.get(key, ()), dtype=dtype).reshape(-1))
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "EventWindow":
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise ValueError("events are not sorted by timestamp")
            if self.t[0] < self.t_start or self.t[-1] > self.t_end:
                raise ValueError("event timestamps fall outside [t_start, t_end]")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("x outside sensor geometry")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("y outside sensor geometry")
            if self.p.max() > 1:
                raise ValueError("polarity must be 0 or 1")
        return self

    def __len__(self) -> int:
        return len(self.t)

    def event(self, i: int) -> Event:
        return Event(t=int(self.t[i]), x=int(self.x[i]), y=int(self.y[i]), p=int(self.p[i]))

    def select(self, index: Union[slice, np.ndarray], t_start: Optional[int] = None,
               t_end: Optional[int] = None) -> "EventWindow":
        """Sub-window of the events picked by `index` (order preserved)."""
        t = self.t[index]
        if t_start is None:
            t_start = int(t[0]) if len(t) else 0
        if t_end is None:
            t_end = int(t[-1]) if len(t) else t_start
        return EventWindow(t=t, x=self.x[index], y=self.y[index], p=self.p[index],
                           width=self.width, height=self.height, t_start=t_start, t_end=t_end)

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int) -> "EventWindow":
        events = sorted(events, key=lambda e: e.t)
        return cls.from_arrays(
            [e.t for e in events], [e.x for e in events], [e.y for e in events],
            [e.p for e in events], width, height,
        )

    @classmethod
    def from_arrays(cls, t, x, y, p, width: int, height: int) -> "EventWindow":
        """Build a window from unsorted columns; rows are sorted stably by t."""
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        order = np.argsort(t, kind="stable")
        t = t[order]
        return cls(
            t=t, x=np.asarray(x)[order], y=np.asarray(y)[order], p=np.asarray(p)[order],
            width=width, height=height,
            t_start=int(t[0]) if len(t) else 0,
            t_end=int(t[-1]) if len(t) else 0,
        )

    @classmethod
    def empty(cls, width: int, height: int, t_start: int = 0, t_end: int = 0) -> "EventWindow":
        return cls(t=(), x=(), y=(), p=(), width=width, height=height, t_start=t_start, t_end=t_end)


class EventVolume(BaseModel):
    """B temporal bins x 2 polarity channels (OFF=0, ON=1) x H x W."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray

    @model_validator(mode="after")
    def _check_shape(self) -> "EventVolume":
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ValueError(f"volume must be B x 2 x H x W, got {self.data.shape}")
        return self

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    def polarity_mass(self, polarity: int) -> float:
        return float(self.data[:, polarity].sum(dtype=np.float64))

    def nonzero_density(self) -> float:
        """Mean fraction of nonzero entries per timestep."""
        return float(np.count_nonzero(self.data)) / self.data.size if self.data.size else 0.0


# Parsing
def parse_events(stream: Union[TextIO, str], width: int, height: int) -> EventWindow:
    """
    Parse the `t_us,x,y,p` CSV format into a validated, sorted window.

    Args:
        stream: Text stream or the CSV text itself
        width: Sensor width W
        height: Sensor height H

    Returns:
        EventWindow spanning the smallest and largest timestamps

    Raises:
        ParseError: naming the 1-based line of the first malformed row
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    header = stream.readline()
    if header.strip().replace(" ", "") != CSV_HEADER:
        raise ParseError(f"expected header '{CSV_HEADER}'", line=1)

    rows: List[List[int]] = []
    for line_no, line in enumerate(stream, start=2):
        text = line.strip()
        if not text:
            continue
        fields = [f.strip() for f in text.split(",")]
        if len(fields) != 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", line=line_no)
        if not all(_DECIMAL.fullmatch(f) for f in fields):
            raise ParseError("non-integer field", line=line_no)
        t, x, y, p = (int(f) for f in fields)
        if t < 0:
            raise ParseError("negative timestamp", line=line_no)
        if t > INT64_MAX:
            raise ParseError("timestamp does not fit in 64 bits", line=line_no)
        if not 0 <= x < width:
            raise ParseError("x out of range", line=line_no)
        if not 0 <= y < height:
            raise ParseError("y out of range", line=line_no)
        if p not in (0, 1):
            raise ParseError("polarity must be 0 or 1", line=line_no)
        rows.append([t, x, y, p])

    if not rows:
        return EventWindow.empty(width, height)

    table = np.asarray(rows, dtype=np.int64)
    if np.any(np.diff(table[:, 0]) < 0):
        logger.warning("Events not sorted by timestamp; sorting %d rows", len(table))
    return EventWindow.from_arrays(table[:, 0], table[:, 1], table[:, 2], table[:, 3], width, height)


def write_events(window: EventWindow, stream: TextIO) -> None:
    """Write a window in the CSV format read by parse_events."""
    stream.write(CSV_HEADER + "\n")
    for t, x, y, p in zip(window.t.tolist(), window.x.tolist(), window.y.tolist(), window.p.tolist()):
        stream.write(f"{t},{x},{y},{p}\n")


# Windowing
def slice_windows(stream: EventWindow, policy: BinningPolicy) -> List[EventWindow]:
    """
    Split a sorted stream into consecutive, non-overlapping windows.

    cit: windows of equal duration starting at the first event; the last
    window is closed on the right so the final event is kept.
    ced: windows of exactly `count` events; the trailing partial window
    is dropped.
    """
    n = len(stream)
    if n == 0:
        return []

    if policy.mode == "ced":
        count = policy.count
        full = n // count
        if full == 0:
            logger.warning("CED count %d exceeds the %d available events", count, n)
        windows = [stream.select(slice(k * count, (k + 1) * count)) for k in range(full)]
        logger.debug("CED binning: %d windows of %d events from %d events", full, count, n)
        return windows

    duration_us = int(round(policy.duration_ms * 1000))
    if duration_us <= 0:
        raise ConfigError("cit duration must be at least 1 microsecond")
    t0 = int(stream.t[0])
    span = int(stream.t[-1]) - t0
    n_windows = max(1, math.ceil(span / duration_us))
    edges = t0 + duration_us * np.arange(n_windows + 1, dtype=np.int64)
    starts = np.searchsorted(stream.t, edges[:-1], side="left")
    stops = np.append(starts[1:], n)
    windows = [
        stream.select(slice(int(a), int(b)), t_start=int(edges[k]), t_end=int(edges[k + 1]))
        for k, (a, b) in enumerate(zip(starts, stops))
    ]
    logger.debug("CIT binning: %d windows of %d us from %d events", n_windows, duration_us, n)
    return windows


# Voxelization
def normalize_timestamps(window: EventWindow, bins: int) -> np.ndarray:
    """t* = (B-1)(t - t_1)/(t_N - t_1); all zeros when t_N == t_1."""
    if bins < 2:
        raise ConfigError(f"voxelization needs at least 2 bins, got {bins}")
    if len(window) == 0:
        return np.zeros(0, dtype=np.float64)
    t = window.t
    first, last = int(t[0]), int(t[-1])
    if last == first:
        return np.zeros(len(t), dtype=np.float64)
    return (bins - 1) * (t - first).astype(np.float64) / float(last - first)


def bilinear_kernel(a: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """k_b(a) = max(0, 1 - |a|)."""
    weight = np.maximum(0.0, 1.0 - np.abs(a))
    return float(weight) if np.ndim(weight) == 0 else weight


def accumulate_volume(x: np.ndarray, y: np.ndarray, p: np.ndarray, tstar: np.ndarray,
                      bins: int, height: int, width: int) -> np.ndarray:
    """Scatter events with precomputed normalized times into a B x 2 x H x W grid."""
    volume = np.zeros(bins * 2 * height * width, dtype=np.float64)
    if len(tstar):
        lower = np.floor(tstar).astype(np.int64)
        frac = tstar - lower
        pixel = (p.astype(np.int64) * height + y.astype(np.int64)) * width + x.astype(np.int64)
        plane = 2 * height * width

        inside = (lower >= 0) & (lower < bins)
        np.add.at(volume, lower[inside] * plane + pixel[inside], bilinear_kernel(frac[inside]))

        upper = lower + 1
        inside = (upper >= 0) & (upper < bins)
        np.add.at(volume, upper[inside] * plane + pixel[inside], bilinear_kernel(1.0 - frac[inside]))
    return volume.reshape(bins, 2, height, width)


def voxelize(window: EventWindow, bins: int) -> EventVolume:
    """
    Temporal bilinear voxel grid with separate OFF/ON channels.

    Each event adds weight 1 - |b - t*| to the two bins around t*, in the
    channel of its polarity, at its integer pixel.
    """
    tstar = normalize_timestamps(window, bins)
    data = accumulate_volume(window.x, window.y, window.p, tstar, bins, window.height, window.width)
    return EventVolume(data=data.astype(np.float32))


# Synthetic scenes
class SceneSample(NamedTuple):
    frame: np.ndarray  # H x W uint8
    window: EventWindow
    label: np.ndarray  # H x W uint8 class ids


class _MovingBox(NamedTuple):
    cls: int
    h: int
    w: int
    y0: float
    x0: float
    vy: float
    vx: float


BACKGROUND_LEVEL = 40
OBJECT_LEVEL = 200


class SceneGenerator:
    """
    Seeded moving-shapes renderer.

    The sequence is cut into clips of `clip_frames` frames; every clip
    respawns its objects at fresh sizes and positions. Objects of odd class
    c move along a random axis at velocity_px * (c + 1) // 2; objects of even
    class stay still. Every object is drawn at the same gray level, so class
    identity shows only through motion (events) while object extent shows in
    frames. Both cues survive flips and right-angle rotations.
    """

    def __init__(self, config: SceneConfig):
        if config.width * config.height == 0:
            raise ConfigError("scene geometry has zero area")
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self._clips: Dict[int, List[_MovingBox]] = {}
        gradient = np.linspace(0, 30, config.width, dtype=np.float64)
        self.background = np.broadcast_to(BACKGROUND_LEVEL + gradient, (config.height, config.width))

    def clip_boxes(self, clip: int) -> List[_MovingBox]:
        """Objects of clip `clip`; each clip draws from its own (seed, clip) stream."""
        if clip not in self._clips:
            rng = np.random.default_rng([self.config.seed, clip])
            self._clips[clip] = [self._spawn(i, rng) for i in range(self.config.num_objects)]
        return self._clips[clip]

    def _spawn(self, index: int, rng: np.random.Generator) -> _MovingBox:
        cfg = self.config
        cls = 1 + index % max(1, cfg.classes - 1) if cfg.classes > 1 else 0
        h = int(rng.integers(max(1, cfg.height // 8), max(2, cfg.height // 4) + 1))
        w = int(rng.integers(max(1, cfg.width // 8), max(2, cfg.width // 4) + 1))
        y0 = float(rng.integers(0, max(1, cfg.height - h + 1)))
        x0 = float(rng.integers(0, max(1, cfg.width - w + 1)))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        horizontal = rng.random() < 0.5
        speed = sign * cfg.velocity_px * ((cls + 1) // 2) if cls % 2 == 1 else 0.0
        vy, vx = (0.0, speed) if horizontal else (speed, 0.0)
        return _MovingBox(cls, h, w, y0, x0, vy, vx)

    def _position(self, box: _MovingBox, time: float) -> tuple:
        """Integer top-left corner at clip-local `time` (frames), reflecting at borders."""
        cfg = self.config
        return (_reflect(box.y0 + box.vy * time, cfg.height - box.h),
                _reflect(box.x0 + box.vx * time, cfg.width - box.w))

    def render(self, time: float, clip: Optional[int] = None) -> tuple:
        """
        Intensity (float 0-255) and label map at fractional frame `time`.

        `clip` defaults to the clip containing `time`; pass it to render the
        end of a clip at its closing frame boundary.
        """
        if clip is None:
            clip = int(time // self.config.clip_frames)
        local = time - clip * self.config.clip_frames
        intensity = np.array(self.background, dtype=np.float64)
        label = np.zeros((self.config.height, self.config.width), dtype=np.uint8)
        for box in self.clip_boxes(clip):
            y, x = self._position(box, local)
            intensity[y:y + box.h, x:x + box.w] = OBJECT_LEVEL
            label[y:y + box.h, x:x + box.w] = box.cls
        return intensity, label

    def _noise(self, t_start: int, t_end: int) -> tuple:
        cfg = self.config
        expected = cfg.noise_rate_hz * cfg.width * cfg.height * (t_end - t_start) * 1e-6
        n = int(self.rng.poisson(expected)) if expected > 0 else 0
        t = self.rng.integers(t_start, t_end + 1, size=n)
        x = self.rng.integers(0, cfg.width, size=n)
        y = self.rng.integers(0, cfg.height, size=n)
        p = self.rng.integers(0, 2, size=n)
        return t, x, y, p

    def sample(self, index: int) -> SceneSample:
        """Frame `index + 1`, the events since frame `index`, and its labels, all from one clip."""
        cfg = self.config
        dt = cfg.frame_dt_us
        t_start = index * dt
        clip = index // cfg.clip_frames
        fastest = max((abs(b.vy) + abs(b.vx) for b in self.clip_boxes(clip)), default=0.0)
        substeps = max(1, math.ceil(fastest))
        cols = [[], [], [], []]

        previous, _ = self.render(index, clip)
        for s in range(1, substeps + 1):
            current, _ = self.render(index + s / substeps, clip)
            diff = current - previous
            ys, xs = np.nonzero(diff)
            if len(ys):
                lo = t_start + (s - 1) * dt // substeps
                hi = t_start + s * dt // substeps
                cols[0].append(self.rng.integers(lo, max(lo + 1, hi), size=len(ys)))
                cols[1].append(xs)
                cols[2].append(ys)
                cols[3].append((diff[ys, xs] > 0).astype(np.uint8))
            previous = current

        for col, extra in zip(cols, self._noise(t_start, t_start + dt)):
            col.append(np.asarray(extra))

        t, x, y, p = (np.concatenate(c) if c else np.zeros(0) for c in cols)
        order = np.lexsort((x, y, t))
        window = EventWindow(
            t=t[order], x=x[order], y=y[order], p=p[order],
            width=cfg.width, height=cfg.height, t_start=t_start, t_end=t_start + dt,
        )
        frame, label = self.render(index + 1, clip)
        return SceneSample(np.clip(frame, 0, 255).astype(np.uint8), window, label)


def _reflect(pos: float, limit: int) -> int:
    """Fold a free position into [0, limit] as if bouncing off both ends."""
    if limit <= 0:
        return 0
    period = 2 * limit
    pos = math.floor(pos) % period
    return int(pos if pos <= limit else period - pos)


def synth_scene(config: SceneConfig, seed: Optional[int] = None) -> List[SceneSample]:
    """Deterministic (frame, events, labels) triples for `config.frames` frames."""
    if seed is not None:
        config = SceneConfig.model_validate({**config.model_dump(), "seed": seed})
    generator = SceneGenerator(config)
    samples = [generator.sample(i) for i in range(config.frames)]
    logger.info(
        "Synthesized %d samples (%d events total)", len(samples), sum(len(s.window) for s in samples)
    )
    return samples
