"""Optimization loop, schedule, augmentation and segmentation metrics."""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import autodiff as ad
from .checkpoint import save_model
from .errors import ConfigError, ShapeError, UsageError
from .evio import SceneSample, voxelize
from .models import EpochLog, MetricsReport, TrainConfig

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_accuracy", "val_miou")


class TrainSample(NamedTuple):
    frame: np.ndarray  # C x H x W uint8
    volume: np.ndarray  # B x 2 x H x W float32
    label: np.ndarray  # H x W uint8


class TrainResult(NamedTuple):
    model: object
    log: List[EpochLog]
    class_weights: np.ndarray


def worker_threads() -> int:
    """HALSIE_THREADS, default 1 (fully deterministic ordering)."""
    try:
        return max(1, int(os.getenv("HALSIE_THREADS", "1")))
    except ValueError:
        return 1


def build_dataset(samples: Sequence[SceneSample], bins: int) -> List[TrainSample]:
    dataset = []
    for sample in samples:
        frame = sample.frame if sample.frame.ndim == 3 else sample.frame[None]
        dataset.append(TrainSample(frame, voxelize(sample.window, bins).data, sample.label))
    return dataset


# Optimizer
class AdamState:
    def __init__(self, shapes: Sequence[tuple], dtype=np.float64):
        self.step = 0
        self.m = [np.zeros(s, dtype=dtype) for s in shapes]
        self.v = [np.zeros(s, dtype=dtype) for s in shapes]


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected ADAM update applied in place; a None gradient leaves its parameter alone."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    """ADAM over a model's parameters; LIF parameters are clamped after every step."""

    def __init__(self, model, config: TrainConfig):
        self.model = model
        self.params = model.parameters()
        self.config = config
        self.state = AdamState([p.shape for p in self.params])

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr,
                  self.config.beta1, self.config.beta2, self.config.eps)
        self.model.clamp_lif_()


def clip_grad_norm(params: Sequence[ad.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 * decay^floor(epoch / step)."""
    return config.lr * config.lr_decay ** (epoch // config.lr_step_epochs)


# Augmentation
class Transform(NamedTuple):
    flip: bool
    quarter_turns: int
    top: int
    left: int
    crop: Optional[int]


def draw_transform(rng: np.random.Generator, height: int, width: int, crop: Optional[int],
                   flip_prob: float = 0.5) -> Transform:
    flip = bool(rng.random() < flip_prob)
    turns = int(rng.integers(0, 4))
    if turns % 2:
        height, width = width, height
    top = left = 0
    if crop is not None:
        if height < crop or width < crop:
            raise ShapeError(f"input {height}x{width} is smaller than the {crop}x{crop} crop")
        top = int(rng.integers(0, height - crop + 1))
        left = int(rng.integers(0, width - crop + 1))
    return Transform(flip, turns, top, left, crop)


def apply_transform(transform: Transform, frame: np.ndarray, volume: np.ndarray,
                    label: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Same geometric transform on the last two axes of every input."""
    out = []
    for array in (frame, volume, label):
        if transform.flip:
            array = array[..., ::-1]
        if transform.quarter_turns:
            array = np.rot90(array, transform.quarter_turns, axes=(-2, -1))
        if transform.crop is not None:
            c = transform.crop
            array = array[..., transform.top:transform.top + c, transform.left:transform.left + c]
        out.append(np.ascontiguousarray(array))
    return out[0], out[1], out[2]


def augment(frame: np.ndarray, volume: np.ndarray, label: np.ndarray, rng: np.random.Generator,
            crop: Optional[int] = None, flip_prob: float = 0.5):
    """Random horizontal flip, right-angle rotation and crop, consistent across the triple."""
    transform = draw_transform(rng, label.shape[-2], label.shape[-1], crop, flip_prob)
    return apply_transform(transform, frame, volume, label)


def center_crop(array: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = array.shape[-2:]
    if h < height or w < width:
        raise ShapeError(f"input {h}x{w} is smaller than {height}x{width}")
    top, left = (h - height) // 2, (w - width) // 2
    return array[..., top:top + height, left:left + width]


# Dataset plumbing
def split_dataset(count: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded permutation; the first round(count * val_fraction) indexes go to validation."""
    order = np.random.default_rng(seed).permutation(count)
    n_val = int(round(count * val_fraction))
    if 0 < count <= n_val:
        n_val = count - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def inverse_frequency_weights(labels: Sequence[np.ndarray], classes: int, ignore_id: int = 255) -> np.ndarray:
    """1/frequency normalized to mean 1 over classes present; absent classes get 1."""
    counts = np.zeros(classes, dtype=np.float64)
    for label in labels:
        valid = label[label != ignore_id]
        counts += np.bincount(valid.reshape(-1).astype(np.int64), minlength=classes)[:classes]
    weights = np.ones(classes, dtype=np.float64)
    present = counts > 0
    if present.any():
        inverse = 1.0 / counts[present]
        weights[present] = inverse / inverse.mean()
    return weights


def batches(indexes: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled full batches; the final partial batch is dropped unless it is the only one."""
    order = rng.permutation(indexes)
    full = len(order) // batch_size
    if full == 0:
        return [order] if len(order) else []
    return [order[k * batch_size:(k + 1) * batch_size] for k in range(full)]


def to_model_inputs(frames: np.ndarray, volumes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """uint8 frames to [0, 1]; volumes stay raw kernel-weighted counts."""
    return frames.astype(np.float32) / 255.0, volumes.astype(np.float32)


# Metrics
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    def __init__(self, classes: int, ignore_id: int = 255):
        self.classes = classes
        self.ignore_id = ignore_id
        self.matrix = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred: np.ndarray, label: np.ndarray) -> None:
        if pred.shape != label.shape:
            raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ")
        label = label.astype(np.int64)
        keep = (label != self.ignore_id) & (label >= 0) & (label < self.classes)
        index = self.classes * label[keep] + pred.astype(np.int64)[keep]
        self.matrix += np.bincount(index, minlength=self.classes ** 2).reshape(self.classes, self.classes)

    def accuracy(self) -> float:
        total = self.matrix.sum()
        return float(np.trace(self.matrix) / total) if total else 0.0

    def iou(self) -> List[Optional[float]]:
        """Per-class IoU; None for classes absent from the ground truth."""
        tp = np.diag(self.matrix)
        gt = self.matrix.sum(axis=1)
        union = gt + self.matrix.sum(axis=0) - tp
        return [float(tp[k] / union[k]) if gt[k] > 0 else None for k in range(self.classes)]

    def report(self) -> MetricsReport:
        ious = self.iou()
        present = [v for v in ious if v is not None]
        return MetricsReport(
            accuracy=self.accuracy(),
            per_class_iou=ious,
            miou=float(np.mean(present)) if present else 0.0,
            confusion=self.matrix.tolist(),
        )


def predict(model, frames: np.ndarray, volumes: np.ndarray) -> np.ndarray:
    """Class ids N x H x W; argmax ties go to the lowest id."""
    frames, volumes = to_model_inputs(frames, volumes)
    logits = model.forward(frames, volumes)
    return np.argmax(logits.data, axis=1).astype(np.uint8)


def evaluate(model, dataset: Sequence[TrainSample], batch_size: int = 8, ignore_id: int = 255) -> MetricsReport:
    """Eval-mode pixel accuracy and IoU over `dataset` (center-cropped to the model geometry)."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    spec = model.spec
    matrix = ConfusionMatrix(spec.classes, ignore_id)
    try:
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            frames = np.stack([center_crop(s.frame, spec.height, spec.width) for s in chunk])
            volumes = np.stack([center_crop(s.volume, spec.height, spec.width) for s in chunk])
            labels = np.stack([center_crop(s.label, spec.height, spec.width) for s in chunk])
            matrix.update(predict(model, frames, volumes), labels)
    finally:
        model.train(was_training)
    return matrix.report()


# Training
def _prepare(item: Tuple[TrainSample, int], crop: Optional[int], flip_prob: float):
    sample, seed = item
    return augment(sample.frame, sample.volume, sample.label, np.random.default_rng(seed), crop, flip_prob)


def train(model, dataset: Sequence[TrainSample], config: TrainConfig,
          checkpoint_path: Optional[Path] = None, log_path: Optional[Path] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """
    Minimize weighted pixel-wise cross entropy with ADAM and a step schedule.

    Augmentation runs on HALSIE_THREADS workers with per-sample seeds drawn
    up front, so results do not depend on the thread count. The checkpoint
    and the CSV log are rewritten after every epoch.
    """
    if len(dataset) == 0:
        raise UsageError("training set is empty")
    spec = model.spec
    if config.bins != spec.bins:
        raise ConfigError(f"train config uses {config.bins} bins, network expects {spec.bins}")
    crop = config.crop
    if crop is not None and (crop != spec.height or crop != spec.width):
        raise ConfigError(f"crop {crop} does not match network input {spec.height}x{spec.width}")

    rng = np.random.default_rng(config.seed)
    train_idx, val_idx = split_dataset(len(dataset), config.val_fraction, config.seed)
    if config.class_weights is not None:
        weights = np.asarray(config.class_weights, dtype=np.float64)
        if weights.shape != (spec.classes,):
            raise ConfigError(f"expected {spec.classes} class weights, got {len(config.class_weights)}")
    else:
        weights = inverse_frequency_weights([dataset[i].label for i in train_idx], spec.classes, config.ignore_id)
    val_set = [dataset[i] for i in val_idx] or [dataset[i] for i in train_idx]

    model.set_surrogate_width(config.surrogate_gamma)
    optimizer = Adam(model, config)
    log: List[EpochLog] = []
    threads = worker_threads()
    logger.info("Training setting %s on %d samples (%d validation), %d threads",
                model.setting, len(train_idx), len(val_idx), threads)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            model.train()
            losses = []
            for batch in batches(train_idx, config.batch_size, rng):
                seeds = rng.integers(0, 2 ** 63 - 1, size=len(batch))
                items = zip([dataset[i] for i in batch], seeds.tolist())
                prepared = list(pool.map(lambda it: _prepare(it, crop, config.flip_prob), items))
                frames, volumes = to_model_inputs(
                    np.stack([p[0] for p in prepared]), np.stack([p[1] for p in prepared])
                )
                labels = np.stack([p[2] for p in prepared])

                with ad.Tape():
                    logits = model.forward(frames, volumes)
                    loss = ad.weighted_cross_entropy(logits, labels, weights, config.ignore_id)
                    ad.backward(loss)
                value = loss.item()
                if not math.isfinite(value):
                    logger.warning("Non-finite loss at epoch %d; skipping batch", epoch)
                    model.zero_grad()
                    continue
                clip_grad_norm(optimizer.params, config.grad_clip)
                optimizer.step(lr)
                model.zero_grad()
                losses.append(value)

            metrics = evaluate(model, val_set, config.batch_size, config.ignore_id)
            entry = EpochLog(
                epoch=epoch, lr=lr,
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                val_accuracy=metrics.accuracy, val_miou=metrics.miou,
            )
            log.append(entry)
            logger.info("Epoch %d lr=%.3g loss=%.4f acc=%.4f mIoU=%.4f",
                        epoch, lr, entry.train_loss, entry.val_accuracy, entry.val_miou)
            if checkpoint_path is not None:
                save_model(model, checkpoint_path)
            if log_path is not None:
                with open(log_path, "w", encoding="utf-8", newline="") as f:
                    write_training_log(log, f)
            if on_epoch is not None:
                on_epoch(entry)

    return TrainResult(model, log, weights)


# Reports
def write_training_log(log: Sequence[EpochLog], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for e in log:
        writer.writerow([e.epoch, f"{e.lr:.6g}", f"{e.train_loss:.6f}", f"{e.val_accuracy:.6f}", f"{e.val_miou:.6f}"])


def write_metrics_csv(report: MetricsReport, stream: TextIO) -> None:
    """Confusion matrix (rows = ground truth) followed by summary lines."""
    writer = csv.writer(stream, lineterminator="\n")
    classes = len(report.confusion)
    writer.writerow(["gt\\pred"] + [str(k) for k in range(classes)])
    for k, row in enumerate(report.confusion):
        writer.writerow([str(k)] + row)
    writer.writerow([])
    writer.writerow(["accuracy", f"{report.accuracy:.6f}"])
    writer.writerow(["miou", f"{report.miou:.6f}"])
    for k, iou in enumerate(report.per_class_iou):
        writer.writerow([f"iou_{k}", "" if iou is None else f"{iou:.6f}"])


def format_metrics(report: MetricsReport) -> str:
    lines = ["=" * 48, "SEGMENTATION METRICS", "=" * 48,
             f"Pixel accuracy: {report.accuracy:.4f}", f"mIoU:           {report.miou:.4f}"]
    for k, iou in enumerate(report.per_class_iou):
        lines.append(f"  class {k}: " + ("absent" if iou is None else f"{iou:.4f}"))
    lines.append("=" * 48)
    return "\n".join(lines)

