"""
Binary containers.

Tensor checkpoint (little-endian)::

    b"HALSIE01" | u32 count | count x (u32 name_len | name utf-8 | u32 rank | rank x u32 dim | f32 data)

Event volume::

    b"EVOL0001" | u32 B | u32 2 | u32 H | u32 W | f32 data

A model checkpoint `<path>` carries a JSON sidecar `<path>.json` with the
NetworkSpec, ablation setting and surrogate width needed to rebuild the model.
"""

import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Union

import numpy as np
from pydantic import ValidationError

from .errors import CheckpointError
from .evio import EventVolume
from .lif import SURROGATE_WIDTH
from .models import NetworkSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
TENSOR_MAGIC = b"HALSIE01"
VOLUME_MAGIC = b"EVOL0001"
_U32 = struct.Struct("<I")


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated file while reading {what}")
    return data


def _read_u32(f: BinaryIO, what: str) -> int:
    return _U32.unpack(_read_exact(f, 4, what))[0]


def write_tensors(tensors: Dict[str, np.ndarray], f: BinaryIO) -> None:
    f.write(TENSOR_MAGIC)
    f.write(_U32.pack(len(tensors)))
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        f.write(_U32.pack(len(encoded)))
        f.write(encoded)
        f.write(_U32.pack(array.ndim))
        for dim in array.shape:
            f.write(_U32.pack(dim))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensors(f: BinaryIO) -> Dict[str, np.ndarray]:
    if _read_exact(f, 8, "magic") != TENSOR_MAGIC:
        raise CheckpointError("not a tensor checkpoint (bad magic)")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(_read_u32(f, "tensor count")):
        name = _read_exact(f, _read_u32(f, "name length"), "name").decode("utf-8")
        rank = _read_u32(f, "rank")
        shape = tuple(_read_u32(f, "dimension") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(_read_exact(f, 4 * count, f"tensor '{name}'"), dtype="<f4")
        tensors[name] = data.astype(np.float32).reshape(shape)
    return tensors


def save_tensors(tensors: Dict[str, np.ndarray], path: PathLike) -> None:
    with open(path, "wb") as f:
        write_tensors(tensors, f)


def load_tensors(path: PathLike) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return read_tensors(f)


def sidecar_path(path: PathLike) -> Path:
    return Path(f"{path}.json")


def save_model(model, path: PathLike) -> None:
    """Weights, biases, LIF parameters and BN running statistics, plus the sidecar."""
    save_tensors(model.state_dict(), path)
    meta = {
        "format": TENSOR_MAGIC.decode(),
        "setting": model.setting,
        "gamma": model.gamma,
        "spec": model.spec.model_dump(),
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.info("Checkpoint written to %s", path)


def load_model(path: PathLike):
    """Rebuild the model described by the sidecar and fill it from the checkpoint."""
    from .network import HalsieModel

    tensors = load_tensors(path)
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        spec = NetworkSpec.model_validate(meta["spec"])
        setting = meta.get("setting", "H")
        gamma = float(meta.get("gamma", SURROGATE_WIDTH))
        if not gamma > 0:
            raise ValueError(f"surrogate width must be positive, got {gamma}")
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise CheckpointError(f"invalid checkpoint sidecar {meta_path}: {exc}") from exc
    model = HalsieModel(spec, setting=setting, gamma=gamma)
    model.load_state_dict(tensors)
    model.eval()
    return model


def save_volume(volume: EventVolume, path: PathLike) -> None:
    data = volume.data
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        for dim in data.shape:
            f.write(_U32.pack(dim))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_volume(path: PathLike) -> EventVolume:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"volume file not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, 8, "magic") != VOLUME_MAGIC:
            raise CheckpointError(f"{path} is not an event volume (bad magic)")
        shape = tuple(_read_u32(f, "dimension") for _ in range(4))
        count = int(np.prod(shape))
        data = np.frombuffer(_read_exact(f, 4 * count, "volume data"), dtype="<f4")
    return EventVolume(data=data.astype(np.float32).reshape(shape))
