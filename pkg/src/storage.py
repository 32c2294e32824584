"""Directory-backed store for scene samples and the netpbm images around them."""

import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import ParseError
from .evio import SceneSample, parse_events, write_events
from .models import SceneConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
_SAMPLE_RE = re.compile(r"^(\d{5})_events\.csv$")


# Netpbm images
def write_pgm(path: PathLike, image: np.ndarray) -> None:
    """Binary P5 grayscale, maxval 255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {image.shape}")
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.clip(image, 0, 255).astype(np.uint8).tobytes())


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Binary P6 color, H x W x 3."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got shape {image.shape}")
    height, width = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(image.astype(np.uint8).tobytes())


def _read_header(data: bytes, path: PathLike):
    """Parse magic, width, height, maxval; return them with the payload offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated netpbm header in {path}")
        tokens.append(data[start:pos].decode("ascii"))
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 is supported")
    return magic, width, height, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, width, height, offset = _read_header(data, path)
    if magic != "P5":
        raise ParseError(f"{path}: expected P5, found {magic}")
    payload = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    return payload.reshape(height, width).copy()


def read_ppm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, width, height, offset = _read_header(data, path)
    if magic != "P6":
        raise ParseError(f"{path}: expected P6, found {magic}")
    payload = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset)
    return payload.reshape(height, width, 3).copy()


class SceneStorage:
    """
    Samples as NNNNN_events.csv, NNNNN_frame.pgm and NNNNN_label.pgm under
    one directory, indexed on construction.
    """

    def __init__(self, data_dir: PathLike = "data/scene"):
        """
        Args:
            data_dir: Directory holding the sample files (created if missing)
        """
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.indexes: List[int] = []
        self._load_from_disk()

    def _paths(self, index: int) -> Dict[str, Path]:
        stem = f"{index:05d}"
        return {
            "events": self.data_dir / f"{stem}_events.csv",
            "frame": self.data_dir / f"{stem}_frame.pgm",
            "label": self.data_dir / f"{stem}_label.pgm",
        }

    def store_sample(self, index: int, sample: SceneSample) -> None:
        """Write the three files of one sample, overwriting earlier ones."""
        paths = self._paths(index)
        write_pgm(paths["frame"], sample.frame)
        write_pgm(paths["label"], sample.label)
        with open(paths["events"], "w", encoding="utf-8", newline="") as f:
            write_events(sample.window, f)
        if index not in self.indexes:
            self.indexes.append(index)
            self.indexes.sort()

    def get_sample(self, index: int) -> Optional[SceneSample]:
        """
        Read one sample; the event geometry comes from its frame.

        Returns:
            SceneSample if all three files exist, None otherwise
        """
        paths = self._paths(index)
        if not all(p.exists() for p in paths.values()):
            return None
        frame = read_pgm(paths["frame"])
        label = read_pgm(paths["label"])
        height, width = frame.shape
        with open(paths["events"], "r", encoding="utf-8") as f:
            window = parse_events(f, width, height)
        return SceneSample(frame, window, label)

    def list_samples(self) -> List[int]:
        return list(self.indexes)

    def load_all(self) -> List[SceneSample]:
        samples = []
        for index in self.indexes:
            sample = self.get_sample(index)
            if sample is not None:
                samples.append(sample)
        logger.info("Loaded %d samples from %s", len(samples), self.data_dir)
        return samples

    def store_config(self, config: SceneConfig) -> None:
        (self.data_dir / "scene.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")

    def _load_from_disk(self) -> None:
        """Index every NNNNN_events.csv that has its frame and label next to it."""
        for file_path in sorted(self.data_dir.glob("*_events.csv")):
            match = _SAMPLE_RE.match(file_path.name)
            if not match:
                continue
            index = int(match.group(1))
            if all(p.exists() for p in self._paths(index).values()):
                self.indexes.append(index)
            else:
                logger.warning("Skipping incomplete sample %05d in %s", index, self.data_dir)

