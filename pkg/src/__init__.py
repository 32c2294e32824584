"""HALSIE hybrid event/frame semantic segmentation"""

from .errors import (
    CheckpointError,
    ConfigError,
    HalsieError,
    LabelError,
    ParseError,
    ShapeError,
    UsageError,
)
from .models import BinningPolicy, NetworkSpec, SceneConfig, TrainConfig
from .network import HalsieModel, count_params

__version__ = "1.0.0"
__all__ = [
    "HalsieModel",
    "count_params",
    "NetworkSpec",
    "SceneConfig",
    "TrainConfig",
    "BinningPolicy",
    "HalsieError",
    "ParseError",
    "ConfigError",
    "ShapeError",
    "LabelError",
    "UsageError",
    "CheckpointError",
]
