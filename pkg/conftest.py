"""Shared fixtures: a 16x16 two-stage network small enough for gradient checks."""

import numpy as np
import pytest

from src.models import NetworkSpec


def toy_network_spec(**overrides) -> NetworkSpec:
    fields = dict(height=16, width=16, bins=2, stages=2, base_channels=2, classes=3,
                  mix_channels=4, low_channels=3, head_channels=4)
    fields.update(overrides)
    return NetworkSpec(**fields)


@pytest.fixture
def toy_spec() -> NetworkSpec:
    return toy_network_spec()


@pytest.fixture
def toy_inputs(toy_spec):
    """(frames N x 1 x H x W in [0, 1], volumes N x B x 2 x H x W, labels N x H x W)."""
    rng = np.random.default_rng(42)
    n, h, w = 2, toy_spec.height, toy_spec.width
    frames = rng.uniform(0, 1, (n, 1, h, w)).astype(np.float32)
    volumes = rng.uniform(0, 3, (n, toy_spec.bins, 2, h, w)).astype(np.float32)
    labels = rng.integers(0, toy_spec.classes, (n, h, w))
    return frames, volumes, labels
