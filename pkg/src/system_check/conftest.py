"""Shared fixtures: toy architectures, tiny datasets, isolated settings."""

from typing import List, Sequence, Tuple

import numpy as np
import pytest

from lwdna.model_zoo import validate_arch
from lwdna.settings import reset_settings
from lwdna.types import (
    IMAGE_NODE,
    ArchSpec,
    ChannelConfig,
    HeadSpec,
    LayerSpec,
    NormPlacement,
    SynthSpec,
)


def make_chain(widths: Sequence[int], input_channels: int = 2, hw: Tuple[int, int] = (6, 6),
               num_classes: int = 3, norm: NormPlacement = NormPlacement.NONE, relu: bool = True,
               kernel: int = 3, name: str = "chain") -> ArchSpec:
    """Plain conv chain; bias-free with no normalization by default."""
    layers: List[LayerSpec] = []
    prev = IMAGE_NODE
    for i, _ in enumerate(widths):
        layers.append(LayerSpec(name=f"conv{i + 1}", inputs=[prev], kernel=kernel, padding=kernel // 2,
                                norm=norm, relu=relu))
        prev = f"conv{i + 1}"
    return validate_arch(ArchSpec(
        name=name, input_channels=input_channels, input_hw=hw, layers=layers,
        head=HeadSpec(inputs=[prev], num_classes=num_classes),
        default_config=ChannelConfig(values=list(widths)),
    ))


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch):
    """Every test sees default settings with progress bars off."""
    monkeypatch.setenv("LWDNA_PROGRESS", "false")
    monkeypatch.setenv("LWDNA_THREADS", "1")
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def chain3() -> ArchSpec:
    return make_chain([4, 5, 3])


@pytest.fixture
def tiny_synth() -> SynthSpec:
    return SynthSpec(num_classes=4, channels=3, hw=8, train_size=96, test_size=48)
