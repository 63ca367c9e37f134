"""Shared fixtures and small helpers for the test suite."""

import numpy as np
import pytest

from mpfl.model import ArchSpec, ModelParams, PruneMask, init_params


def make_arch(*dims: int) -> ArchSpec:
    return ArchSpec.mlp(list(dims))


def make_model(arch: ArchSpec, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    return init_params(arch, rng)


def random_mask(arch: ArchSpec, rng: np.random.Generator, keep_prob: float = 0.7) -> PruneMask:
    """Random mask with at least one live group per layer."""
    layers = []
    for g in arch.groups:
        bits = rng.random(g) < keep_prob
        if not bits.any():
            bits[rng.integers(g)] = True
        layers.append(bits)
    return PruneMask(arch=arch, layers=layers)


@pytest.fixture
def tiny_arch() -> ArchSpec:
    return make_arch(4, 8, 3)


@pytest.fixture
def tiny_model(tiny_arch) -> ModelParams:
    return make_model(tiny_arch, seed=1)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
