"""Shared data model: layer layout, parameters, pruning masks, scores, votes.

The prunable unit everywhere is a weight *group*: one output neuron of a dense
layer, i.e. its incoming weight row plus its bias.  A mask therefore carries a
single bit per neuron, which is what makes the uplink cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LayoutError

DENSE = "dense"
RELU = "relu"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network; only dense layers own parameters."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in (DENSE, RELU):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == DENSE and (self.in_dim <= 0 or self.out_dim <= 0):
            raise ConfigError(
                f"dense layer dims must be positive, got {self.in_dim}x{self.out_dim}"
            )

    @property
    def groups(self) -> int:
        """Number of prunable weight groups (one per output neuron)."""
        return self.out_dim if self.kind == DENSE else 0

    @property
    def group_size(self) -> int:
        """Scalars owned by one group: the weight row plus the bias."""
        return self.in_dim + 1 if self.kind == DENSE else 0


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer list describing a small dense classifier."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        dense = self.dense_layers
        if not dense:
            raise ConfigError("architecture needs at least one dense layer")
        for a, b in zip(dense, dense[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(
                    f"adjacent dense layers do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @classmethod
    def mlp(cls, dims: Sequence[int]) -> "ArchSpec":
        """Dense chain with a ReLU between consecutive dense layers.

        ``dims`` is ``[input, hidden..., classes]``.
        """
        if len(dims) < 2:
            raise ConfigError("mlp needs at least input and output dims")
        layers: list[LayerSpec] = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            layers.append(LayerSpec(DENSE, int(a), int(b)))
            if i < len(dims) - 2:
                layers.append(LayerSpec(RELU))
        return cls(tuple(layers))

    @property
    def dense_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == DENSE)

    @property
    def groups(self) -> tuple[int, ...]:
        """Prunable group count per dense layer."""
        return tuple(l.groups for l in self.dense_layers)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(l.group_size for l in self.dense_layers)

    @property
    def in_dim(self) -> int:
        return self.dense_layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.dense_layers[-1].out_dim

    @property
    def num_groups(self) -> int:
        return sum(self.groups)

    @property
    def num_params(self) -> int:
        return sum(g * s for g, s in zip(self.groups, self.group_sizes))


@dataclass
class ModelParams:
    """Per-dense-layer weights (out x in) and biases (out,), float64.

    Also used for gradients, which share the exact same layout.
    """

    arch: ArchSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dense = self.arch.dense_layers
        if len(self.weights) != len(dense) or len(self.biases) != len(dense):
            raise LayoutError(
                f"expected {len(dense)} dense layers, got "
                f"{len(self.weights)} weight / {len(self.biases)} bias arrays"
            )
        for i, (spec, w, b) in enumerate(zip(dense, self.weights, self.biases)):
            if w.shape != (spec.out_dim, spec.in_dim):
                raise LayoutError(
                    f"layer {i}: weight shape {w.shape} != "
                    f"({spec.out_dim}, {spec.in_dim})"
                )
            if b.shape != (spec.out_dim,):
                raise LayoutError(f"layer {i}: bias shape {b.shape} != ({spec.out_dim},)")

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def group_matrix(self, layer: int) -> np.ndarray:
        """Rows are groups: weight row with the bias appended, shape (out, in+1)."""
        return np.hstack([self.weights[layer], self.biases[layer][:, None]])

    @property
    def num_params(self) -> int:
        return self.arch.num_params

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return all(
            np.allclose(a, b, **kw)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


# Gradients share ModelParams' layout exactly; the alias keeps signatures honest.
Gradients = ModelParams


@dataclass(frozen=True)
class Batch:
    """A minibatch of feature rows and integer class labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2:
            raise ConfigError(f"batch features must be 2-D, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise ConfigError(
                f"labels shape {self.y.shape} does not match {self.x.shape[0]} rows"
            )

    def __len__(self) -> int:
        return self.x.shape[0]


def _check_mask_layout(arch: ArchSpec, layers: Sequence[np.ndarray]) -> None:
    if len(layers) != len(arch.groups):
        raise LayoutError(
            f"mask has {len(layers)} layers, architecture has {len(arch.groups)}"
        )
    for i, (bits, n) in enumerate(zip(layers, arch.groups)):
        if bits.shape != (n,):
            raise LayoutError(f"mask layer {i}: shape {bits.shape} != ({n},)")


@dataclass
class PruneMask:
    """One keep/drop bit per weight group, grouped per dense layer."""

    arch: ArchSpec
    layers: list[np.ndarray]  # bool arrays

    def __post_init__(self):
        self.layers = [np.asarray(l, dtype=bool) for l in self.layers]
        _check_mask_layout(self.arch, self.layers)

    @classmethod
    def ones(cls, arch: ArchSpec) -> "PruneMask":
        return cls(arch, [np.ones(n, dtype=bool) for n in arch.groups])

    @classmethod
    def zeros(cls, arch: ArchSpec) -> "PruneMask":
        return cls(arch, [np.zeros(n, dtype=bool) for n in arch.groups])

    def copy(self) -> "PruneMask":
        return PruneMask(self.arch, [l.copy() for l in self.layers])

    def keep_counts(self) -> list[int]:
        return [int(l.sum()) for l in self.layers]

    @property
    def num_groups(self) -> int:
        return self.arch.num_groups

    def num_kept(self) -> int:
        return sum(self.keep_counts())

    def sparsity(self) -> float:
        """Fraction of groups pruned."""
        return 1.0 - self.num_kept() / self.num_groups

    def intersect(self, other: "PruneMask") -> "PruneMask":
        _check_mask_layout(self.arch, other.layers)
        return PruneMask(self.arch, [a & b for a, b in zip(self.layers, other.layers)])

    def issubset(self, other: "PruneMask") -> bool:
        """True if every group kept here is also kept in ``other``."""
        return all(bool(np.all(b | ~a)) for a, b in zip(self.layers, other.layers))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PruneMask):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))


@dataclass
class ScoreVector:
    """Per-group importance scores, grouped per dense layer.  Non-negative."""

    arch: ArchSpec
    layers: list[np.ndarray]

    def __post_init__(self):
        self.layers = [np.asarray(l, dtype=np.float64) for l in self.layers]
        _check_mask_layout(self.arch, self.layers)
        for i, l in enumerate(self.layers):
            if np.any(l < 0):
                raise LayoutError(f"score layer {i} has negative entries")

    def concat(self) -> np.ndarray:
        return np.concatenate(self.layers) if self.layers else np.zeros(0)


@dataclass
class VoteHistogram:
    """Per-group keep-vote fractions: entry * n_nodes is an integer count."""

    arch: ArchSpec
    layers: list[np.ndarray]
    n_nodes: int

    def __post_init__(self):
        _check_mask_layout(self.arch, self.layers)
        if self.n_nodes <= 0:
            raise ConfigError("vote histogram needs n_nodes >= 1")

    def keep_votes(self, layer: int) -> np.ndarray:
        """Integer keep-vote counts for one layer."""
        return np.rint(self.layers[layer] * self.n_nodes).astype(np.int64)


def init_params(arch: ArchSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform(-a, a) weights with a = sqrt(6 / (in + out)); zero biases."""
    weights, biases = [], []
    for spec in arch.dense_layers:
        a = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-a, a, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return ModelParams(arch, weights, biases)
