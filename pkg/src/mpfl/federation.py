"""Mask voting, consensus, FedAvg, and the node / parameter-server round logic.

During the pruning phase weights never leave the nodes: each node trains its
own copy, scores its groups, and uploads a one-bit-per-group mask.  The server
averages the masks into a vote histogram and reduces it with one of two
strategies:

* ``topk``   - keep a fixed per-layer budget of the most-voted groups, so the
  sparsity schedule is enforced exactly;
* ``histogram`` - keep groups whose vote fraction clears an agreement level,
  so outlier voters get filtered but the achieved sparsity is data-dependent.

Both are intersected with the previous global mask: pruning never reverts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ConstraintError, LayoutError
from .model import ArchSpec, ModelParams, PruneMask, ScoreVector, VoteHistogram
from .nn import backward, train_sgd
from .model import Batch
from .pruning import (
    _min_keep_per_layer,
    apply_mask,
    compute_mask,
    gradient_scores,
    prune_count,
    weight_scores,
)

log = logging.getLogger(__name__)

TOPK = "topk"
HISTOGRAM = "histogram"


def average_mask(masks: Sequence[PruneMask]) -> VoteHistogram:
    """Mean of the nodes' keep bits: the per-group keep-vote fraction."""
    if not masks:
        raise ConfigError("cannot average zero masks")
    arch = masks[0].arch
    for m in masks[1:]:
        if m.arch.groups != arch.groups:
            raise LayoutError("masks disagree on layer layout")
    layers = [
        np.mean([m.layers[i] for m in masks], axis=0, dtype=np.float64)
        for i in range(len(arch.groups))
    ]
    return VoteHistogram(arch, layers, n_nodes=len(masks))


def keep_budget(
    prev_mask: PruneMask, increment: float, min_keep: int | Sequence[int] = 1
) -> list[int]:
    """Per-layer keep target after one schedule increment on the live groups.

    This is exactly the keep count an honest node's percentile cut produces,
    so unanimous votes saturate the budget.
    """
    floors = _min_keep_per_layer(prev_mask.arch, min_keep)
    budget = []
    for live, floor in zip(prev_mask.keep_counts(), floors):
        budget.append(live - prune_count(live, increment, floor))
    return budget


def consensus_topk(
    hist: VoteHistogram,
    budget: Sequence[int],
    prev_mask: PruneMask,
    min_keep: int | Sequence[int] = 1,
) -> PruneMask:
    """Keep the most-voted live groups of each layer, at most ``budget[m]``.

    Vote ties are broken by keeping the lower group index.
    """
    arch = hist.arch
    if prev_mask.arch.groups != arch.groups:
        raise LayoutError("prev_mask layout does not match the histogram")
    if len(budget) != len(arch.groups):
        raise ConfigError(f"budget has {len(budget)} entries for {len(arch.groups)} layers")
    floors = _min_keep_per_layer(arch, min_keep)

    out = []
    for votes, prev, k, floor in zip(hist.layers, prev_mask.layers, budget, floors):
        if k < floor:
            raise ConstraintError(f"keep budget {k} is below the min_keep floor {floor}")
        live = np.flatnonzero(prev)
        bits = np.zeros_like(prev)
        if live.size:
            # descending vote, ties by ascending index
            order = np.lexsort((live, -votes[live]))
            bits[live[order[: min(k, live.size)]]] = True
        out.append(bits)
    return PruneMask(arch, out)


def consensus_histogram(
    hist: VoteHistogram,
    agreement: float,
    prev_mask: PruneMask,
    min_keep: int | Sequence[int] = 1,
) -> PruneMask:
    """Keep live groups whose keep-vote fraction is at least ``agreement``.

    Vote fractions are compared as integer counts (votes >= ceil(agreement*N))
    so the boundary case is exact.  If a layer would fall below its keep
    floor, the most-voted pruned groups are restored.
    """
    if not 0.0 < agreement <= 1.0:
        raise ConfigError(f"agreement must be in (0, 1], got {agreement}")
    arch = hist.arch
    if prev_mask.arch.groups != arch.groups:
        raise LayoutError("prev_mask layout does not match the histogram")
    floors = _min_keep_per_layer(arch, min_keep)
    needed = max(1, int(np.ceil(agreement * hist.n_nodes - 1e-9)))

    out = []
    for i, (prev, floor) in enumerate(zip(prev_mask.layers, floors)):
        votes = hist.keep_votes(i)
        bits = prev & (votes >= needed)
        short = min(floor, int(prev.sum())) - int(bits.sum())
        if short > 0:
            cand = np.flatnonzero(prev & ~bits)
            order = np.lexsort((cand, -votes[cand]))
            bits = bits.copy()
            bits[cand[order[:short]]] = True
        out.append(bits)
    return PruneMask(arch, out)


def fedavg(models: Sequence[ModelParams]) -> ModelParams:
    """Unweighted FedAvg: the coordinate mean of the node models."""
    if not models:
        raise ConfigError("cannot average zero models")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch.groups != arch.groups:
            raise LayoutError("models disagree on layout")
    weights = [np.mean([m.weights[i] for m in models], axis=0) for i in range(len(arch.groups))]
    biases = [np.mean([m.biases[i] for m in models], axis=0) for i in range(len(arch.groups))]
    return ModelParams(arch, weights, biases)


@dataclass
class Node:
    """One training participant: a data shard plus a private model copy."""

    node_id: int
    x: np.ndarray
    y: np.ndarray
    model: ModelParams
    rng: np.random.Generator
    lr: float = 0.1
    epochs_per_round: int = 3
    batch_size: int = 64
    scoring: str = "weight"  # "weight" or "gradient"
    p: int = 2
    min_keep: int | Sequence[int] = 1
    flagged: bool = False

    def train(self, mask: PruneMask) -> float:
        """Masked local SGD on the shard; returns the last batch loss."""
        self.model, loss = train_sgd(
            self.model,
            self.x,
            self.y,
            lr=self.lr,
            epochs=self.epochs_per_round,
            batch_size=self.batch_size,
            rng=self.rng,
            mask=mask,
        )
        return loss

    def scores(self) -> ScoreVector:
        if self.scoring == "weight":
            return weight_scores(self.model, self.p)
        if self.scoring == "gradient":
            grads = backward(self.model, Batch(self.x, self.y))
            return gradient_scores(grads, self.p)
        raise ConfigError(f"unknown scoring mode {self.scoring!r}")

    def local_round(self, global_mask: PruneMask, increment: float) -> PruneMask:
        """Train under the current global mask, then vote with a local mask.

        A node whose training diverges (non-finite loss) is flagged and votes
        to keep the previous mask unchanged.
        """
        loss = self.train(global_mask)
        if not np.isfinite(loss) or not self.model.is_finite():
            self.flagged = True
            log.warning("node %d: non-finite loss, submitting previous mask", self.node_id)
            return global_mask.copy()
        return compute_mask(self.scores(), increment, global_mask, self.min_keep)


@dataclass
class ParameterServer:
    """Holds the global mask and reduces the nodes' mask votes each round."""

    arch: ArchSpec
    strategy: str = TOPK
    agreement: float = 0.9
    min_keep: int | Sequence[int] = 1
    global_mask: PruneMask = field(init=False)
    budget_history: list[list[int]] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.strategy not in (TOPK, HISTOGRAM):
            raise ConfigError(f"unknown consensus strategy {self.strategy!r}")
        self.global_mask = PruneMask.ones(self.arch)

    def reduce(self, masks: Sequence[PruneMask], increment: float) -> PruneMask:
        """One consensus round; the result is monotone non-increasing."""
        hist = average_mask(masks)
        prev = self.global_mask
        if self.strategy == TOPK:
            budget = keep_budget(prev, increment, self.min_keep)
            new = consensus_topk(hist, budget, prev, self.min_keep)
        else:
            # the histogram strategy has no schedule budget: monotonicity is
            # the binding constraint, so the budget is the live count
            budget = prev.keep_counts()
            new = consensus_histogram(hist, self.agreement, prev, self.min_keep)
        new = new.intersect(prev)
        self.budget_history.append(budget)
        self.global_mask = new
        return new


def final_fl_phase(
    nodes: Sequence[Node], global_mask: PruneMask, rounds: int
) -> ModelParams:
    """Standard FedAvg fine-tuning of the pruned network.

    Round 0 is just the aggregation of the current local models; each further
    round broadcasts the average, trains every node under the frozen mask, and
    aggregates again.
    """
    if rounds < 0:
        raise ConfigError("final phase rounds must be >= 0")
    avg = apply_mask(fedavg([n.model for n in nodes]), global_mask)
    for _ in range(rounds):
        for node in nodes:
            node.model = avg.copy()
            node.train(global_mask)
        avg = apply_mask(fedavg([n.model for n in nodes]), global_mask)
    return avg
