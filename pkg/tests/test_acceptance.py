"""End-to-end acceptance checks for the whole package.

Each test covers one headline guarantee and prints a single PASS/FAIL line,
so ``pytest tests/test_acceptance.py -v -s`` doubles as a release checklist.
All tolerances and budgets are pinned here, not computed.
"""

import dataclasses
import time

import numpy as np
import pytest

from mpfl.config import config_from_dict
from mpfl.experiment import (
    charge_lth_upload,
    lth_upload_bits,
    run,
    write_metrics,
)
from mpfl.federation import average_mask, consensus_histogram, fedavg
from mpfl.fuzz import corrupt_frame_fuzz, roundtrip_fuzz
from mpfl.model import ArchSpec, Batch, ModelParams, PruneMask, init_params
from mpfl.nn import backward, forward
from mpfl.pruning import compute_mask, weight_scores
from mpfl.wire import BandwidthLedger, savings_ratio, vgg16_dense_bits, vgg16_mask_bits

from conftest import random_mask


def _verdict(ok: bool, label: str, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'}: {label} [{detail}]")
    assert ok, f"{label}: {detail}"


# --- fixed 10-node benchmark -------------------------------------------------
#
# One seeded blobs instance shared by the consensus, accuracy, bandwidth, and
# determinism tests below.  The clean pair measures pruning cost against an
# unpruned FedAvg run; the contaminated pair adds one high-variance-feature
# node and one label-shuffled node and pits mask voting against pruning the
# averaged weights.

DESK_SEED = 7
DESK_NOISE_SIGMA = 16.0


def desk_config(algorithm: str, contaminated: bool):
    raw = {
        "seed": DESK_SEED,
        "algorithm": algorithm,
        "nodes": 10,
        "final_rounds": 10,
        "arch": {"input_dim": 64, "hidden": [512], "classes": 10},
        "dataset": {
            "kind": "blobs",
            "samples": 6000,
            "features": 64,
            "classes": 10,
            "cluster_std": 5.5,
        },
        "training": {"lr": 0.1, "epochs_per_round": 3, "batch_size": 64},
        "pruning": {
            "schedule": [] if algorithm == "fedavg" else [0.1] * 5,
            "min_keep": [1, 10],
        },
    }
    if contaminated:
        raw["contamination"] = [
            {"node": 0, "kind": "noise", "sigma": DESK_NOISE_SIGMA},
            {"node": 1, "kind": "labels"},
        ]
    return config_from_dict(raw)


@dataclasses.dataclass
class DeskBattery:
    clean_mpfl: object
    clean_fedavg: object
    cont_mpfl: object
    cont_pfl: object
    elapsed: float


@pytest.fixture(scope="module")
def desk(request) -> DeskBattery:
    t0 = time.monotonic()
    battery = DeskBattery(
        clean_mpfl=run(desk_config("mpfl", False)),
        clean_fedavg=run(desk_config("fedavg", False)),
        cont_mpfl=run(desk_config("mpfl", True)),
        cont_pfl=run(desk_config("pruning_fl", True)),
        elapsed=0.0,
    )
    battery.elapsed = time.monotonic() - t0
    return battery


# --- 1: mask exchange beats dense weight exchange on the VGG16 layout --------


def test_01_vgg16_mask_exchange_bit_counts():
    t0 = time.monotonic()
    dense = vgg16_dense_bits()
    mask = vgg16_mask_bits()
    savings = savings_ratio(dense, mask)
    elapsed = time.monotonic() - t0
    ok = (
        dense == 1_182_720
        and mask == 16_512
        and abs(savings - 0.986) < 5e-4
        and elapsed < 1.0
    )
    _verdict(
        ok,
        "per-round VGG16 exchange: dense bits, mask bits, savings",
        f"dense={dense} mask={mask} savings={savings:.6f} elapsed={elapsed:.3f}s",
    )


# --- 2: one-shot centralized baseline pays the raw-dataset upload ------------


def test_02_centralized_upload_cost_per_node():
    t0 = time.monotonic()
    per_node = lth_upload_bits(6000, 3072, 8)
    mib = per_node / 8 / 2**20
    ledger = BandwidthLedger()
    charge_lth_upload(ledger, [6000] * 10, 3072, 8)
    elapsed = time.monotonic() - t0
    ok = (
        per_node == 147_504_000
        and abs(mib - 17.6) / 17.6 < 0.01
        and ledger.total_bits(category="data") == 10 * per_node
        and set(ledger.per_node_bits().values()) == {per_node}
        and elapsed < 1.0
    )
    _verdict(
        ok,
        "raw shard upload cost per node (6000 images, 3072 px, 8-bit)",
        f"bits={per_node} ({mib:.4f} MiB, target 17.6 +/- 1%) elapsed={elapsed:.3f}s",
    )


# --- 3: group scores of an averaged model never exceed averaged scores -------


def test_03_score_of_average_bounded_by_average_of_scores():
    rng = np.random.default_rng(20260825)
    worst = -np.inf
    for _ in range(1000):
        n_nodes = int(rng.integers(1, 11))
        in_dim = int(rng.integers(1, 64))  # group size = in_dim + 1 <= 64
        out_dim = int(rng.integers(1, 9))
        arch = ArchSpec.mlp([in_dim, out_dim])
        models = [
            ModelParams(
                arch,
                [rng.normal(size=(out_dim, in_dim))],
                [rng.normal(size=out_dim)],
            )
            for _ in range(n_nodes)
        ]
        avg = fedavg(models)
        for p in (1, 2):
            lhs = weight_scores(avg, p).concat()
            rhs = np.mean([weight_scores(m, p).concat() for m in models], axis=0)
            worst = max(worst, float((lhs - rhs).max()))
    ok = worst <= 1e-12
    _verdict(
        ok,
        "score(mean of models) <= mean of scores, p in {1, 2}, 1000 instances",
        f"worst excess={worst:.3e} (tolerance 1e-12)",
    )


# --- 4: voting on masks is not the same as masking the average ---------------


def test_04_vote_of_masks_differs_from_mask_of_average():
    arch = ArchSpec.mlp([1, 3])
    ones = PruneMask.ones(arch)
    m1 = ModelParams(arch, [np.array([[3.0], [1.0], [2.0]])], [np.zeros(3)])
    m2 = ModelParams(arch, [np.array([[1.0], [3.0], [2.0]])], [np.zeros(3)])

    mask1 = compute_mask(weight_scores(m1), 1 / 3, ones)
    mask2 = compute_mask(weight_scores(m2), 1 / 3, ones)
    hist = average_mask([mask1, mask2])
    voted = consensus_histogram(hist, 0.5, ones)
    of_avg = compute_mask(weight_scores(fedavg([m1, m2])), 1 / 3, ones)

    ok = (
        np.array_equal(mask1.layers[0], [True, False, True])
        and np.array_equal(mask2.layers[0], [False, True, True])
        and np.array_equal(hist.layers[0], [0.5, 0.5, 1.0])
        and np.array_equal(voted.layers[0], [True, True, True])
        and np.array_equal(of_avg.layers[0], [False, True, True])
        and not np.array_equal(voted.layers[0], of_avg.layers[0])
    )
    _verdict(
        ok,
        "two-node witness: vote(mask(w1), mask(w2)) != mask(avg(w1, w2))",
        f"voted={voted.layers[0].astype(int)} of_avg={of_avg.layers[0].astype(int)}",
    )


# --- 5: analytic gradients match central finite differences ------------------


def _numeric_grads(model: ModelParams, batch: Batch, h: float = 1e-5):
    out = []
    for arr in list(model.weights) + list(model.biases):
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            _, up = forward(model, batch)
            arr[idx] = orig - h
            _, down = forward(model, batch)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
            it.iternext()
        out.append(g)
    return out


def test_05_backprop_matches_finite_differences():
    rng = np.random.default_rng(4242)
    t0 = time.monotonic()
    worst = 0.0
    for _ in range(100):
        dims = [int(rng.integers(2, 6))]
        if rng.random() < 0.5:
            dims.append(int(rng.integers(3, 7)))
        dims.append(int(rng.integers(2, 5)))
        arch = ArchSpec.mlp(dims)
        model = init_params(arch, rng)
        n = int(rng.integers(2, 6))
        batch = Batch(
            rng.normal(size=(n, dims[0])),
            rng.integers(0, dims[-1], size=n),
        )
        grads = backward(model, batch)
        numeric = _numeric_grads(model, batch)
        for a, n in zip(list(grads.weights) + list(grads.biases), numeric):
            rel = np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n), np.full_like(a, 1e-6)])
            worst = max(worst, float(rel.max()))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    _verdict(
        ok,
        "backprop vs central differences on 100 random small nets",
        f"worst rel err={worst:.3e} (tolerance 1e-4) elapsed={elapsed:.1f}s",
    )


# --- 6: codec fuzzing: clean roundtrips and graceful corruption handling -----


def test_06_wire_fuzz_roundtrip_and_corruption():
    passed = roundtrip_fuzz(10_000, seed=1)
    survived = corrupt_frame_fuzz(10_000, seed=2)
    ok = passed == 10_000 and survived == 10_000
    _verdict(
        ok,
        "codec fuzz: 10000 roundtrips exact, 10000 corrupted frames handled",
        f"roundtrips={passed}/10000 handled={survived}/10000",
    )


# --- 7: consensus respects the schedule budget and never revives groups ------


def test_07_consensus_within_budget_and_monotone(desk):
    result = desk.clean_mpfl
    masks = result.mask_history
    budgets = result.budget_history
    ones = PruneMask.ones(masks[0].arch)

    within = all(
        all(kept <= k for kept, k in zip(m.keep_counts(), budget))
        for m, budget in zip(masks, budgets)
    )
    chain = [ones] + masks
    monotone = all(b.issubset(a) for a, b in zip(chain, chain[1:]))
    ok = len(masks) == len(budgets) == 5 and within and monotone
    _verdict(
        ok,
        "5 consensus rounds: keep counts within budget, masks monotone",
        f"rounds={len(masks)} within_budget={within} monotone={monotone}",
    )


# --- 8: a single adversarial vote cannot move a 90% consensus ----------------


def test_08_single_adversary_outvoted_at_90_percent():
    rng = np.random.default_rng(99)
    arch = ArchSpec.mlp([4, 8, 3])
    ones = PruneMask.ones(arch)
    failures = 0
    for _ in range(1000):
        honest = random_mask(arch, rng)
        adv = PruneMask(
            arch, [rng.random(g) < rng.random() for g in arch.groups]
        )
        hist = average_mask([honest] * 9 + [adv])
        voted = consensus_histogram(hist, 0.9, ones, min_keep=1)
        failures += not all(
            np.array_equal(v, h) for v, h in zip(voted.layers, honest.layers)
        )
    ok = failures == 0
    _verdict(
        ok,
        "9 honest + 1 arbitrary mask at 90% agreement equals the honest mask",
        f"failures={failures}/1000",
    )


# --- 9: the 10-node benchmark: accuracy under contamination, bandwidth -------


def test_09_desk_benchmark_accuracy_and_bandwidth(desk):
    mpfl_acc = desk.clean_mpfl.final_accuracy
    fedavg_acc = desk.clean_fedavg.final_accuracy
    close_to_dense = mpfl_acc >= fedavg_acc - 0.03

    # at every sparsity level >= 40% compare the settled (last) accuracy
    levels = sorted(
        {
            round(r.global_sparsity, 6)
            for r in desk.cont_mpfl.rows
            if r.global_sparsity >= 0.40
        }
    )
    margins = []
    for level in levels:
        m = [r.test_accuracy for r in desk.cont_mpfl.rows if round(r.global_sparsity, 6) == level][-1]
        p = [r.test_accuracy for r in desk.cont_pfl.rows if round(r.global_sparsity, 6) == level][-1]
        margins.append(m - p)
    robust = bool(levels) and all(m >= 0.0 for m in margins)

    mask_bits = desk.cont_mpfl.ledger.total_bits(category="mask")
    weight_bits = desk.cont_pfl.ledger.total_bits(category="weights")
    cheap = mask_bits < 0.01 * weight_bits

    ok = close_to_dense and robust and cheap and desk.elapsed < 300.0
    _verdict(
        ok,
        "10-node blobs benchmark: accuracy, contamination robustness, bandwidth",
        f"mpfl={mpfl_acc:.4f} fedavg={fedavg_acc:.4f} "
        f"margins@>=40%={['%+.4f' % m for m in margins]} "
        f"mask/weight bits={mask_bits}/{weight_bits} elapsed={desk.elapsed:.1f}s",
    )


# --- 10: a rerun of the same config reproduces the metrics byte for byte -----


def test_10_metrics_rerun_byte_identical(desk, tmp_path):
    rerun = run(desk_config("mpfl", True))
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics(desk.cont_mpfl.rows, first)
    write_metrics(rerun.rows, second)
    a, b = first.read_bytes(), second.read_bytes()
    ok = a == b and len(a) > 0
    _verdict(
        ok,
        "seeded rerun writes a byte-identical metrics CSV",
        f"bytes={len(a)} identical={a == b}",
    )
