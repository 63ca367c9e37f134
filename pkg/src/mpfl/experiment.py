"""Experiment orchestration: wiring nodes to the server and recording results.

Three algorithms share one harness:

* ``mpfl``        - masked local training, bit-packed mask voting, then a
                    standard FedAvg fine-tuning phase on the frozen mask;
* ``pruning_fl``  - nodes ship full weights every round, the server averages,
                    scores, prunes, and broadcasts the pruned model;
* ``lth_central`` - every node ships its raw shard once (a ledger charge);
                    training, pruning, and rewinding happen centrally;
* ``fedavg``      - the unpruned reference: ``mpfl`` with an empty schedule.

All transmitted bytes flow through the framed wire codec over the configured
transport, and every send is booked in the bandwidth ledger.  Node workers run
on threads; the server's per-round collection is the only barrier, and all
results are deterministic functions of the config seed.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    Dataset,
    Shard,
    contaminate_labels,
    contaminate_noise,
    load_csv,
    load_idx,
    make_blobs,
    partition_iid,
    train_test_split,
)
from .errors import ConfigError, MpflError, TransportError
from .federation import Node, ParameterServer, fedavg
from .model import ArchSpec, ModelParams, PruneMask, init_params
from .nn import accuracy, train_sgd
from .pruning import apply_mask, compute_mask, weight_scores
from .transport import Endpoint, TcpServer, loopback_pair, tcp_connect
from .wire import DOWN, UP, BandwidthLedger, Message, MsgType, WireCodec

log = logging.getLogger(__name__)

CSV_HEADER = [
    "algorithm",
    "round",
    "global_sparsity",
    "test_accuracy",
    "bits_up_per_node",
    "bits_down_per_node",
    "cumulative_bits",
]


@dataclass
class MetricsRow:
    algorithm: str
    round_idx: int
    global_sparsity: float
    test_accuracy: float
    bits_up_per_node: int
    bits_down_per_node: int
    cumulative_bits: int

    def as_csv(self) -> list[str]:
        return [
            self.algorithm,
            str(self.round_idx),
            f"{self.global_sparsity:.6f}",
            f"{self.test_accuracy:.6f}",
            str(self.bits_up_per_node),
            str(self.bits_down_per_node),
            str(self.cumulative_bits),
        ]


@dataclass
class RunResult:
    config: ExperimentConfig
    rows: list[MetricsRow]
    ledger: BandwidthLedger
    final_model: ModelParams
    final_mask: PruneMask
    mask_history: list[PruneMask] = field(default_factory=list)
    budget_history: list[list[int]] = field(default_factory=list)
    flagged_nodes: list[int] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy if self.rows else float("nan")


@dataclass
class Env:
    """Everything derived from the config seed before any algorithm runs."""

    arch: ArchSpec
    train: Dataset
    test: Dataset
    shards: list[Shard]
    w0: ModelParams
    node_seeds: list[np.random.SeedSequence]
    central_seed: np.random.SeedSequence


def build_env(cfg: ExperimentConfig) -> Env:
    """Dataset, shards, contamination, and initial weights, all seeded."""
    root = np.random.SeedSequence(cfg.seed)
    data_seq, init_seq, central_seq, cont_seq = root.spawn(4)
    node_seeds = root.spawn(cfg.nodes)

    data_rng = np.random.default_rng(data_seq)
    d = cfg.dataset
    if d.kind == "blobs":
        ds = make_blobs(d.samples, d.features, d.classes, data_rng, d.cluster_std)
    elif d.kind == "csv":
        ds = load_csv(d.path, d.label_column)
    else:
        ds = load_idx(d.features_path, d.labels_path)
    arch = cfg.arch.to_spec()
    if ds.x.shape[1] != arch.in_dim:
        raise ConfigError(
            f"dataset.features: loaded {ds.x.shape[1]} features, "
            f"architecture expects {arch.in_dim}"
        )
    if ds.num_classes > arch.num_classes:
        raise ConfigError(
            f"dataset.classes: loaded {ds.num_classes} classes, "
            f"architecture has {arch.num_classes} outputs"
        )

    train, test = train_test_split(ds, d.test_fraction, data_rng)
    shards = partition_iid(train, cfg.nodes, data_rng)
    for entry, seq in zip(cfg.contamination, cont_seq.spawn(max(1, len(cfg.contamination)))):
        rng = np.random.default_rng(seq)
        if entry.kind == "noise":
            shards[entry.node] = contaminate_noise(train, shards[entry.node], entry.sigma, rng)
        else:
            shards[entry.node] = contaminate_labels(train, shards[entry.node], rng)

    w0 = init_params(arch, np.random.default_rng(init_seq))
    return Env(arch, train, test, shards, w0, node_seeds, central_seq)


def _make_nodes(cfg: ExperimentConfig, env: Env) -> list[Node]:
    nodes = []
    for shard, seq in zip(env.shards, env.node_seeds):
        x, y = shard.materialize(env.train)
        nodes.append(
            Node(
                node_id=shard.node_id,
                x=x,
                y=y,
                model=env.w0.copy(),
                rng=np.random.default_rng(seq),
                lr=cfg.training.lr,
                epochs_per_round=cfg.training.epochs_per_round,
                batch_size=cfg.training.batch_size,
                scoring=cfg.pruning.scoring,
                p=cfg.pruning.p,
                min_keep=cfg.pruning.min_keep,
            )
        )
    return nodes


# --- transport wiring --------------------------------------------------------


class _Sessions:
    """Per-node server endpoints plus the matching node-side endpoints."""

    def __init__(self, cfg: ExperimentConfig, arch: ArchSpec, ledger: BandwidthLedger):
        self.codec = WireCodec(arch, cfg.wire.precision_bits, cfg.wire.delta_masks)
        self.ledger = ledger
        self.server: dict[int, Endpoint] = {}
        self.node_side: dict[int, Endpoint] = {}
        self._tcp_server: TcpServer | None = None
        if cfg.transport.kind == "loopback":
            for i in range(cfg.nodes):
                ps, nd = loopback_pair(i, self.codec, ledger)
                self.server[i] = ps
                self.node_side[i] = nd
        else:
            self._tcp_server = TcpServer(cfg.transport.host, cfg.transport.port)
            host, port = self._tcp_server.address
            connected: dict[int, Endpoint] = {}
            errs: list[Exception] = []

            def connect(i: int) -> None:
                try:
                    connected[i] = tcp_connect(host, port, i, self.codec, ledger)
                except Exception as e:  # propagate to the main thread
                    errs.append(e)

            threads = [
                threading.Thread(target=connect, args=(i,), daemon=True)
                for i in range(cfg.nodes)
            ]
            for t in threads:
                t.start()
            for _ in range(cfg.nodes):
                node_id, ep = self._tcp_server.accept_node(self.codec, ledger)
                self.server[node_id] = ep
            for t in threads:
                t.join()
            if errs:
                raise TransportError(f"node connect failed: {errs[0]}")
            self.node_side = connected

    def close(self) -> None:
        for ep in list(self.server.values()) + list(self.node_side.values()):
            ep.close()
        if self._tcp_server:
            self._tcp_server.close()


class _WorkerPool:
    """Runs one function per node on its own thread and re-raises failures."""

    def __init__(self):
        self.errors: list[BaseException] = []
        self.threads: list[threading.Thread] = []

    def spawn(self, fn, *args) -> None:
        def run():
            try:
                fn(*args)
            except BaseException as e:
                self.errors.append(e)

        t = threading.Thread(target=run, daemon=True)
        self.threads.append(t)
        t.start()

    def join(self) -> None:
        for t in self.threads:
            t.join()
        if self.errors:
            raise self.errors[0]


# --- metrics helpers ---------------------------------------------------------


class _RowRecorder:
    def __init__(self, algorithm: str, ledger: BandwidthLedger, n_nodes: int):
        self.algorithm = algorithm
        self.ledger = ledger
        self.n = n_nodes
        self.rows: list[MetricsRow] = []

    def add(self, round_idx: int, sparsity: float, acc: float) -> None:
        up = self.ledger.total_bits(direction=UP, round_idx=round_idx)
        down = self.ledger.total_bits(direction=DOWN, round_idx=round_idx)
        # bound the running total by round index: workers may already be
        # sending next-round traffic when this row is cut
        self.rows.append(
            MetricsRow(
                self.algorithm,
                round_idx,
                sparsity,
                acc,
                up // self.n,
                down // self.n,
                self.ledger.total_bits(round_le=round_idx),
            )
        )


def _evaluate(model: ModelParams, test: Dataset) -> float:
    return accuracy(model, test.x, test.y)


# --- the three protocols -----------------------------------------------------


def run_mpfl(cfg: ExperimentConfig, env: Env | None = None) -> RunResult:
    """Mask-voting run; with an empty schedule this is plain FedAvg."""
    env = env or build_env(cfg)
    schedule = [] if cfg.algorithm == "fedavg" else list(cfg.pruning.schedule)
    tag = "fedavg" if cfg.algorithm == "fedavg" else "mpfl"
    ledger = BandwidthLedger(count_headers=cfg.wire.count_headers)
    nodes = _make_nodes(cfg, env)
    ps = ParameterServer(
        env.arch,
        strategy=cfg.consensus.strategy,
        agreement=cfg.consensus.agreement,
        min_keep=cfg.pruning.min_keep,
    )
    rec = _RowRecorder(tag, ledger, cfg.nodes)
    target = cfg.pruning.resolved_target()
    sessions = _Sessions(cfg, env.arch, ledger)
    pool = _WorkerPool()
    mask_history: list[PruneMask] = []

    def worker(node: Node, ep: Endpoint) -> None:
        ones = PruneMask.ones(env.arch)
        msg = ep.recv(ref_mask=ones)
        node.model = msg.params
        gmask = ones
        for k, inc in enumerate(schedule):
            rnd = k + 1
            local = node.local_round(gmask, inc)
            ep.send(
                Message(MsgType.MASK_UPLOAD, rnd, node_id=node.node_id, mask=local),
                ref_mask=gmask,
            )
            gmask = ep.recv(ref_mask=gmask).mask
            if gmask.sparsity() >= target - 1e-9:
                break
        # final-FL phase: sync upload, then broadcast/train/upload per round
        sync_round = len(schedule) + 1
        ep.send(
            Message(
                MsgType.WEIGHT_UPLOAD,
                sync_round,
                node_id=node.node_id,
                params=apply_mask(node.model, gmask),
            ),
            ref_mask=gmask,
        )
        for r in range(cfg.final_rounds):
            msg = ep.recv(ref_mask=gmask)
            node.model = msg.params
            node.train(gmask)
            ep.send(
                Message(
                    MsgType.WEIGHT_UPLOAD,
                    sync_round + 1 + r,
                    node_id=node.node_id,
                    params=node.model,
                ),
                ref_mask=gmask,
            )

    try:
        for i, node in enumerate(nodes):
            pool.spawn(worker, node, sessions.node_side[i])

        ones = PruneMask.ones(env.arch)
        for i in sorted(sessions.server):
            sessions.server[i].send(
                Message(MsgType.INIT_WEIGHTS, 0, params=env.w0), ref_mask=ones
            )

        gmask = ones
        for k, inc in enumerate(schedule):
            rnd = k + 1
            uploads = {}
            for i in sorted(sessions.server):
                msg = sessions.server[i].recv(ref_mask=gmask)
                uploads[msg.node_id] = msg.mask
            new_mask = ps.reduce([uploads[i] for i in sorted(uploads)], inc)
            # workers are blocked on the broadcast here, so their models are
            # stable: evaluate the would-be aggregate for reporting only
            probe = apply_mask(fedavg([n.model for n in nodes]), new_mask)
            acc = _evaluate(probe, env.test)
            mask_history.append(new_mask.copy())
            for i in sorted(sessions.server):
                sessions.server[i].send(
                    Message(MsgType.GLOBAL_MASK, rnd, mask=new_mask), ref_mask=gmask
                )
            rec.add(rnd, new_mask.sparsity(), acc)
            gmask = new_mask
            if gmask.sparsity() >= target - 1e-9:
                break

        sync_round = len(schedule) + 1
        uploads = {}
        for i in sorted(sessions.server):
            msg = sessions.server[i].recv(ref_mask=gmask)
            uploads[msg.node_id] = msg.params
        avg = apply_mask(fedavg([uploads[i] for i in sorted(uploads)]), gmask)
        rec.add(sync_round, gmask.sparsity(), _evaluate(avg, env.test))

        for r in range(cfg.final_rounds):
            rnd = sync_round + 1 + r
            for i in sorted(sessions.server):
                sessions.server[i].send(
                    Message(MsgType.GLOBAL_WEIGHTS, rnd, params=avg), ref_mask=gmask
                )
            uploads = {}
            for i in sorted(sessions.server):
                msg = sessions.server[i].recv(ref_mask=gmask)
                uploads[msg.node_id] = msg.params
            avg = apply_mask(fedavg([uploads[i] for i in sorted(uploads)]), gmask)
            rec.add(rnd, gmask.sparsity(), _evaluate(avg, env.test))

        pool.join()
    finally:
        sessions.close()

    return RunResult(
        cfg,
        rec.rows,
        ledger,
        avg,
        gmask,
        mask_history=mask_history,
        budget_history=list(ps.budget_history),
        flagged_nodes=[n.node_id for n in nodes if n.flagged],
    )


def mask_from_zero_groups(params: ModelParams) -> PruneMask:
    """Recover the prune mask from a broadcast model: all-zero groups are
    pruned.  Valid because live trained groups are never exactly zero."""
    layers = []
    for i in range(len(params.weights)):
        gm = params.group_matrix(i)
        layers.append(np.any(gm != 0.0, axis=1))
    return PruneMask(params.arch, layers)


def run_pruning_fl(cfg: ExperimentConfig, env: Env | None = None) -> RunResult:
    """Server-side pruning baseline: full weights travel every round."""
    env = env or build_env(cfg)
    schedule = list(cfg.pruning.schedule)
    ledger = BandwidthLedger(count_headers=cfg.wire.count_headers)
    nodes = _make_nodes(cfg, env)
    rec = _RowRecorder("pruning_fl", ledger, cfg.nodes)
    sessions = _Sessions(cfg, env.arch, ledger)
    pool = _WorkerPool()
    mask_history: list[PruneMask] = []
    # pruning rounds followed by fine-tuning rounds with no increment
    increments = schedule + [0.0] * cfg.final_rounds
    avg = env.w0.copy()

    def worker(node: Node, ep: Endpoint) -> None:
        ones = PruneMask.ones(env.arch)
        node.model = ep.recv(ref_mask=ones).params
        gmask = ones
        for k in range(len(increments)):
            rnd = k + 1
            node.train(gmask)
            ep.send(
                Message(
                    MsgType.WEIGHT_UPLOAD, rnd, node_id=node.node_id, params=node.model
                ),
                ref_mask=gmask,
            )
            # the broadcast is encoded against the mask the nodes know; the
            # newly pruned groups arrive as explicit zeros
            msg = ep.recv(ref_mask=gmask)
            node.model = msg.params
            gmask = mask_from_zero_groups(msg.params)

    try:
        for i, node in enumerate(nodes):
            pool.spawn(worker, node, sessions.node_side[i])

        ones = PruneMask.ones(env.arch)
        for i in sorted(sessions.server):
            sessions.server[i].send(
                Message(MsgType.INIT_WEIGHTS, 0, params=env.w0), ref_mask=ones
            )

        gmask = ones
        for k, inc in enumerate(increments):
            rnd = k + 1
            uploads = {}
            for i in sorted(sessions.server):
                msg = sessions.server[i].recv(ref_mask=gmask)
                uploads[msg.node_id] = msg.params
            avg = fedavg([uploads[i] for i in sorted(uploads)])
            if inc > 0.0:
                new_mask = compute_mask(
                    weight_scores(avg, cfg.pruning.p), inc, gmask, cfg.pruning.min_keep
                )
            else:
                new_mask = gmask
            avg = apply_mask(avg, new_mask)
            acc = _evaluate(avg, env.test)
            mask_history.append(new_mask.copy())
            for i in sorted(sessions.server):
                sessions.server[i].send(
                    Message(MsgType.GLOBAL_WEIGHTS, rnd, params=avg), ref_mask=gmask
                )
            rec.add(rnd, new_mask.sparsity(), acc)
            gmask = new_mask

        pool.join()
    finally:
        sessions.close()

    return RunResult(
        cfg,
        rec.rows,
        ledger,
        avg,
        gmask,
        mask_history=mask_history,
        flagged_nodes=[n.node_id for n in nodes if n.flagged],
    )


def lth_upload_bits(samples: int, features: int, raw_feature_bits: int,
                    label_bits: int = 8) -> int:
    """One-shot raw-dataset upload cost: features plus one label per sample."""
    if min(samples, features, raw_feature_bits, label_bits) < 0:
        raise ConfigError("upload accounting takes non-negative counts")
    return samples * (features * raw_feature_bits + label_bits)


def charge_lth_upload(
    ledger: BandwidthLedger,
    shard_sizes: list[int],
    features: int,
    raw_feature_bits: int,
) -> None:
    """Book each node's raw shard upload; accounting only, nothing moves."""
    for node_id, n in enumerate(shard_sizes):
        ledger.charge_data_upload(node_id, lth_upload_bits(n, features, raw_feature_bits))


def run_lth_central(cfg: ExperimentConfig, env: Env | None = None) -> RunResult:
    """Centralized train / prune / rewind-to-initial over the pooled shards."""
    env = env or build_env(cfg)
    ledger = BandwidthLedger(count_headers=cfg.wire.count_headers)
    rec = _RowRecorder("lth_central", ledger, cfg.nodes)
    charge_lth_upload(
        ledger,
        [len(s) for s in env.shards],
        env.train.x.shape[1],
        cfg.dataset.raw_feature_bits,
    )
    # the pool is exactly what the nodes uploaded, contamination included
    parts = [s.materialize(env.train) for s in env.shards]
    x = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])

    rng = np.random.default_rng(env.central_seed)
    mask = PruneMask.ones(env.arch)
    params = env.w0.copy()
    mask_history: list[PruneMask] = []
    rnd = 0
    for inc in cfg.pruning.schedule:
        rnd += 1
        params, _ = train_sgd(
            params, x, y,
            lr=cfg.training.lr,
            epochs=cfg.training.epochs_per_round,
            batch_size=cfg.training.batch_size,
            rng=rng,
            mask=mask,
        )
        rec.add(rnd, mask.sparsity(), _evaluate(params, env.test))
        mask = compute_mask(weight_scores(params, cfg.pruning.p), inc, mask,
                            cfg.pruning.min_keep)
        mask_history.append(mask.copy())
        # rewind: surviving groups restart from the initial weights
        params = apply_mask(env.w0, mask)
    params, _ = train_sgd(
        params, x, y,
        lr=cfg.training.lr,
        epochs=cfg.training.epochs_per_round * max(1, cfg.final_rounds),
        batch_size=cfg.training.batch_size,
        rng=rng,
        mask=mask,
    )
    rnd += 1
    rec.add(rnd, mask.sparsity(), _evaluate(params, env.test))
    return RunResult(cfg, rec.rows, ledger, params, mask, mask_history=mask_history)


_RUNNERS = {
    "mpfl": run_mpfl,
    "fedavg": run_mpfl,
    "pruning_fl": run_pruning_fl,
    "lth_central": run_lth_central,
}


def run(cfg: ExperimentConfig, env: Env | None = None) -> RunResult:
    cfg.validate()
    return _RUNNERS[cfg.algorithm](cfg, env)


def compare(configs: list[ExperimentConfig]) -> tuple[list[RunResult], list[tuple[ExperimentConfig, MpflError]]]:
    """Run each config, isolating per-run failures instead of aborting."""
    results, failures = [], []
    for cfg in configs:
        try:
            results.append(run(cfg))
        except MpflError as e:
            log.error("run %s failed: %s", cfg.algorithm, e)
            failures.append((cfg, e))
    return results, failures


# --- output files ------------------------------------------------------------


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.as_csv())
    return buf.getvalue()


def write_metrics(rows: list[MetricsRow], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def summary_csv(results: list[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["algorithm", "final_accuracy", "final_sparsity", "total_bits",
         "mask_bits", "weight_bits", "data_bits", "bits_per_node"]
    )
    for r in results:
        s = r.ledger.summary()
        writer.writerow(
            [
                r.rows[-1].algorithm,
                f"{r.final_accuracy:.6f}",
                f"{r.final_mask.sparsity():.6f}",
                str(s["total"]),
                str(s["mask"]),
                str(s["weights"]),
                str(s["data"]),
                str(s["total"] // r.config.nodes),
            ]
        )
    return buf.getvalue()


_ARTIFACT_MAGIC = b"MPFM"
_ARTIFACT_VERSION = 1


def save_model(path: str | Path, params: ModelParams, mask: PruneMask) -> None:
    """Versioned binary artifact: layer dims, float64 weights, packed mask."""
    from .wire import pack_mask

    dense = params.arch.dense_layers
    out = bytearray()
    out += _ARTIFACT_MAGIC
    out += struct.pack("<BH", _ARTIFACT_VERSION, len(dense))
    for spec in dense:
        out += struct.pack("<II", spec.in_dim, spec.out_dim)
    for w, b in zip(params.weights, params.biases):
        out += np.ascontiguousarray(w, dtype="<f8").tobytes()
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    out += pack_mask(mask)
    Path(path).write_bytes(bytes(out))


def load_model(path: str | Path) -> tuple[ModelParams, PruneMask]:
    from .errors import ProtocolError
    from .wire import unpack_mask

    buf = Path(path).read_bytes()
    if buf[:4] != _ARTIFACT_MAGIC:
        raise ProtocolError(f"bad artifact magic {buf[:4]!r}", offset=0)
    version, n_layers = struct.unpack_from("<BH", buf, 4)
    if version != _ARTIFACT_VERSION:
        raise ProtocolError(f"unsupported artifact version {version}", offset=4)
    pos = 7
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<II", buf, pos))
        pos += 8
    arch_dims = [dims[0][0]] + [d[1] for d in dims]
    arch = ArchSpec.mlp(arch_dims)
    weights, biases = [], []
    for in_dim, out_dim in dims:
        w = np.frombuffer(buf, dtype="<f8", count=in_dim * out_dim, offset=pos)
        pos += 8 * in_dim * out_dim
        weights.append(w.reshape(out_dim, in_dim).astype(np.float64))
        b = np.frombuffer(buf, dtype="<f8", count=out_dim, offset=pos)
        pos += 8 * out_dim
        biases.append(b.astype(np.float64))
    params = ModelParams(arch, weights, biases)
    mask = unpack_mask(buf[pos:], arch)
    return params, mask
