"""Codec fuzzing: random round trips and corrupt-frame survival.

Round trips must reproduce every message bit for bit (weights are drawn at
wire precision so quantization is lossless).  Corrupt frames must either
decode cleanly or raise ProtocolError; anything else is a crash.
"""

from __future__ import annotations

import numpy as np

from .errors import ProtocolError
from .model import ArchSpec, ModelParams, PruneMask
from .wire import Message, MsgType, WireCodec

_VARIANTS = list(MsgType)


def _random_arch(rng: np.random.Generator) -> ArchSpec:
    dims = [int(rng.integers(1, 13)) for _ in range(int(rng.integers(2, 5)))]
    return ArchSpec.mlp(dims)


def _random_mask(arch: ArchSpec, rng: np.random.Generator) -> PruneMask:
    return PruneMask(arch, [rng.integers(0, 2, size=n).astype(bool) for n in arch.groups])


def _random_params(
    arch: ArchSpec, rng: np.random.Generator, precision_bits: int
) -> ModelParams:
    dt = np.float32 if precision_bits == 32 else np.float64
    weights, biases = [], []
    for spec in arch.dense_layers:
        w = rng.standard_normal((spec.out_dim, spec.in_dim)).astype(dt)
        b = rng.standard_normal(spec.out_dim).astype(dt)
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    return ModelParams(arch, weights, biases)


def _random_case(rng: np.random.Generator):
    """One (codec, message, ref_mask) triple with a losslessly encodable body."""
    from .pruning import apply_mask

    arch = _random_arch(rng)
    precision = 32 if rng.integers(0, 2) else 64
    delta = bool(rng.integers(0, 2))
    codec = WireCodec(arch, precision, delta_masks=delta)
    mtype = _VARIANTS[int(rng.integers(0, len(_VARIANTS)))]
    round_idx = int(rng.integers(0, 2**16))
    node_id = int(rng.integers(0, 64))

    if mtype in (MsgType.MASK_UPLOAD, MsgType.GLOBAL_MASK):
        ref = _random_mask(arch, rng)
        mask = ref.intersect(_random_mask(arch, rng))  # delta needs mask <= ref
        msg = Message(
            mtype,
            round_idx,
            node_id=node_id if mtype == MsgType.MASK_UPLOAD else None,
            mask=mask,
        )
        return codec, msg, ref
    ref = _random_mask(arch, rng)
    params = apply_mask(_random_params(arch, rng, precision), ref)
    msg = Message(
        mtype,
        round_idx,
        node_id=node_id if mtype == MsgType.WEIGHT_UPLOAD else None,
        params=params,
    )
    return codec, msg, ref


def _equal(a: Message, b: Message) -> bool:
    if (a.mtype, a.round_idx, a.node_id) != (b.mtype, b.round_idx, b.node_id):
        return False
    if a.mask is not None:
        return b.mask is not None and a.mask == b.mask
    return b.params is not None and all(
        np.array_equal(x, y)
        for x, y in zip(
            a.params.weights + a.params.biases, b.params.weights + b.params.biases
        )
    )


def roundtrip_fuzz(cases: int, seed: int = 0) -> int:
    """Encode/decode ``cases`` random messages; returns how many round-tripped."""
    rng = np.random.default_rng(seed)
    ok = 0
    for _ in range(cases):
        codec, msg, ref = _random_case(rng)
        decoded = codec.decode(codec.encode(msg, ref), ref)
        ok += _equal(msg, decoded)
    return ok


def _corrupt(frame: bytes, rng: np.random.Generator) -> bytes:
    buf = bytearray(frame)
    mode = int(rng.integers(0, 4))
    if mode == 0 and len(buf) > 0:  # truncate
        return bytes(buf[: int(rng.integers(0, len(buf)))])
    if mode == 1:  # append garbage
        return bytes(buf) + rng.bytes(int(rng.integers(1, 16)))
    if mode == 2 and len(buf) > 0:  # flip bits
        for _ in range(int(rng.integers(1, 9))):
            pos = int(rng.integers(0, len(buf)))
            buf[pos] ^= 1 << int(rng.integers(0, 8))
        return bytes(buf)
    return rng.bytes(int(rng.integers(0, 64)))  # pure noise


def corrupt_frame_fuzz(cases: int, seed: int = 0) -> int:
    """Feed mangled frames to the decoder; returns how many were handled
    (decoded or rejected with ProtocolError) without crashing."""
    rng = np.random.default_rng(seed)
    survived = 0
    for _ in range(cases):
        codec, msg, ref = _random_case(rng)
        frame = _corrupt(codec.encode(msg, ref), rng)
        try:
            codec.decode(frame, ref)
        except ProtocolError:
            pass
        survived += 1
    return survived
