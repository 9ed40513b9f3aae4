"""Bit-exact entropy coding of quantization assignments and size accounting.

The coder is a static two-pass integer arithmetic coder: a first pass counts
symbol frequencies, the second encodes against the empirical distribution.
The counts table travels in the header and is charged to the compressed
size, as are the quantization levels (32 bits each) and one grid-choice
charge of ceil(log2 N) bits per searched hyperparameter.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "Bitstream",
    "HyperparamGrid",
    "SizeBreakdown",
    "CompressedHypothesis",
    "encode",
    "decode",
    "total_size",
    "prior_complexity",
    "build_compressed_hypothesis",
    "write_hypothesis_file",
    "read_hypothesis_file",
]

# 32-bit coder state: high/low fit in uint32, frequency totals must stay
# below MIN_RANGE so every encoded symbol keeps a non-empty sub-range.
_STATE_BITS = 32
_MAX_RANGE = 1 << _STATE_BITS
_MIN_RANGE = (_MAX_RANGE >> 2) + 2
_MAX_TOTAL = _MIN_RANGE
_MASK = _MAX_RANGE - 1
_TOP_MASK = _MAX_RANGE >> 1
_SECOND_MASK = _TOP_MASK >> 1


@dataclass(frozen=True)
class Bitstream:
    """A byte payload with its exact bit length (final byte zero-padded)."""

    data: bytes
    bit_length: int

    def __post_init__(self):
        if len(self.data) != (self.bit_length + 7) // 8:
            raise ValueError("data length inconsistent with bit_length")


class _BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0
        self.bit_length = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        self.bit_length += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def finish(self) -> Bitstream:
        if self._nbits:
            self._bytes.append(self._acc << (8 - self._nbits))
        return Bitstream(bytes(self._bytes), self.bit_length)


class _BitReader:
    """Reads bits from a stream; past the end it yields zeros forever."""

    def __init__(self, stream: Bitstream):
        self._data = stream.data
        self._pos = 0
        self._limit = stream.bit_length

    def read(self) -> int:
        if self._pos >= self._limit:
            return 0
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit


def _cumulative(counts: np.ndarray) -> np.ndarray:
    cum = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return cum


def encode(assignments: Sequence[int], num_levels: int) -> tuple[Bitstream, np.ndarray]:
    """Arithmetic-code a symbol stream against its own empirical counts.

    Returns the payload and the counts table needed to decode it;
    ``decode(payload, counts, len(assignments))`` reproduces the input
    exactly.  An empty stream yields an empty payload.
    """
    syms = np.asarray(assignments, dtype=np.int64)
    if syms.size and (syms.min() < 0 or syms.max() >= num_levels):
        raise ValueError("assignments out of range for the declared level count")
    counts = np.bincount(syms, minlength=num_levels).astype(np.int64)
    if counts.sum() > _MAX_TOTAL:
        raise ValueError("stream too long for the 32-bit coder state")
    out = _BitWriter()
    if syms.size:
        cum = _cumulative(counts)
        total = int(cum[-1])
        low, high, pending = 0, _MASK, 0
        for s in syms:
            s = int(s)
            span = high - low + 1
            high = low + span * int(cum[s + 1]) // total - 1
            low = low + span * int(cum[s]) // total
            while ((low ^ high) & _TOP_MASK) == 0:
                bit = low >> (_STATE_BITS - 1)
                out.write(bit)
                for _ in range(pending):
                    out.write(bit ^ 1)
                pending = 0
                low = (low << 1) & _MASK
                high = ((high << 1) & _MASK) | 1
            while (low & ~high & _SECOND_MASK) != 0:
                pending += 1
                low = (low << 1) & (_MASK >> 1)
                high = ((high << 1) & (_MASK >> 1)) | _TOP_MASK | 1
        # One disambiguating bit; the decoder treats missing bits as zeros.
        out.write(1)
        for _ in range(pending):
            out.write(0)
    return out.finish(), counts


def decode(stream: Bitstream, counts: np.ndarray, length: int) -> np.ndarray:
    """Invert :func:`encode` given the counts table and the symbol count."""
    counts = np.asarray(counts, dtype=np.int64)
    if length == 0:
        return np.zeros(0, dtype=np.int64)
    if counts.sum() > _MAX_TOTAL:
        raise ValueError("counts total too large for the 32-bit coder state")
    cum = _cumulative(counts)
    total = int(cum[-1])
    reader = _BitReader(stream)
    code = 0
    for _ in range(_STATE_BITS):
        code = (code << 1) | reader.read()
    low, high = 0, _MASK
    out = np.empty(length, dtype=np.int64)
    for i in range(length):
        span = high - low + 1
        value = ((code - low + 1) * total - 1) // span
        # highest symbol with cum[s] <= value
        lo, hi = 0, len(counts)
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cum[mid] > value:
                hi = mid
            else:
                lo = mid
        s = lo
        out[i] = s
        high = low + span * int(cum[s + 1]) // total - 1
        low = low + span * int(cum[s]) // total
        while ((low ^ high) & _TOP_MASK) == 0:
            code = ((code << 1) & _MASK) | reader.read()
            low = (low << 1) & _MASK
            high = ((high << 1) & _MASK) | 1
        while (low & ~high & _SECOND_MASK) != 0:
            code = (code & _TOP_MASK) | ((code << 1) & (_MASK >> 1)) | reader.read()
            low = (low << 1) & (_MASK >> 1)
            high = ((high << 1) & (_MASK >> 1)) | _TOP_MASK | 1
    return out


@dataclass(frozen=True)
class HyperparamGrid:
    """A predeclared set of options for one searched hyperparameter.

    The choice among N options costs ceil(log2 N) bits.  Declaring the grid
    before looking at results is what makes the charge honest; a chosen
    value outside its grid is rejected.
    """

    name: str
    options: tuple
    chosen: object

    def __post_init__(self):
        if len(self.options) == 0:
            raise ValueError(f"grid {self.name!r} has no options")
        if self.chosen not in self.options:
            raise ValueError(
                f"chosen value {self.chosen!r} for {self.name!r} is not in its declared grid"
            )

    @property
    def bits(self) -> int:
        return math.ceil(math.log2(len(self.options))) if len(self.options) > 1 else 0


@dataclass(frozen=True)
class SizeBreakdown:
    """Where every bit of the compressed size comes from."""

    payload_bits: int
    levels_bits: int
    counts_bits: int
    hyperparam_bits: int

    @property
    def header_bits(self) -> int:
        return self.levels_bits + self.counts_bits

    @property
    def c_h_bits(self) -> int:
        return self.payload_bits + self.header_bits + self.hyperparam_bits

    def to_dict(self) -> dict:
        return {
            "payload_bits": self.payload_bits,
            "levels_bits": self.levels_bits,
            "counts_bits": self.counts_bits,
            "hyperparam_bits": self.hyperparam_bits,
            "header_bits": self.header_bits,
            "c_h_bits": self.c_h_bits,
        }


def total_size(
    payload_bits: int,
    levels: Sequence[float],
    counts: np.ndarray,
    grids: Sequence[HyperparamGrid] = (),
) -> SizeBreakdown:
    """Account for every bit needed to reproduce the hypothesis.

    Levels are stored as 32-bit floats; each counts-table entry needs
    ceil(log2(stream_length + 1)) bits since counts lie in [0, length];
    each grid choice adds its ceil(log2 N) charge.
    """
    counts = np.asarray(counts, dtype=np.int64)
    length = int(counts.sum())
    per_count = math.ceil(math.log2(length + 1)) if length > 0 else 0
    return SizeBreakdown(
        payload_bits=int(payload_bits),
        levels_bits=32 * len(levels),
        counts_bits=per_count * len(counts),
        hyperparam_bits=sum(g.bits for g in grids),
    )


def prior_complexity(c_h_bits: float) -> float:
    """Complexity term log 1/P(h) <= C(h) ln 2 + 2 ln C(h), in nats."""
    if c_h_bits < 2:
        raise ValueError("compressed size must be at least 2 bits")
    return c_h_bits * math.log(2.0) + 2.0 * math.log(c_h_bits)


@dataclass(frozen=True)
class CompressedHypothesis:
    """A quantized weight vector in its bit-exact encoded form."""

    payload: Bitstream
    levels: np.ndarray  # float32 quantization levels
    counts: np.ndarray  # per-level symbol counts
    length: int  # number of encoded coordinates
    breakdown: SizeBreakdown
    grids: tuple[HyperparamGrid, ...]

    @property
    def c_h_bits(self) -> int:
        return self.breakdown.c_h_bits

    @property
    def prior_nats(self) -> float:
        return prior_complexity(self.c_h_bits)

    def decode_assignments(self) -> np.ndarray:
        return decode(self.payload, self.counts, self.length)


def build_compressed_hypothesis(
    assignments: Sequence[int],
    levels: Sequence[float],
    grids: Sequence[HyperparamGrid] = (),
) -> CompressedHypothesis:
    """Encode assignments and assemble the full size accounting."""
    levels32 = np.asarray(levels, dtype=np.float32)
    payload, counts = encode(assignments, len(levels32))
    breakdown = total_size(payload.bit_length, levels32, counts, grids)
    return CompressedHypothesis(
        payload=payload,
        levels=levels32,
        counts=counts,
        length=len(assignments),
        breakdown=breakdown,
        grids=tuple(grids),
    )


_MAGIC = b"CLMH"
_VERSION = 1


def write_hypothesis_file(
    path,
    hyp: CompressedHypothesis,
    seeds: dict | None = None,
    arch_tag: str = "",
    meta: dict | None = None,
) -> None:
    """Serialize a compressed hypothesis.

    Layout: magic ``CLMH``, u16 version, u32 header length, UTF-8 JSON
    header (counts, lengths, grid declarations, seeds, architecture tag),
    levels as little-endian float32, payload bytes, then a SHA-256 digest
    of everything preceding it.
    """
    header = {
        "num_levels": int(len(hyp.levels)),
        "length": int(hyp.length),
        "counts": [int(c) for c in hyp.counts],
        "payload_bits": int(hyp.payload.bit_length),
        "breakdown": hyp.breakdown.to_dict(),
        "grids": [
            {"name": g.name, "options": list(g.options), "chosen": g.chosen}
            for g in hyp.grids
        ],
        "seeds": seeds or {},
        "arch_tag": arch_tag,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += _MAGIC
    body += struct.pack("<H", _VERSION)
    body += struct.pack("<I", len(blob))
    body += blob
    body += hyp.levels.astype("<f4").tobytes()
    body += hyp.payload.data
    body += hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as f:
        f.write(bytes(body))


def read_hypothesis_file(path) -> tuple[CompressedHypothesis, dict]:
    """Read and verify a hypothesis file; returns the hypothesis and its header."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a compressed-hypothesis file")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != _VERSION:
        raise ValueError(f"unsupported version {version}")
    digest = raw[-32:]
    if hashlib.sha256(raw[:-32]).digest() != digest:
        raise ValueError("digest mismatch: file corrupted")
    (hlen,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
    off = 10 + hlen
    num_levels = header["num_levels"]
    levels = np.frombuffer(raw[off : off + 4 * num_levels], dtype="<f4").copy()
    off += 4 * num_levels
    payload_bits = header["payload_bits"]
    nbytes = (payload_bits + 7) // 8
    payload = Bitstream(raw[off : off + nbytes], payload_bits)
    counts = np.asarray(header["counts"], dtype=np.int64)
    grids = tuple(
        HyperparamGrid(g["name"], tuple(g["options"]), g["chosen"])
        for g in header["grids"]
    )
    breakdown = total_size(payload_bits, levels, counts, grids)
    hyp = CompressedHypothesis(
        payload=payload,
        levels=levels,
        counts=counts,
        length=header["length"],
        breakdown=breakdown,
        grids=grids,
    )
    return hyp, header
