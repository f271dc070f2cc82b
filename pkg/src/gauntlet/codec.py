"""DeMo-style pseudo-gradient compression and aggregation.

Tensors are flattened and cut into chunks of ``s`` values (the last chunk may
be shorter). Each chunk goes through an orthonormal DCT-II; only the ``k``
largest-magnitude coefficients per chunk are transmitted. The dense encoded
form of a tensor is a flat array of the same length, with chunk ``j``'s
coefficients stored at ``[j*s, j*s + len_j)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .model import ConfigError, DataShard, Params, StructureError, gradient


@dataclass(frozen=True)
class CodecConfig:
    chunk_size: int = 64
    topk: int = 16
    ef_decay: float = 0.9

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("codec.chunk_size must be >= 1")
        if not 1 <= self.topk <= self.chunk_size:
            raise ConfigError("codec.topk must be in [1, chunk_size]")
        if not 0.0 <= self.ef_decay < 1.0:
            raise ConfigError("codec.ef_decay must be in [0, 1)")


@dataclass(frozen=True)
class ChunkEntry:
    chunk_index: int
    indices: np.ndarray
    values: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, ChunkEntry)
            and self.chunk_index == other.chunk_index
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass
class CompressedDelta:
    chunk_size: int
    topk: int
    tensors: dict[str, list[ChunkEntry]] = field(default_factory=dict)

    def num_values(self) -> int:
        return sum(len(e.values) for entries in self.tensors.values() for e in entries)

    def norm(self) -> float:
        total = 0.0
        for entries in self.tensors.values():
            for e in entries:
                total += float(np.dot(e.values, e.values))
        return math.sqrt(total)

    def scaled(self, factor: float) -> "CompressedDelta":
        return CompressedDelta(self.chunk_size, self.topk, {
            name: [ChunkEntry(e.chunk_index, e.indices, e.values * factor) for e in entries]
            for name, entries in self.tensors.items()
        })

    def __eq__(self, other):
        return (
            isinstance(other, CompressedDelta)
            and (self.chunk_size, self.topk) == (other.chunk_size, other.topk)
            and list(self.tensors) == list(other.tensors)
            and all(self.tensors[n] == other.tensors[n] for n in self.tensors)
        )


@dataclass(frozen=True)
class ErrorFeedbackState:
    buffer: Params
    decay: float

    @classmethod
    def zeros(cls, theta: Params, decay: float) -> "ErrorFeedbackState":
        return cls({n: np.zeros_like(t, dtype=np.float64) for n, t in theta.items()}, decay)


# ------------------------------------------------------------------ transforms


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C``; ``C @ x`` encodes, ``C.T @ X`` decodes."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0, :] = np.sqrt(1.0 / n)
    c.setflags(write=False)
    return c


def _chunk_bounds(numel: int, s: int):
    for j in range(math.ceil(numel / s)):
        yield j, j * s, min((j + 1) * s, numel)


def _transform(flat: np.ndarray, s: int, inverse: bool) -> np.ndarray:
    out = np.empty_like(flat, dtype=np.float64)
    n_full = len(flat) // s
    if n_full:
        c = dct_matrix(s)
        block = flat[: n_full * s].reshape(n_full, s)
        out[: n_full * s] = (block @ c if inverse else block @ c.T).ravel()
    tail = len(flat) - n_full * s
    if tail:
        c = dct_matrix(tail)
        seg = flat[n_full * s:]
        out[n_full * s:] = c.T @ seg if inverse else c @ seg
    return out


def dct_encode(grad: Params, s: int) -> dict[str, np.ndarray]:
    """Dense per-tensor DCT coefficients, laid out chunk by chunk."""
    if s < 1:
        raise ConfigError("chunk size must be >= 1")
    return {name: _transform(np.asarray(t, dtype=np.float64).ravel(), s, inverse=False)
            for name, t in grad.items()}


def dct_decode_dense(coeffs: Mapping[str, np.ndarray], shapes: Mapping[str, tuple], s: int) -> Params:
    return {name: _transform(coeffs[name], s, inverse=True).reshape(shape)
            for name, shape in shapes.items()}


def topk_compress(coeffs: Mapping[str, np.ndarray], s: int, k: int) -> CompressedDelta:
    """Keep the ``k`` largest |coefficients| per chunk; ties go to the lower index."""
    if not 1 <= k <= s:
        raise ConfigError("topk must be in [1, chunk_size]")
    out = CompressedDelta(s, k)
    for name, flat in coeffs.items():
        entries = []
        for j, lo, hi in _chunk_bounds(len(flat), s):
            chunk = flat[lo:hi]
            keep = np.sort(np.argsort(-np.abs(chunk), kind="stable")[:k])
            entries.append(ChunkEntry(j, keep.astype(np.int64), chunk[keep].copy()))
        out.tensors[name] = entries
    return out


def densify(delta: CompressedDelta, shapes: Mapping[str, tuple]) -> dict[str, np.ndarray]:
    """Scatter retained coefficients into dense encoded arrays (missing = 0)."""
    s = delta.chunk_size
    dense = {}
    for name, shape in shapes.items():
        numel = math.prod(shape)
        flat = np.zeros(numel)
        n_chunks = math.ceil(numel / s)
        for e in delta.tensors.get(name, ()):
            if not 0 <= e.chunk_index < n_chunks:
                raise StructureError(f"{name}: chunk index {e.chunk_index} out of range")
            length = min(s, numel - e.chunk_index * s)
            if len(e.indices) and (e.indices.min() < 0 or e.indices.max() >= length):
                raise StructureError(f"{name}: coefficient index out of range in chunk {e.chunk_index}")
            flat[e.chunk_index * s + e.indices] = e.values
        dense[name] = flat
    unknown = set(delta.tensors) - set(shapes)
    if unknown:
        raise StructureError(f"unknown tensors {sorted(unknown)}")
    return dense


def dct_decode(delta: CompressedDelta, shapes: Mapping[str, tuple]) -> Params:
    return dct_decode_dense(densify(delta, shapes), shapes, delta.chunk_size)


def validate_delta(delta: CompressedDelta, shapes: Mapping[str, tuple], codec: CodecConfig) -> None:
    """Strict format check for a transmitted delta; raises StructureError."""
    if (delta.chunk_size, delta.topk) != (codec.chunk_size, codec.topk):
        raise StructureError(
            f"codec params ({delta.chunk_size}, {delta.topk}) != ({codec.chunk_size}, {codec.topk})"
        )
    if list(delta.tensors) != list(shapes):
        raise StructureError(f"tensor names {list(delta.tensors)} != {list(shapes)}")
    s, k = codec.chunk_size, codec.topk
    for name, shape in shapes.items():
        numel = math.prod(shape)
        entries = delta.tensors[name]
        if [e.chunk_index for e in entries] != list(range(math.ceil(numel / s))):
            raise StructureError(f"{name}: chunk entries do not cover the tensor")
        for e in entries:
            length = min(s, numel - e.chunk_index * s)
            if len(e.indices) != min(k, length) or len(e.values) != len(e.indices):
                raise StructureError(f"{name}: wrong coefficient count in chunk {e.chunk_index}")
            if len(np.unique(e.indices)) != len(e.indices):
                raise StructureError(f"{name}: duplicate coefficient index")
            if e.indices.min() < 0 or e.indices.max() >= length:
                raise StructureError(f"{name}: coefficient index out of range")
            if not np.all(np.isfinite(e.values)):
                raise StructureError(f"{name}: non-finite coefficient")


# ---------------------------------------------------------------- DeMo steps


def compress_with_feedback(grad: Params, ef: ErrorFeedbackState, codec: CodecConfig):
    """Error-feedback compression of an arbitrary update direction.

    Returns ``(delta, new_state)`` where ``new_state.buffer + decode(delta)``
    equals ``ef.decay * ef.buffer + grad``.
    """
    shapes = {n: t.shape for n, t in grad.items()}
    acc = {n: ef.decay * ef.buffer[n] + grad[n] for n in grad}
    delta = topk_compress(dct_encode(acc, codec.chunk_size), codec.chunk_size, codec.topk)
    sent = dct_decode(delta, shapes)
    residual = {n: acc[n] - sent[n] for n in acc}
    return delta, ErrorFeedbackState(residual, ef.decay)


def demo_pseudo_gradient(theta: Params, batch: DataShard, ef: ErrorFeedbackState, codec: CodecConfig):
    return compress_with_feedback(gradient(theta, batch), ef, codec)


def sign(x: np.ndarray) -> np.ndarray:
    return np.sign(x)  # sign(0) == 0


def demo_aggregate(
    deltas: Mapping[int, CompressedDelta],
    weights: Mapping[int, float],
    shapes: Mapping[str, tuple],
) -> Params:
    """Normalize each contribution to unit norm, average in the encoded domain, decode, sign.

    Peers are folded in ascending id order so the result does not depend on
    arrival order. All-zero contributions add nothing.
    """
    if not deltas:
        return {name: np.zeros(shape) for name, shape in shapes.items()}
    chunk_sizes = {d.chunk_size for d in deltas.values()}
    if len(chunk_sizes) != 1:
        raise StructureError("deltas disagree on chunk size")
    s = chunk_sizes.pop()
    total = {name: np.zeros(math.prod(shape)) for name, shape in shapes.items()}
    for peer in sorted(deltas):
        w = weights.get(peer, 0.0)
        if w < 0:
            raise ValueError(f"negative aggregation weight for peer {peer}")
        delta = deltas[peer]
        norm = delta.norm()
        if w == 0 or norm == 0:
            continue
        dense = densify(delta, shapes)
        for name in total:
            total[name] += w * (dense[name] / norm)
    return {name: sign(t) for name, t in dct_decode_dense(total, shapes, s).items()}


# ------------------------------------------------------------- wire format

_U32 = struct.Struct("<I")


def serialize_delta(delta: CompressedDelta) -> bytes:
    out = [struct.pack("<III", len(delta.tensors), delta.chunk_size, delta.topk)]
    for name, entries in delta.tensors.items():
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)) + raw + _U32.pack(len(entries)))
        for e in entries:
            out.append(struct.pack("<II", e.chunk_index, len(e.indices)))
            pairs = np.empty(len(e.indices), dtype=[("i", "<u4"), ("v", "<f8")])
            pairs["i"] = e.indices
            pairs["v"] = e.values
            out.append(pairs.tobytes())
    return b"".join(out)


class Reader:
    """Bounds-checked little-endian cursor over a byte payload."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = memoryview(data)
        self.offset = offset

    def take(self, n: int) -> memoryview:
        if n < 0 or self.offset + n > len(self.data):
            raise StructureError(f"truncated payload at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        st = struct.Struct(fmt)
        return st.unpack(self.take(st.size))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StructureError("tensor name is not utf-8") from exc

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)


def read_delta(reader: Reader) -> CompressedDelta:
    n_tensors, s, k = reader.unpack("<III")
    delta = CompressedDelta(s, k)
    for _ in range(n_tensors):
        name = reader.string()
        if name in delta.tensors:
            raise StructureError(f"duplicate tensor {name!r}")
        (n_entries,) = reader.unpack("<I")
        entries = []
        for _ in range(n_entries):
            chunk_index, count = reader.unpack("<II")
            pairs = np.frombuffer(reader.take(12 * count), dtype=[("i", "<u4"), ("v", "<f8")])
            entries.append(ChunkEntry(chunk_index, pairs["i"].astype(np.int64), pairs["v"].astype(np.float64)))
        delta.tensors[name] = entries
    return delta


def deserialize_delta(data: bytes) -> CompressedDelta:
    reader = Reader(data)
    delta = read_delta(reader)
    if not reader.exhausted:
        raise StructureError("trailing bytes after delta")
    return delta
