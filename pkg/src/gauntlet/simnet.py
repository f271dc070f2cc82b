"""In-process stand-in for per-peer object storage buckets and the global clock."""

from __future__ import annotations

import enum
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .codec import (CodecConfig, CompressedDelta, Reader, StructureError, read_delta,
                    serialize_delta, validate_delta)
from .model import ConfigError, Params

_PROBE_TAG = 0x5
DELTA_KEY = "gradient"


class ObjectExistsError(Exception):
    """A (round, key) object was put twice into the same bucket."""


@dataclass
class GlobalClock:
    round_length: float = 1.0
    window_start: float = 0.1
    window_end: float = 0.9
    round: int = 0
    time_in_round: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.window_start < self.window_end <= self.round_length:
            raise ConfigError(
                f"put window [{self.window_start}, {self.window_end}] must lie inside "
                f"a round of length {self.round_length}"
            )

    @property
    def now(self) -> float:
        return self.round * self.round_length + self.time_in_round

    def set(self, round: int, time_in_round: float) -> None:
        self.round, self.time_in_round = round, time_in_round

    def window(self, round: int) -> tuple[float, float]:
        base = round * self.round_length
        return base + self.window_start, base + self.window_end


class Bucket:
    """Write-once object map owned by one peer.

    With ``mirror_dir`` set, each put is also written to
    ``<mirror_dir>/<owner>/<round>/<key>``.
    """

    def __init__(self, owner: int, mirror_dir: Path | None = None):
        self.owner = owner
        self.objects: dict[tuple[int, str], tuple[bytes, float]] = {}
        self.mirror_dir = Path(mirror_dir) if mirror_dir is not None else None
        self._lock = threading.Lock()

    def put(self, round: int, key: str, payload: bytes, clock: GlobalClock, caller: int | None = None) -> float:
        if caller is not None and caller != self.owner:
            raise PermissionError(f"peer {caller} cannot write to bucket of peer {self.owner}")
        with self._lock:
            if (round, key) in self.objects:
                raise ObjectExistsError(f"bucket {self.owner}: object ({round}, {key!r}) exists")
            stamp = clock.now
            self.objects[(round, key)] = (bytes(payload), stamp)
        if self.mirror_dir is not None:
            path = self.mirror_dir / str(self.owner) / str(round) / key
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        return stamp

    def get(self, round: int, key: str) -> tuple[bytes, float] | None:
        return self.objects.get((round, key))

    # locks do not copy or pickle; a restored bucket gets a fresh one
    def __getstate__(self):
        return {k: v for k, v in self.__dict__.items() if k != "_lock"}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def put(bucket: Bucket, round: int, key: str, payload: bytes, clock: GlobalClock) -> float:
    return bucket.put(round, key, payload, clock)


# ------------------------------------------------------------------- probes


def probe_positions(seed: int, round: int, shapes: Mapping[str, tuple]) -> dict[str, tuple[int, int]]:
    """Two flat positions per tensor, shared by validator and peers for a round."""
    rng = np.random.default_rng([seed, _PROBE_TAG, round])
    out = {}
    for name, shape in shapes.items():
        numel = math.prod(shape)
        if numel < 1:
            raise StructureError(f"{name} has no elements")
        if numel == 1:
            out[name] = (0, 0)
        else:
            a, b = rng.choice(numel, size=2, replace=False)
            out[name] = (int(a), int(b))
    return out


@dataclass(frozen=True)
class ProbeEntry:
    name: str
    positions: tuple[int, int]
    values: tuple[float, float]


def read_probe(theta: Params, positions: Mapping[str, tuple[int, int]]) -> list[ProbeEntry]:
    return [
        ProbeEntry(name, pos, tuple(float(theta[name].ravel()[i]) for i in pos))
        for name, pos in positions.items()
    ]


def probe_values(probe: list[ProbeEntry]) -> list[float]:
    return [v for entry in probe for v in entry.values]


def serialize_probe(probe: list[ProbeEntry]) -> bytes:
    out = [struct.pack("<I", len(probe))]
    for e in probe:
        raw = e.name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<QQdd", *e.positions, *e.values))
    return b"".join(out)


def read_probe_section(reader: Reader) -> list[ProbeEntry]:
    (n,) = reader.unpack("<I")
    probe = []
    for _ in range(n):
        name = reader.string()
        i0, i1, v0, v1 = reader.unpack("<QQdd")
        probe.append(ProbeEntry(name, (i0, i1), (v0, v1)))
    return probe


# -------------------------------------------------------------- submissions


class SubmissionStatus(str, enum.Enum):
    ACCEPTED = "accepted"
    LATE = "late"
    EARLY = "early"
    MISSING = "missing"
    MALFORMED = "malformed"


@dataclass
class Submission:
    peer_id: int
    round: int
    payload: bytes
    put_timestamp: float
    delta: CompressedDelta | None = None
    probe: list[ProbeEntry] | None = None
    error: str | None = field(default=None, compare=False)


def encode_submission(delta: CompressedDelta, probe: list[ProbeEntry]) -> bytes:
    return serialize_delta(delta) + serialize_probe(probe)


def decode_submission(payload: bytes, shapes: Mapping[str, tuple], codec: CodecConfig):
    """Parse and structurally validate a bucket object; raises StructureError."""
    reader = Reader(payload)
    delta = read_delta(reader)
    probe = read_probe_section(reader)
    if not reader.exhausted:
        raise StructureError("trailing bytes after probe section")
    validate_delta(delta, shapes, codec)
    if [e.name for e in probe] != list(shapes):
        raise StructureError("probe must carry exactly 2 entries for every tensor")
    for e in probe:
        numel = math.prod(shapes[e.name])
        if max(e.positions) >= numel or not all(map(math.isfinite, e.values)):
            raise StructureError(f"bad probe entry for {e.name}")
    return delta, probe


def classify(timestamp: float, window: tuple[float, float]) -> SubmissionStatus:
    start, end = window
    if timestamp < start:
        return SubmissionStatus.EARLY
    if timestamp > end:
        return SubmissionStatus.LATE
    return SubmissionStatus.ACCEPTED


def collect_round(
    buckets: Mapping[int, Bucket],
    round: int,
    clock: GlobalClock,
    shapes: Mapping[str, tuple],
    codec: CodecConfig,
    key: str = DELTA_KEY,
) -> dict[int, tuple[Submission | None, SubmissionStatus]]:
    """Classify every peer's object for ``round``; window bounds are inclusive."""
    window = clock.window(round)
    out = {}
    for peer in sorted(buckets):
        obj = buckets[peer].get(round, key)
        if obj is None:
            out[peer] = (None, SubmissionStatus.MISSING)
            continue
        payload, stamp = obj
        sub = Submission(peer, round, payload, stamp)
        status = classify(stamp, window)
        try:
            sub.delta, sub.probe = decode_submission(payload, shapes, codec)
        except StructureError as exc:
            sub.error = str(exc)
            status = SubmissionStatus.MALFORMED
        out[peer] = (sub, status)
    return out
