"""Peer-side loop and the strategy zoo used to exercise every sanction path."""

from __future__ import annotations

import re
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .codec import CodecConfig, CompressedDelta, ErrorFeedbackState, compress_with_feedback, demo_aggregate
from .model import ConfigError, DataPool, Params, copy_params, gradient, sgd_step
from .simnet import Bucket, DELTA_KEY, GlobalClock, encode_submission, read_probe
from .validator import signed_step

_PEER_TAG = 0x8
_CLOCK_TAG = 0x9
COPY_LAG = 0.01


# ------------------------------------------------------------------ strategies


@dataclass(frozen=True)
class Honest:
    data_multiplier: float = 1.0

    def __post_init__(self):
        if self.data_multiplier <= 0:
            raise ConfigError("data_multiplier must be positive")


@dataclass(frozen=True)
class Desync:
    """Goes offline (no put, no aggregation) for ``pause_rounds`` rounds."""

    pause_at_round: int = 10
    pause_rounds: int = 3

    def paused(self, round: int) -> bool:
        return self.pause_at_round <= round < self.pause_at_round + self.pause_rounds


@dataclass(frozen=True)
class Copier:
    victim: int = 0


@dataclass(frozen=True)
class Duplicate:
    sibling: int = 0


@dataclass(frozen=True)
class NormScaler:
    factor: float = 1e6


@dataclass(frozen=True)
class LatePutter:
    offset: float = 0.05


@dataclass(frozen=True)
class Silent:
    pass


@dataclass(frozen=True)
class Malformed:
    pass


@dataclass(frozen=True)
class IgnoreAssigned:
    pass


STRATEGIES = {
    "honest": Honest, "desync": Desync, "copier": Copier, "duplicate": Duplicate,
    "norm_scaler": NormScaler, "late_putter": LatePutter, "silent": Silent,
    "malformed": Malformed, "ignore_assigned": IgnoreAssigned,
}
_NAMES = {cls: name for name, cls in STRATEGIES.items()}
_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*(?:\*\s*(\d+))?\s*$")


def strategy_name(strategy) -> str:
    return _NAMES[type(strategy)]


def format_strategy(strategy) -> str:
    """Inverse of :func:`parse_strategy`, e.g. ``desync(pause_at_round=10,pause_rounds=3)``."""
    args = ",".join(f"{f.name}={getattr(strategy, f.name)!r}" for f in fields(strategy))
    return f"{strategy_name(strategy)}({args})" if args else strategy_name(strategy)


def parse_strategy(text: str):
    strategies = parse_roster(text)
    if len(strategies) != 1:
        raise ConfigError(f"expected one strategy, got {text!r}")
    return strategies[0]


def parse_roster(text: str) -> list:
    """Parse ``honest*5; honest(data_multiplier=2); copier(victim=0)``."""
    out = []
    for item in filter(None, (part.strip() for part in text.split(";"))):
        m = _SPEC_RE.match(item)
        if not m or m.group(1) not in STRATEGIES:
            raise ConfigError(f"unknown strategy {item!r}; choose from {sorted(STRATEGIES)}")
        cls = STRATEGIES[m.group(1)]
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for arg in filter(None, (a.strip() for a in (m.group(2) or "").split(","))):
            key, _, value = arg.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"strategy {m.group(1)!r} has no parameter {key!r}")
            try:
                kwargs[key] = int(value) if types[key] in (int, "int") else float(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {m.group(1)}.{key}: {value!r}") from exc
        strategy = cls(**kwargs)
        out.extend([strategy] * int(m.group(3) or 1))
    return out


def validate_roster(roster: list) -> None:
    n = len(roster)
    for pid, strategy in enumerate(roster):
        target = getattr(strategy, "victim", getattr(strategy, "sibling", None))
        if target is not None and (target == pid or not 0 <= target < n):
            raise ConfigError(f"peer {pid}: {strategy_name(strategy)} target {target} is invalid")


def is_dependent(strategy) -> bool:
    """Strategies whose output is derived from another peer's work this round."""
    return isinstance(strategy, (Copier, Duplicate))


# ------------------------------------------------------------------------ peer


@dataclass
class PeerConfig:
    local_lr: float = 0.05
    local_steps: int = 4


class Peer:
    """One participant: local model, error-feedback buffer and a strategy."""

    def __init__(self, peer_id: int, theta: Params, strategy, codec: CodecConfig,
                 config: PeerConfig | None = None):
        self.peer_id = peer_id
        self.theta = copy_params(theta)
        self.strategy = strategy
        self.codec = codec
        self.config = config or PeerConfig()
        self.ef = ErrorFeedbackState.zeros(theta, codec.ef_decay)
        self.last_payload: bytes | None = None

    # -- helpers -----------------------------------------------------------

    def _rng(self, seed: int, round: int, tag: int = _PEER_TAG) -> np.random.Generator:
        return np.random.default_rng([seed, tag, self.peer_id, round])

    def offline(self, round: int) -> bool:
        return isinstance(self.strategy, Desync) and self.strategy.paused(round)

    def training_indices(self, pool: DataPool, seed: int, round: int) -> np.ndarray:
        """Assigned shard, plus extra unassigned examples for data_multiplier > 1.

        IgnoreAssigned trains on an equal number of unassigned examples instead.
        """
        own = pool.assigned_indices(seed, self.peer_id, round)
        unassigned = pool.unassigned_pool(seed, round)
        s = self.strategy
        if isinstance(s, IgnoreAssigned):
            return self._rng(seed, round).choice(unassigned, size=len(own), replace=False)
        multiplier = s.data_multiplier if isinstance(s, Honest) else 1.0
        extra = min(int(round_half_even((multiplier - 1.0) * len(own))), len(unassigned))
        if extra <= 0:
            return own
        return np.concatenate([own, self._rng(seed, round).choice(unassigned, size=extra, replace=False)])

    def local_train(self, pool: DataPool, seed: int, round: int) -> Params:
        """Full-batch SGD on the training batch; returns the change per unit lr."""
        batch = pool.dataset.take(self.training_indices(pool, seed, round))
        lr = self.config.local_lr
        theta = self.theta
        for _ in range(self.config.local_steps):
            theta = sgd_step(theta, gradient(theta, batch), lr)
        return {n: (self.theta[n] - theta[n]) / lr for n in theta}

    def put_offset(self, seed: int, round: int, clock: GlobalClock) -> float:
        width = clock.window_end - clock.window_start
        u = self._rng(seed, round, _CLOCK_TAG).uniform(0.1, 0.7)
        offset = clock.window_start + u * width
        if isinstance(self.strategy, LatePutter):
            offset = clock.window_end + self.strategy.offset
        return offset

    # -- round ---------------------------------------------------------------

    def produce(self, pool: DataPool, seed: int, round: int,
                positions: Mapping[str, tuple[int, int]]) -> bytes | None:
        """Payload for this round, or None when the peer stays quiet."""
        s = self.strategy
        if isinstance(s, (Silent, Copier, Duplicate)) or self.offline(round):
            return None
        delta, self.ef = compress_with_feedback(self.local_train(pool, seed, round), self.ef, self.codec)
        if isinstance(s, NormScaler):
            delta = delta.scaled(s.factor)
        payload = encode_submission(delta, read_probe(self.theta, positions))
        if isinstance(s, Malformed):
            payload = payload[: len(payload) - 7]
        self.last_payload = payload
        return payload

    def run_round(self, pool: DataPool, seed: int, round: int, clock: GlobalClock,
                  buckets: Mapping[int, Bucket], positions: Mapping[str, tuple[int, int]],
                  peers: Mapping[int, "Peer"] | None = None) -> float | None:
        """Compute and put this round's object; returns the put timestamp.

        Copiers read the victim's bucket shortly after the victim's put;
        duplicates re-post their sibling's payload out of band. Both must run
        after their target.
        """
        s = self.strategy
        bucket = buckets[self.peer_id]
        if isinstance(s, Copier):
            obj = buckets[s.victim].get(round, DELTA_KEY)
            if obj is None:
                return None
            payload, victim_stamp = obj
            clock.set(round, victim_stamp - round * clock.round_length + COPY_LAG)
            return bucket.put(round, DELTA_KEY, payload, clock, caller=self.peer_id)
        if isinstance(s, Duplicate):
            sibling = peers[s.sibling] if peers else None
            if sibling is None or sibling.last_payload is None or sibling.offline(round):
                return None
            payload = sibling.last_payload
        else:
            self.last_payload = None
            payload = self.produce(pool, seed, round, positions)
            if payload is None:
                return None
        clock.set(round, self.put_offset(seed, round, clock))
        return bucket.put(round, DELTA_KEY, payload, clock, caller=self.peer_id)

    def local_aggregate_and_update(self, accepted: Mapping[int, CompressedDelta],
                                   weights: Mapping[int, float], alpha_t: float, round: int) -> None:
        """Apply the validator's aggregation rule to the round's accepted deltas."""
        if self.offline(round):
            return
        shapes = {n: t.shape for n, t in self.theta.items()}
        present = {p: d for p, d in accepted.items() if weights.get(p, 0.0) > 0}
        self.theta = signed_step(self.theta, demo_aggregate(present, weights, shapes), alpha_t)


def round_half_even(x: float) -> float:
    return float(np.round(x))
