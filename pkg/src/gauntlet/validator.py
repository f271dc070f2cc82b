"""Validator side of the incentive loop.

Each round the validator runs cheap checks on a filter set of peers
(timeliness, presence, format, model synchronization), evaluates a small
random sample of accepted submissions on held data, updates ratings and the
proof-of-computation score ``mu``, turns everything into normalized incentives
and steps the shared model with the signed aggregate of the top-G peers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .codec import CodecConfig, CompressedDelta, Reader, dct_decode, demo_aggregate, sign
from .model import ConfigError, DataPool, DataShard, Params, StructureError, copy_params, forward_loss
from .rating import Rating, new_rating, ordinal, rate_match, ranks_from_scores
from .simnet import ProbeEntry, Submission, SubmissionStatus, probe_values

_SAMPLE_TAG = 0x6
_FILTER_TAG = 0x7


class CatchupError(RuntimeError):
    """Stored signed updates do not cover the requested replay range."""


@dataclass(frozen=True)
class EvaluationConfig:
    eval_set_size: int = 3
    filter_set_size: int = 8
    top_g: int = 4
    eval_scale: float = 0.5
    ema_decay: float = 0.9
    sync_threshold: float = 3.0
    penalty: float = 0.75
    incentive_exponent: int = 2
    rand_batch_size: int = 2048

    def __post_init__(self):
        if self.eval_set_size < 2:
            raise ConfigError("eval.eval_set_size must be >= 2")
        if self.top_g < 1:
            raise ConfigError("eval.top_g must be >= 1")
        if self.filter_set_size < self.top_g:
            raise ConfigError("eval.filter_set_size must be >= eval.top_g")
        if not 0.0 < self.eval_scale < 1.0:
            raise ConfigError("eval.eval_scale must be in (0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("eval.ema_decay must be in [0, 1)")
        if not 0.0 < self.penalty < 1.0:
            raise ConfigError("eval.penalty must be in (0, 1)")
        if self.sync_threshold <= 0:
            raise ConfigError("eval.sync_threshold must be positive")
        if self.incentive_exponent < 1:
            raise ConfigError("eval.incentive_exponent must be >= 1")
        if self.rand_batch_size < 1:
            raise ConfigError("eval.rand_batch_size must be >= 1")


@dataclass(frozen=True)
class LinearWarmup:
    """``base * min(1, (t + 1) / warmup)``; constant ``base`` when warmup is 0."""

    base: float = 0.01
    warmup: int = 0

    def __post_init__(self):
        if self.base <= 0 or self.warmup < 0:
            raise ConfigError("lr.base must be positive and lr.warmup non-negative")

    def __call__(self, round: int) -> float:
        if self.warmup <= 0:
            return self.base
        return self.base * min(1.0, (round + 1) / self.warmup)


@dataclass
class PeerRecord:
    peer_id: int
    mu: float = 0.0
    rating: Rating = field(default_factory=new_rating)
    evaluations: int = 0
    last_loss_score: float | None = None
    consecutive_fast_failures: int = 0
    registered_round: int = 0


@dataclass
class ValidatorState:
    theta: Params
    records: dict[int, PeerRecord]
    lr_schedule: LinearWarmup
    round: int = 0
    stored_signed_updates: list[tuple[int, Params]] = field(default_factory=list)
    checkpoint_theta: Params | None = None
    checkpoint_round: int = 0
    top_g: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.checkpoint_theta is None:
            self.checkpoint_theta = copy_params(self.theta)
            self.checkpoint_round = self.round


# ---------------------------------------------------------------- scoring ops


def shapes_of(theta: Params) -> dict[str, tuple]:
    return {name: t.shape for name, t in theta.items()}


def loss_score(theta: Params, delta: CompressedDelta, batch: DataShard, beta_t: float,
               base_loss: float | None = None) -> float:
    """Loss improvement from one signed step of size ``beta_t`` along the delta."""
    if beta_t <= 0:
        raise ValueError("beta_t must be positive")
    direction = dct_decode(delta, shapes_of(theta))
    stepped = {n: theta[n] - beta_t * sign(direction[n]) for n in theta}
    before = forward_loss(theta, batch) if base_loss is None else base_loss
    return before - forward_loss(stepped, batch)


def proof_of_computation_update(mu: float, delta_assigned: float, delta_rand: float, gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    diff = delta_assigned - delta_rand
    s = (diff > 0) - (diff < 0)
    return gamma * mu + (1.0 - gamma) * s


def apply_penalty(mu: float, phi: float) -> float:
    """Multiply ``mu`` by the fast-evaluation factor.

    A negative ``mu`` is left alone: scaling it toward zero would raise the
    score of a sanctioned peer.
    """
    return phi * mu if mu > 0 else mu


def sync_score(validator_probe: Sequence[float], peer_probe: Sequence[float], alpha: float) -> float:
    """Mean absolute probe discrepancy in units of the learning rate."""
    if len(validator_probe) != len(peer_probe) or len(peer_probe) == 0:
        raise StructureError("probe lengths differ or are empty")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    diff = np.abs(np.asarray(validator_probe, dtype=np.float64) - np.asarray(peer_probe, dtype=np.float64))
    return float(diff.sum() / (alpha * len(peer_probe)))


@dataclass(frozen=True)
class FastResult:
    phi: float
    sync: float | None
    reason: str | None


def fast_evaluate(
    submission: Submission | None,
    round_window: tuple[float, float],
    validator_probe: Sequence[ProbeEntry],
    alpha: float,
    sync_threshold: float,
    penalty: float = 0.75,
) -> FastResult:
    """Basic checks plus the sync filter. Never raises; failures map to ``penalty``."""
    if submission is None:
        return FastResult(penalty, None, "missing")
    start, end = round_window
    if not start <= submission.put_timestamp <= end:
        return FastResult(penalty, None, "early" if submission.put_timestamp < start else "late")
    if submission.delta is None or submission.probe is None:
        return FastResult(penalty, None, "malformed")
    expected = [(e.name, e.positions) for e in validator_probe]
    if [(e.name, tuple(e.positions)) for e in submission.probe] != expected:
        return FastResult(penalty, None, "probe positions")
    try:
        score = sync_score(probe_values(list(validator_probe)), probe_values(submission.probe), alpha)
    except (StructureError, ValueError):
        return FastResult(penalty, None, "probe")
    if score > sync_threshold:
        return FastResult(penalty, score, "desync")
    return FastResult(1.0, score, None)


def peer_score(record: PeerRecord) -> float:
    return record.mu * max(ordinal(record.rating), 0.0)


def normalize_scores(scores: Mapping[int, float], c_norm: int = 2) -> dict[int, float]:
    """Shift by the minimum, raise to ``c_norm`` and normalize to sum 1.

    All-equal scores (nothing above the minimum) give a uniform split.
    """
    if not scores:
        raise ValueError("need at least one score")
    low = min(scores.values())
    powered = {p: (s - low) ** c_norm for p, s in scores.items()}
    total = sum(powered.values())
    if total <= 0 or not math.isfinite(total):
        return {p: 1.0 / len(scores) for p in scores}
    return {p: v / total for p, v in powered.items()}


def top_g_weights(normalized: Mapping[int, float], g: int) -> dict[int, float]:
    """``1/G`` for the G best peers (ties to the lower id), 0 for the rest."""
    if not 1 <= g <= len(normalized):
        raise ValueError(f"G={g} must be in [1, {len(normalized)}]")
    chosen = set(sorted(normalized, key=lambda p: (-normalized[p], p))[:g])
    return {p: (1.0 / g if p in chosen else 0.0) for p in sorted(normalized)}


def signed_step(theta: Params, update: Params, alpha: float) -> Params:
    return {n: theta[n] - alpha * update[n] for n in theta}


def apply_update(state: ValidatorState, deltas: Mapping[int, CompressedDelta],
                 weights: Mapping[int, float], alpha_t: float) -> Params:
    """Aggregate, take one signed step and remember the signed update for catch-up."""
    shapes = shapes_of(state.theta)
    present = {p: d for p, d in deltas.items() if weights.get(p, 0.0) > 0}
    aggregated = demo_aggregate(present, weights, shapes)
    state.theta = signed_step(state.theta, aggregated, alpha_t)
    state.stored_signed_updates.append((state.round, aggregated))
    return aggregated


def checkpoint_catchup(theta_ckpt: Params, stored: Sequence[tuple[int, Params]], lr_schedule,
                       from_round: int, to_round: int | None = None) -> Params:
    """Replay stored signed updates ``[from_round, to_round)`` on a checkpoint."""
    theta = copy_params(theta_ckpt)
    by_round = dict(stored)
    end = to_round if to_round is not None else (max(by_round) + 1 if by_round else from_round)
    for t in range(from_round, end):
        if t not in by_round:
            raise CatchupError(f"no stored update for round {t}")
        theta = signed_step(theta, by_round[t], lr_schedule(t))
    return theta


def primary_evaluation_round(
    state: ValidatorState,
    accepted: Mapping[int, CompressedDelta],
    round: int,
    config: EvaluationConfig,
    pool: DataPool,
    seed: int,
) -> dict[int, tuple[float, float]]:
    """Evaluate a random sample of accepted submissions; update ratings and mu.

    Returns ``{peer: (delta_assigned, delta_rand)}`` for the evaluated peers.
    """
    candidates = sorted(accepted)
    if not candidates:
        return {}
    rng = np.random.default_rng([seed, _SAMPLE_TAG, round])
    size = min(config.eval_set_size, len(candidates))
    sample = sorted(int(p) for p in rng.choice(candidates, size=size, replace=False))

    beta_t = config.eval_scale * state.lr_schedule(round)
    rand_batch = pool.unassigned_data(seed, sample[0], round, config.rand_batch_size)
    rand_base = forward_loss(state.theta, rand_batch)
    results = {}
    for p in sample:
        own = pool.select_data(seed, p, round)
        d_assigned = loss_score(state.theta, accepted[p], own, beta_t)
        d_rand = loss_score(state.theta, accepted[p], rand_batch, beta_t, base_loss=rand_base)
        results[p] = (d_assigned, d_rand)

    for p in sample:
        state.records.setdefault(p, PeerRecord(p, registered_round=round))
    if len(sample) >= 2:
        ranks = ranks_from_scores({p: results[p][1] for p in sample})
        ratings = rate_match({p: state.records[p].rating for p in sample}, ranks)
        for p in sample:
            state.records[p].rating = ratings[p]
    for p in sample:
        rec = state.records[p]
        rec.mu = proof_of_computation_update(rec.mu, *results[p], config.ema_decay)
        rec.evaluations += 1
        rec.last_loss_score = results[p][1]
    return results


# ------------------------------------------------------------------ the loop


@dataclass
class RoundReport:
    round: int
    alpha: float
    filter_set: list[int]
    fast: dict[int, FastResult]
    evaluated: dict[int, tuple[float, float]]
    scores: dict[int, float]
    incentives: dict[int, float]
    weights: dict[int, float]
    aggregated: Params


class Validator:
    def __init__(self, theta: Params, peer_ids: Sequence[int], config: EvaluationConfig,
                 codec: CodecConfig, pool: DataPool, seed: int, lr_schedule: LinearWarmup):
        if config.top_g > len(peer_ids):
            raise ConfigError(f"eval.top_g={config.top_g} exceeds the {len(peer_ids)} registered peers")
        self.config = config
        self.codec = codec
        self.pool = pool
        self.seed = seed
        self.state = ValidatorState(
            theta=copy_params(theta),
            records={p: PeerRecord(p) for p in peer_ids},
            lr_schedule=lr_schedule,
        )

    @property
    def theta(self) -> Params:
        return self.state.theta

    def filter_set(self, round: int, submitted: Sequence[int]) -> list[int]:
        """Every registered peer, capped at F by seeded sampling; top-G always included."""
        peers = sorted(self.state.records)
        cap = self.config.filter_set_size
        if len(peers) <= cap:
            return peers
        forced = [p for p in self.state.top_g if p in self.state.records]
        rest = [p for p in peers if p not in forced]
        # submitters first so a busy cap is spent on peers with something to check
        rest.sort(key=lambda p: (p not in submitted, p))
        rng = np.random.default_rng([self.seed, _FILTER_TAG, round])
        n_extra = max(cap - len(forced), 0)
        extra = [int(p) for p in rng.choice(rest, size=min(n_extra, len(rest)), replace=False)] if rest else []
        return sorted(set(forced) | set(extra))

    def process_round(self, round: int,
                      collected: Mapping[int, tuple[Submission | None, SubmissionStatus]],
                      window: tuple[float, float],
                      validator_probe: Sequence[ProbeEntry]) -> RoundReport:
        state, cfg = self.state, self.config
        state.round = round
        alpha = state.lr_schedule(round)

        submitted = [p for p, (sub, _) in collected.items() if sub is not None]
        filtered = self.filter_set(round, submitted)
        fast = {}
        for p in filtered:
            sub, _ = collected.get(p, (None, SubmissionStatus.MISSING))
            res = fast_evaluate(sub, window, validator_probe, alpha, cfg.sync_threshold, cfg.penalty)
            rec = state.records[p]
            rec.mu = apply_penalty(rec.mu, res.phi)
            rec.consecutive_fast_failures = rec.consecutive_fast_failures + 1 if res.phi < 1 else 0
            fast[p] = res

        accepted = {p: sub.delta for p, (sub, status) in collected.items()
                    if status is SubmissionStatus.ACCEPTED}
        evaluated = primary_evaluation_round(state, accepted, round, cfg, self.pool, self.seed)

        ever = {p: r for p, r in state.records.items() if r.evaluations > 0}
        scores = {p: (peer_score(r) if r.evaluations else 0.0) for p, r in state.records.items()}
        if ever:
            normalized = normalize_scores({p: scores[p] for p in ever}, cfg.incentive_exponent)
            incentives = {p: normalized.get(p, 0.0) for p in sorted(state.records)}
        else:
            incentives = normalize_scores({p: 0.0 for p in state.records}, cfg.incentive_exponent)
        weights = top_g_weights(incentives, cfg.top_g)
        state.top_g = [p for p, w in weights.items() if w > 0]

        aggregated = apply_update(state, accepted, weights, alpha)
        state.round = round + 1
        return RoundReport(round, alpha, filtered, fast, evaluated, scores, incentives, weights, aggregated)

    def checkpoint(self) -> None:
        """Take a checkpoint of the live model and drop the replay buffer."""
        self.state.checkpoint_theta = copy_params(self.state.theta)
        self.state.checkpoint_round = self.state.round
        self.state.stored_signed_updates.clear()


# ------------------------------------------------------------- checkpoint file

CHECKPOINT_MAGIC = b"GNTC"
CHECKPOINT_VERSION = 1
_EVAL_ECHO = struct.Struct("<IIIddddII")


@dataclass
class Checkpoint:
    theta: Params
    round: int
    codec: CodecConfig
    eval_config: EvaluationConfig


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    c, e = ckpt.codec, ckpt.eval_config
    out = [CHECKPOINT_MAGIC, struct.pack("<BQ", CHECKPOINT_VERSION, ckpt.round),
           struct.pack("<IId", c.chunk_size, c.topk, c.ef_decay),
           _EVAL_ECHO.pack(e.eval_set_size, e.filter_set_size, e.top_g, e.eval_scale, e.ema_decay,
                           e.sync_threshold, e.penalty, e.incentive_exponent, e.rand_batch_size),
           struct.pack("<I", len(ckpt.theta))]
    for name, t in ckpt.theta.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<II", len(raw), t.ndim) + raw)
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = Reader(data)
    if bytes(reader.take(4)) != CHECKPOINT_MAGIC:
        raise StructureError("not a checkpoint file")
    version, round_ = reader.unpack("<BQ")
    if version != CHECKPOINT_VERSION:
        raise StructureError(f"unsupported checkpoint version {version}")
    codec = CodecConfig(*reader.unpack("<IId"))
    eval_config = EvaluationConfig(*reader.unpack(_EVAL_ECHO.format))
    (n,) = reader.unpack("<I")
    theta = {}
    for _ in range(n):
        name_len, ndim = reader.unpack("<II")
        name = bytes(reader.take(name_len)).decode("utf-8")
        shape = reader.unpack(f"<{ndim}I")
        count = math.prod(shape)
        theta[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if not reader.exhausted:
        raise StructureError("trailing bytes in checkpoint")
    return Checkpoint(theta, round_, codec, eval_config)


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: Path | str) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
