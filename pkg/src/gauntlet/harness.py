"""Seeded multi-round experiments, CSV traces and summary reports."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .config import RunConfig, dump_config
from .model import DataPool, Dataset, forward_loss, init_model
from .peers import Peer, format_strategy, is_dependent
from .rating import ordinal
from .simnet import Bucket, GlobalClock, SubmissionStatus, collect_round, probe_positions, read_probe
from .validator import Checkpoint, RoundReport, Validator, save_checkpoint

TRACE_VERSION = "# gauntlet-trace v1"
TRACE_COLUMNS = [
    "round", "peer", "strategy", "status", "loss_score_assigned", "loss_score_rand",
    "rating_mu", "rating_sigma", "rating_ordinal", "mu", "peer_score", "incentive",
    "top_g", "sync_score", "phi", "alpha", "probe_loss",
]


class TraceError(ValueError):
    """A trace file could not be parsed."""


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


class Simulation:
    """Drives peers, buckets and the validator one round at a time."""

    def __init__(self, config: RunConfig, mirror_dir: Path | None = None):
        config.validate()
        self.config = config
        self.dataset = Dataset(config.model, config.data)
        self.pool = DataPool(self.dataset, len(config.roster))
        self.theta0 = init_model(config.model)
        self.shapes = {n: t.shape for n, t in self.theta0.items()}
        self.clock = GlobalClock(config.clock.round_length, config.clock.window_start, config.clock.window_end)
        ids = list(range(len(config.roster)))
        self.peers = {p: Peer(p, self.theta0, s, config.codec, config.peer) for p, s in zip(ids, config.roster)}
        self.buckets = {p: Bucket(p, mirror_dir) for p in ids}
        self.validator = Validator(self.theta0, ids, config.eval, config.codec, self.pool,
                                   config.seed, config.lr)
        self.round = 0
        self.last_report: RoundReport | None = None
        self.last_collected = None

    def step(self) -> list[dict]:
        t, cfg = self.round, self.config
        positions = probe_positions(cfg.seed, t, self.shapes)
        validator_probe = read_probe(self.validator.theta, positions)

        independent = [p for p in sorted(self.peers) if not is_dependent(self.peers[p].strategy)]
        dependent = [p for p in sorted(self.peers) if is_dependent(self.peers[p].strategy)]
        for p in independent + dependent:
            self.peers[p].run_round(self.pool, cfg.seed, t, self.clock, self.buckets, positions, self.peers)

        self.clock.set(t, self.clock.round_length)
        collected = collect_round(self.buckets, t, self.clock, self.shapes, cfg.codec)
        report = self.validator.process_round(t, collected, self.clock.window(t), validator_probe)

        accepted = {p: sub.delta for p, (sub, status) in collected.items()
                    if status is SubmissionStatus.ACCEPTED}
        for p in sorted(self.peers):
            self.peers[p].local_aggregate_and_update(accepted, report.weights, report.alpha, t)

        probe_loss = forward_loss(self.validator.theta, self.dataset.holdout)
        rows = []
        records = self.validator.state.records
        for p in sorted(self.peers):
            rec = records[p]
            fast = report.fast.get(p)
            evaluated = report.evaluated.get(p)
            rows.append({
                "round": t,
                "peer": p,
                "strategy": format_strategy(self.peers[p].strategy),
                "status": collected[p][1].value,
                "loss_score_assigned": evaluated[0] if evaluated else None,
                "loss_score_rand": evaluated[1] if evaluated else None,
                "rating_mu": rec.rating.mu,
                "rating_sigma": rec.rating.sigma,
                "rating_ordinal": ordinal(rec.rating),
                "mu": rec.mu,
                "peer_score": report.scores[p],
                "incentive": report.incentives[p],
                "top_g": report.weights[p] > 0,
                "sync_score": fast.sync if fast else None,
                "phi": fast.phi if fast else None,
                "alpha": report.alpha,
                "probe_loss": probe_loss,
            })
        self.last_report, self.last_collected = report, collected
        self.round += 1
        return rows

    def rounds(self) -> Iterator[list[dict]]:
        while self.round < self.config.rounds:
            yield self.step()

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.validator.theta, self.round, self.config.codec, self.config.eval)


def write_trace(rows_iter, stream) -> None:
    stream.write(TRACE_VERSION + "\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for rows in rows_iter:
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])
        stream.flush()


def run(config: RunConfig, out_dir: Path | str) -> Path:
    """Execute a full run, writing ``trace.csv``, ``checkpoint.bin`` and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    sim = Simulation(config)
    trace_path = out / "trace.csv"
    with trace_path.open("w", newline="") as fh:
        write_trace(sim.rounds(), fh)
    save_checkpoint(out / "checkpoint.bin", sim.checkpoint())
    (out / "summary.txt").write_text(format_summary(report(trace_path)))
    return trace_path


# ----------------------------------------------------------------- reporting


def _num(value: str, column: str, lineno: int, cast=float):
    if value == "":
        return None
    try:
        return cast(value)
    except ValueError as exc:
        raise TraceError(f"line {lineno}: column {column!r} has bad value {value!r}") from exc


def read_trace(path: Path | str) -> list[dict]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        return []
    start = 1 if lines[0].startswith("#") else 0
    if lines[0].startswith("#") and lines[0].strip() != TRACE_VERSION:
        raise TraceError(f"line 1: unsupported trace version {lines[0]!r}")
    if len(lines) <= start:
        return []
    reader = csv.reader(io.StringIO("\n".join(lines[start:])))
    header = next(reader)
    if header != TRACE_COLUMNS:
        raise TraceError(f"line {start + 1}: unexpected header {header}")
    rows = []
    for offset, values in enumerate(reader):
        lineno = start + 2 + offset
        if len(values) != len(TRACE_COLUMNS):
            raise TraceError(f"line {lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(values)}")
        raw = dict(zip(TRACE_COLUMNS, values))
        row = {"strategy": raw["strategy"], "status": raw["status"]}
        for c in ("round", "peer"):
            row[c] = _num(raw[c], c, lineno, int)
            if row[c] is None:
                raise TraceError(f"line {lineno}: column {c!r} is empty")
        row["top_g"] = raw["top_g"] == "1"
        for c in TRACE_COLUMNS:
            if c not in row:
                row[c] = _num(raw[c], c, lineno)
        if raw["status"] not in {s.value for s in SubmissionStatus}:
            raise TraceError(f"line {lineno}: unknown status {raw['status']!r}")
        rows.append(row)
    return rows


@dataclass
class PeerSummary:
    peer: int
    strategy: str
    mean_ordinal: float
    final_ordinal: float
    final_mu: float
    rounds_in_top_g: int
    total_incentive: float
    evaluations: int


@dataclass
class Summary:
    rounds: int
    peers: list[PeerSummary]
    verdicts: dict[str, bool]
    initial_probe_loss: float | None = None
    final_probe_loss: float | None = None


def _by_round(rows):
    out: dict[int, dict[int, dict]] = {}
    for r in rows:
        out.setdefault(r["round"], {})[r["peer"]] = r
    return out


def _kind(strategy: str) -> str:
    return strategy.split("(", 1)[0]


def _is_baseline(strategy: str) -> bool:
    return strategy in ("honest", "honest(data_multiplier=1.0)")


def figure2_verdicts(rows: list[dict], start_round: int = 100, window: int = 50) -> dict[str, bool]:
    """More-data and desync checks, when the roster contains those peers."""
    rounds = _by_round(rows)
    peers = {r["peer"]: r["strategy"] for r in rows}
    verdicts = {}
    baseline = [p for p, s in peers.items() if _is_baseline(s)]
    rich = [p for p, s in peers.items() if _kind(s) == "honest" and not _is_baseline(s)]
    if rich and baseline:
        checked = [t for t in rounds if t >= start_round]
        wins = sum(
            rounds[t][rich[0]]["rating_ordinal"] > statistics.median(rounds[t][b]["rating_ordinal"] for b in baseline)
            for t in checked
        )
        verdicts["more_data_outranks_baseline"] = bool(checked) and wins >= 0.9 * len(checked)
    desync = [p for p, s in peers.items() if _kind(s) == "desync"]
    honest = [p for p, s in peers.items() if _kind(s) == "honest"]
    if desync and honest:
        p = desync[0]
        resume = _desync_resume(peers[p])
        span = [t for t in rounds if resume <= t <= resume + window]
        verdicts["desync_falls_below_honest"] = any(
            rounds[t][p]["rating_ordinal"] < min(rounds[t][h]["rating_ordinal"] for h in honest) for t in span
        )
    return verdicts


def _desync_resume(strategy: str) -> int:
    params = dict(kv.split("=") for kv in strategy[strategy.index("(") + 1:-1].split(","))
    return int(params["pause_at_round"]) + int(params["pause_rounds"])


def report(trace_path: Path | str) -> Summary:
    rows = read_trace(trace_path)
    if not rows:
        return Summary(0, [], {})
    rounds = _by_round(rows)
    last = max(rounds)
    peers = sorted({r["peer"] for r in rows})
    summaries = []
    for p in peers:
        mine = [r for r in rows if r["peer"] == p]
        summaries.append(PeerSummary(
            peer=p,
            strategy=mine[-1]["strategy"],
            mean_ordinal=statistics.fmean(r["rating_ordinal"] for r in mine),
            final_ordinal=mine[-1]["rating_ordinal"],
            final_mu=mine[-1]["mu"],
            rounds_in_top_g=sum(r["top_g"] for r in mine),
            total_incentive=math.fsum(r["incentive"] for r in mine),
            evaluations=sum(r["loss_score_rand"] is not None for r in mine),
        ))

    verdicts = {
        "incentives_sum_to_one": all(
            abs(math.fsum(r["incentive"] for r in rs.values()) - 1.0) <= 1e-9 for rs in rounds.values()
        ),
        "trace_complete": all(set(rs) == set(peers) for rs in rounds.values()),
    }
    honest = [s for s in summaries if _kind(s.strategy) == "honest"]
    sanctioned = [s for s in summaries if _kind(s.strategy) in ("silent", "late_putter", "malformed")]
    if honest and sanctioned:
        verdicts["sanctioned_earn_less_than_honest"] = (
            max(s.total_incentive for s in sanctioned) < min(s.total_incentive for s in honest)
        )
    freeloaders = [s for s in summaries if _kind(s.strategy) in ("copier", "ignore_assigned")]
    if honest and freeloaders:
        verdicts["proof_of_computation_separates"] = (
            min(s.final_mu for s in honest) >= 0.5
            and max(abs(s.final_mu) for s in freeloaders) <= 0.3
        )
    verdicts.update(figure2_verdicts(rows))
    probe = [rounds[t][peers[0]]["probe_loss"] for t in sorted(rounds)]
    return Summary(last + 1, summaries, verdicts, probe[0], probe[-1])


def format_summary(summary: Summary) -> str:
    if not summary.peers:
        return "empty trace\n"
    out = [f"rounds: {summary.rounds}"]
    if summary.initial_probe_loss is not None:
        out.append(f"probe loss: {summary.initial_probe_loss:.4f} -> {summary.final_probe_loss:.4f}")
    out.append(f"{'peer':>4}  {'strategy':<44} {'mean ord':>9} {'final ord':>9} {'final mu':>9} "
               f"{'top-G':>6} {'incentive':>10} {'evals':>6}")
    for s in summary.peers:
        out.append(f"{s.peer:>4}  {s.strategy:<44} {s.mean_ordinal:>9.3f} {s.final_ordinal:>9.3f} "
                   f"{s.final_mu:>9.3f} {s.rounds_in_top_g:>6} {s.total_incentive:>10.3f} {s.evaluations:>6}")
    out.append("verdicts:")
    out.extend(f"  {name}: {'PASS' if ok else 'FAIL'}" for name, ok in summary.verdicts.items())
    return "\n".join(out) + "\n"
