"""Plackett-Luce rating updates (Weng & Lin, 2011) for single-player teams."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

MU0 = 25.0
SIGMA0 = 25.0 / 3.0
BETA = 25.0 / 6.0
KAPPA = 1e-4
VARIANCE_FLOOR = 1e-6
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Rating:
    mu: float = MU0
    sigma: float = SIGMA0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("rating deviation must be positive")


def new_rating() -> Rating:
    return Rating(MU0, SIGMA0)


def ordinal(r: Rating) -> float:
    """Conservative skill estimate ``mu - 3 sigma``."""
    return r.mu - 3.0 * r.sigma


def ranks_from_scores(scores: Mapping[int, float], tol: float = TIE_TOLERANCE) -> dict[int, int]:
    """Dense ranks (0 = best) from higher-is-better scores.

    Scores within ``tol`` of the previous score in sorted order share a rank.
    """
    order = sorted(scores, key=lambda p: (-scores[p], p))
    ranks: dict[int, int] = {}
    rank, prev = -1, None
    for p in order:
        if prev is None or prev - scores[p] > tol:
            rank += 1
        ranks[p] = rank
        prev = scores[p]
    return ranks


def rate_match(
    ratings: Mapping[int, Rating],
    result: Sequence[tuple[int, int]] | Mapping[int, int],
    beta: float = BETA,
    kappa: float = KAPPA,
) -> dict[int, Rating]:
    """Return a copy of ``ratings`` updated by one ranked match.

    ``result`` maps participant -> rank (0 best, equal ranks tie). Peers not
    in the match keep their rating object. Matches with fewer than two
    participants are a no-op.
    """
    ranks = dict(result)
    updated = dict(ratings)
    if len(ranks) < 2:
        return updated
    players = sorted(ranks)  # fixed fold order makes the update permutation-invariant
    mu = {p: ratings[p].mu for p in players}
    var = {p: ratings[p].sigma ** 2 for p in players}
    c = math.sqrt(sum(var[p] + beta * beta for p in players))
    exp_mu = {p: math.exp(mu[p] / c) for p in players}
    # sum over everyone ranked no better than q, and tie-group sizes
    sum_q = {q: sum(exp_mu[i] for i in players if ranks[i] >= ranks[q]) for q in players}
    tie_count = {q: sum(1 for i in players if ranks[i] == ranks[q]) for q in players}

    for i in players:
        omega = 0.0
        delta = 0.0
        for q in players:
            if ranks[q] > ranks[i]:
                continue
            quotient = exp_mu[i] / sum_q[q]
            if q == i:
                omega += (1.0 - quotient) / tie_count[q]
            else:
                omega -= quotient / tie_count[q]
            delta += quotient * (1.0 - quotient) / tie_count[q]
        gamma = math.sqrt(var[i]) / c
        omega *= var[i] / c
        delta *= gamma * var[i] / (c * c)
        new_var = max(var[i] * max(1.0 - delta, kappa), VARIANCE_FLOOR)
        updated[i] = Rating(mu[i] + omega, min(math.sqrt(new_var), ratings[i].sigma))
    return updated
