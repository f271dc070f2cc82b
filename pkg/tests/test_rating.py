import pytest
from hypothesis import given, settings, strategies as st
from openskill.models import PlackettLuce

from gauntlet.rating import BETA, Rating, new_rating, ordinal, rate_match, ranks_from_scores

ORACLE = PlackettLuce(tau=0.0, limit_sigma=False)


def oracle_rate(ratings, ranks):
    players = sorted(ratings)
    teams = [[ORACLE.rating(mu=ratings[p].mu, sigma=ratings[p].sigma)] for p in players]
    out = ORACLE.rate(teams, ranks=[ranks[p] for p in players])
    return {p: (t[0].mu, t[0].sigma) for p, t in zip(players, out)}


def test_defaults():
    r = new_rating()
    assert (r.mu, r.sigma) == (25.0, 25.0 / 3.0)
    assert ordinal(r) == pytest.approx(0.0, abs=1e-12)
    assert BETA == ORACLE.beta
    with pytest.raises(ValueError):
        Rating(0.0, 0.0)


rating_st = st.builds(Rating, st.floats(-20, 60), st.floats(0.5, 10))


@settings(max_examples=100, deadline=None)
@given(st.lists(rating_st, min_size=2, max_size=6), st.data())
def test_matches_openskill(ratings, data):
    ratings = dict(enumerate(ratings))
    ranks = {p: data.draw(st.integers(0, len(ratings) - 1)) for p in ratings}
    ours = rate_match(ratings, ranks)
    for p, (mu, sigma) in oracle_rate(ratings, ranks).items():
        assert ours[p].mu == pytest.approx(mu, rel=1e-9, abs=1e-9)
        assert ours[p].sigma == pytest.approx(sigma, rel=1e-9)


def test_winner_gains_loser_loses_symmetric():
    out = rate_match({0: new_rating(), 1: new_rating()}, {0: 0, 1: 1})
    assert out[0].mu > 25 > out[1].mu
    assert out[0].mu - 25 == pytest.approx(25 - out[1].mu)
    assert out[0].sigma == out[1].sigma < 25 / 3


def test_full_tie_between_equals_keeps_mu():
    out = rate_match({0: new_rating(), 1: new_rating(), 2: new_rating()}, {0: 0, 1: 0, 2: 0})
    for r in out.values():
        assert r.mu == pytest.approx(25.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(rating_st, min_size=3, max_size=5), st.permutations(range(5)))
def test_locality_order_and_sigma(ratings, perm):
    ratings = dict(enumerate(ratings))
    ratings[99] = Rating(1.0, 2.0)
    ranks = {p: i for i, p in enumerate(p for p in perm if p in ratings)}
    out = rate_match(ratings, ranks)
    assert out[99] is ratings[99]
    shuffled = rate_match(dict(reversed(list(ratings.items()))), dict(reversed(list(ranks.items()))))
    assert all(shuffled[p] == out[p] for p in ratings)
    assert all(out[p].sigma <= ratings[p].sigma for p in ranks)


def test_single_player_is_noop():
    r = {0: Rating(30.0, 4.0)}
    assert rate_match(r, {0: 0}) == r


def test_ranks_from_scores():
    assert ranks_from_scores({0: 0.5, 1: 2.0, 2: -1.0}) == {1: 0, 0: 1, 2: 2}
    assert ranks_from_scores({0: 1.0, 1: 1.0 + 1e-12, 2: 0.0}) == {0: 0, 1: 0, 2: 1}
