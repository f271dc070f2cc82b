import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gauntlet.model import (
    ConfigError, DataConfig, DataPool, Dataset, ModelConfig, StructureError, check_compatible,
    forward_loss, gradient, init_model, sgd_step,
)


@pytest.fixture(scope="module")
def dataset():
    return Dataset(ModelConfig(), DataConfig())


def fd_gradient(theta, batch, eps=1e-4):
    out = {}
    for name, t in theta.items():
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            plus = {n: v.copy() for n, v in theta.items()}
            minus = {n: v.copy() for n, v in theta.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            g[idx] = (forward_loss(plus, batch) - forward_loss(minus, batch)) / (2 * eps)
        out[name] = g
    return out


def test_shapes_and_dtype():
    theta = init_model(ModelConfig(input_dim=5, hidden_dim=7, num_classes=3))
    assert {n: t.shape for n, t in theta.items()} == {"w1": (5, 7), "b1": (7,), "w2": (7, 3), "b2": (3,)}
    assert all(t.dtype == np.float64 for t in theta.values())


def test_init_is_seeded():
    a, b = init_model(ModelConfig(init_seed=3)), init_model(ModelConfig(init_seed=3))
    c = init_model(ModelConfig(init_seed=4))
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert not np.array_equal(a["w1"], c["w1"])


def test_initial_loss_is_log_classes(dataset):
    theta = init_model(ModelConfig())
    assert forward_loss(theta, dataset.holdout) == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("bad", [0, -1])
def test_model_config_rejects_nonpositive(bad):
    with pytest.raises(ConfigError):
        ModelConfig(hidden_dim=bad)


def test_gradient_matches_finite_differences(dataset):
    rng = np.random.default_rng(1)
    theta = {n: rng.normal(0, 0.5, t.shape) for n, t in init_model(ModelConfig()).items()}
    batch = dataset.take(rng.choice(len(dataset), 16, replace=False))
    g, fd = gradient(theta, batch), fd_gradient(theta, batch)
    for n in g:
        rel = np.abs(g[n] - fd[n]) / np.maximum(np.abs(fd[n]), 1e-8)
        assert np.all((rel < 1e-4) | (np.abs(g[n] - fd[n]) < 1e-9)), n


def test_sgd_step_lowers_loss(dataset):
    theta = init_model(ModelConfig())
    batch = dataset.take(np.arange(64))
    assert forward_loss(sgd_step(theta, gradient(theta, batch), 0.1), batch) < forward_loss(theta, batch)


def test_structure_mismatch(dataset):
    theta = init_model(ModelConfig(input_dim=3))
    with pytest.raises(StructureError):
        forward_loss(theta, dataset.holdout)
    with pytest.raises(StructureError):
        check_compatible(theta, init_model(ModelConfig()))


def test_pool_requires_unassigned_data(dataset):
    with pytest.raises(ConfigError):
        DataPool(dataset, num_peers=200)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), round=st.integers(0, 10**6), peers=st.integers(2, 20))
def test_shards_disjoint_and_sized(seed, round, peers):
    ds = Dataset(ModelConfig(), DataConfig(num_examples=1024, holdout_examples=8, shard_size=16))
    pool = DataPool(ds, peers)
    shards = [pool.assigned_indices(seed, p, round) for p in range(peers)]
    everything = np.concatenate(shards)
    assert all(len(s) == 16 for s in shards)
    assert len(np.unique(everything)) == len(everything)
    unassigned = pool.unassigned_pool(seed, round)
    assert not np.intersect1d(everything, unassigned).size
    assert len(unassigned) + len(everything) == len(ds)


def test_unassigned_batch_is_disjoint_and_shared(dataset):
    pool = DataPool(dataset, 8)
    a = pool.unassigned_data(5, 0, 3, 100)
    b = pool.unassigned_data(5, 6, 3, 100)
    assert np.array_equal(a.indices, b.indices)
    for p in range(8):
        assert not np.intersect1d(a.indices, pool.assigned_indices(5, p, 3)).size
    with pytest.raises(ConfigError):
        pool.unassigned_data(5, 0, 3, len(dataset))
    with pytest.raises(ConfigError):
        pool.select_data(5, 8, 3)


def test_assignment_changes_each_round(dataset):
    pool = DataPool(dataset, 8)
    assert not np.array_equal(pool.assigned_indices(0, 1, 0), pool.assigned_indices(0, 1, 1))
    assert np.array_equal(pool.assigned_indices(0, 1, 7), pool.assigned_indices(0, 1, 7))
