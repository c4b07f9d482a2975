"""The numba kernels and their numpy twins must agree exactly."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rvqdiff import _accel, kernels


def _random_support(rng, n_support, cells, n_real):
    flat = rng.choice(n_real**cells, size=n_support, replace=False)
    return (flat[:, None] // n_real ** np.arange(cells)[None, :]) % n_real


@given(st.integers(0, 10_000))
def test_posterior_twins(seed):
    rng = np.random.default_rng(seed)
    n_real, cells = 3, 4
    support = _random_support(rng, 20, cells, n_real)
    probs = rng.random(20)
    probs /= probs.sum()
    xt = np.where(rng.random((30, cells)) < 0.5, n_real, support[rng.integers(0, 20, 30)])
    xt[0] = n_real
    a = kernels._posterior_numba(support, probs, xt, n_real, n_real)
    b = kernels._posterior_numpy(support, probs, xt, n_real, n_real, chunk=7)
    np.testing.assert_allclose(a[0], b[0], atol=1e-14)
    np.testing.assert_allclose(a[1], b[1], atol=1e-14)
    np.testing.assert_allclose(a[0][0].sum(axis=1), 1.0)


@given(st.integers(0, 10_000))
def test_categorical_twins(seed):
    rng = np.random.default_rng(seed)
    p = rng.random((200, 5))
    p[rng.random((200, 5)) < 0.3] = 0.0
    p[:, 0] += 1e-3
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(200)
    np.testing.assert_array_equal(kernels._categorical_numba(p, u), kernels._categorical_numpy(p, u))


def test_categorical_frequencies():
    p = np.tile([0.2, 0.5, 0.3], (100_000, 1))
    draws = kernels.categorical(p, np.random.default_rng(0).random(100_000))
    np.testing.assert_allclose(np.bincount(draws) / 1e5, [0.2, 0.5, 0.3], atol=0.01)


@given(st.integers(0, 10_000))
def test_runs_twins(seed):
    rng = np.random.default_rng(seed)
    N, d, n = 40, 12, 5
    dist = rng.random((N, d, n)) + 0.05
    dist /= dist.sum(axis=2, keepdims=True)
    q = rng.random(N)
    us, ud = rng.random((N, d)), rng.random((N, d))
    a = kernels._runs_numba(dist, q, us, ud)
    b = kernels._runs_numpy(dist, q, us, ud)
    np.testing.assert_array_equal(a, b)
    # a switch always lands on a different symbol
    switched = us[:, 1:] < q[:, None]
    assert np.all((a[:, 1:] != a[:, :-1]) == switched)


def test_dispatch_honours_flag(monkeypatch):
    p = np.array([[0.5, 0.5]])
    monkeypatch.setattr(_accel, "USE_NUMBA", False)
    assert kernels.categorical(p, np.array([0.7]))[0] == 1
    monkeypatch.setattr(_accel, "USE_NUMBA", True)
    assert kernels.categorical(p, np.array([0.7]))[0] == 1


@pytest.mark.parametrize("value,expected", [("1", False), ("true", False), ("0", True), ("", True)])
def test_env_flag(value, expected):
    assert _accel._numba_enabled(value) is (expected and _accel.HAS_NUMBA)
