import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rvqdiff.diffusion import NoiseSchedule, Vocab, check_grid, forward_marginal, forward_sample, sigma_bar, transition_rate_matrix
from rvqdiff.errors import DomainError, ShapeError


def expm_series(a, terms=60):
    out = np.eye(len(a))
    term = np.eye(len(a))
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    return out


def test_vocab_layout():
    v = Vocab(5)
    assert v.mask_id == 5 and v.n == 6
    with pytest.raises(DomainError):
        Vocab(1)


def test_sigma_bar_values():
    assert sigma_bar(0.0) == 0.0
    assert sigma_bar(1.0) == pytest.approx(6.907755278982137, abs=1e-12)
    s = NoiseSchedule()
    assert s.mask_prob(0.5) == pytest.approx(0.4995, abs=1e-15)
    assert 1 - math.exp(-float(s.sigma_bar(0.5))) == pytest.approx(0.4995, abs=1e-12)


@pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
def test_sigma_bar_domain(t):
    with pytest.raises(DomainError):
        sigma_bar(t)


@given(st.floats(0, 1), st.floats(0, 1))
def test_sigma_bar_monotone(a, b):
    if a < b:
        assert sigma_bar(a) < sigma_bar(b)


@given(st.floats(1e-6, 1 - 1e-6))
def test_sigma_is_derivative_of_sigma_bar(t):
    s = NoiseSchedule()
    h = 1e-4 * min(t, 1 - t)
    fd = (s.sigma_bar(t + h) - s.sigma_bar(t - h)) / (2 * h)
    assert fd == pytest.approx(float(s.sigma(t)), rel=1e-5)


@given(st.floats(1e-4, 1.0))
def test_log_ratio_matches_definition(t):
    s = NoiseSchedule()
    sb = float(s.sigma_bar(t))
    assert float(s.log_ratio(t)) == pytest.approx(math.log(math.exp(-sb) / -math.expm1(-sb)), abs=1e-9)


def test_rate_matrix_n3():
    q = transition_rate_matrix(Vocab(3))
    expected = np.array([[-1, 0, 0, 1], [0, -1, 0, 1], [0, 0, -1, 1], [0, 0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(q, expected)


@pytest.mark.parametrize("n", [2, 3, 5, 8])
def test_rate_matrix_rows(n):
    q = transition_rate_matrix(Vocab(n))
    np.testing.assert_array_equal(q.sum(axis=1), 0.0)
    np.testing.assert_array_equal(q[n], 0.0)


@pytest.mark.parametrize("n", [2, 4, 8])
@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_matrix_exponential_matches_marginal(n, t):
    v = Vocab(n)
    sb = float(sigma_bar(t))
    p = expm_series(sb * transition_rate_matrix(v))
    for x0 in range(n):
        marg = forward_marginal(x0, sb, v)
        row = np.zeros(v.n)
        for k, val in marg.items():
            row[k] = val
        np.testing.assert_allclose(p[x0], row, atol=1e-12)


def test_forward_marginal_examples():
    v = Vocab(4)
    assert forward_marginal(2, 0.0, v) == {2: 1.0, 4: 0.0}
    m = forward_marginal(1, math.log(2), v)
    assert m[1] == pytest.approx(0.5) and m[4] == pytest.approx(0.5)
    assert forward_marginal(0, 1e6, v)[4] == 1.0
    with pytest.raises(DomainError):
        forward_marginal(4, 0.1, v)


def test_forward_sample_contract():
    v = Vocab(4)
    g = np.random.default_rng(0).integers(0, 4, size=(3, 50))
    np.testing.assert_array_equal(forward_sample(g, 0.0, np.random.default_rng(1), v), g)
    a = forward_sample(g, 0.4, np.random.default_rng(7), v)
    b = forward_sample(g, 0.4, np.random.default_rng(7), v)
    np.testing.assert_array_equal(a, b)
    kept = a != v.mask_id
    np.testing.assert_array_equal(a[kept], g[kept])
    with pytest.raises(DomainError):
        forward_sample(a, 0.5, np.random.default_rng(0), v)


def test_forward_sample_at_one():
    v = Vocab(4)
    g = np.zeros((4, 25000), dtype=np.int64)
    out = forward_sample(g, 1.0, np.random.default_rng(3), v)
    assert abs((out == v.mask_id).mean() - 0.999) <= 0.003


@pytest.mark.parametrize("t", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
def test_mask_fraction_linear(t):
    v = Vocab(3)
    g = np.zeros((2, 50000), dtype=np.int64)
    out = forward_sample(g, t, np.random.default_rng(int(t * 100)), v)
    assert abs((out == v.mask_id).mean() - 0.999 * t) <= 0.01


def test_forward_sample_per_sample_t():
    v = Vocab(3)
    g = np.zeros((2, 2, 20000), dtype=np.int64)
    out = forward_sample(g, np.array([0.0, 1.0]), np.random.default_rng(0), v)
    assert (out[0] == v.mask_id).sum() == 0
    assert (out[1] == v.mask_id).mean() > 0.99
    with pytest.raises(ShapeError):
        forward_sample(g, np.array([0.1, 0.2, 0.3]), np.random.default_rng(0), v)


def test_check_grid_errors():
    v = Vocab(3)
    with pytest.raises(ShapeError):
        check_grid(np.zeros(5, dtype=int), v)
    with pytest.raises(ShapeError):
        check_grid(np.zeros((13, 2), dtype=int), v)
    with pytest.raises(ShapeError):
        check_grid(np.zeros((2, 2)), v)
    with pytest.raises(DomainError):
        check_grid(np.full((2, 2), 4), v)
    with pytest.raises(DomainError):
        check_grid(np.full((2, 2), 3), v, allow_mask=False)
