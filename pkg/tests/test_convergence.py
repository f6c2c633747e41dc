"""Tests for rate schedules, bound coefficients and optimality-gap bounds."""

import numpy as np
import pytest

from airfeel import dataset as dsm
from airfeel.convergence import (CASE_BIASED, CASE_UNBIASED, build_coefficients,
                                 build_schedule, effective_gap_biased,
                                 effective_gap_unbiased, analytic_gap_bound,
                                 fixed_rate_bound, per_round_bound,
                                 save_bound_breakdown)


@pytest.fixture(scope="module")
def lc():
    ds = dsm.generate_dataset(0, 2, 100, 6, 0.2, 5e-5)
    return dsm.learning_constants(ds)


def test_fixed_schedule_values(lc):
    sched = build_schedule("fixed", {"eta": 0.05}, 4, lc.delta, lc.L)
    assert np.allclose(sched.eta, 0.05)
    assert sched.N == 4


def test_fixed_schedule_rejects_large_rate(lc):
    cap = 2.0 / (2.0 + lc.L)
    with pytest.raises(ValueError, match="2/\\(2\\+L\\)"):
        build_schedule("fixed", {"eta": cap * 1.01}, 4, lc.delta, lc.L)


def test_diminishing_schedule_values(lc):
    u, v = 2.0, 8.0
    sched = build_schedule("diminishing", {"u": u, "v": v}, 5, lc.delta, lc.L)
    assert np.allclose(sched.eta, u / (np.arange(1, 6) + v))


def test_diminishing_schedule_requires_large_u(lc):
    with pytest.raises(ValueError, match="1/delta"):
        build_schedule("diminishing", {"u": 0.5 / lc.delta, "v": 8.0}, 5,
                       lc.delta, lc.L)


def test_unknown_schedule_kind(lc):
    with pytest.raises(ValueError, match="unknown"):
        build_schedule("cyclic", {}, 3, lc.delta, lc.L)


def test_fixed_rate_round_weights(lc):
    N = 5
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, K=3, m_b=10)
    C = 1.0 - lc.delta * 0.05
    assert np.allclose(co.C, C)
    assert np.allclose(co.J, C ** (N - np.arange(1, N + 1)) / 2.0)


def test_diminishing_round_weights_hand_check(lc):
    sched = build_schedule("diminishing", {"u": 2.0, "v": 8.0}, 3,
                           lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, K=3, m_b=10)
    C = 1.0 - lc.delta * sched.eta
    for n in range(3):
        expect = np.prod(C[n:]) / (2.0 * C[n])
        assert np.isclose(co.J[n], expect)


def test_coefficient_formulas(lc):
    sched = build_schedule("fixed", {"eta": 0.05}, 4, lc.delta, lc.L)
    K, m_b = 5, 20
    co = build_coefficients(CASE_BIASED, sched, lc, K, m_b)
    G = 2.0 * lc.W * lc.L
    sig2 = float(lc.sigma @ lc.sigma)
    assert np.allclose(co.G, G)
    assert np.allclose(co.Ghat, G ** 2 + sig2 / m_b)
    assert np.allclose(co.A, (1.0 + 0.05 ** 2 * lc.L ** 2) * G ** 2 / K ** 2)
    assert np.allclose(co.B, 0.05 ** 2 * lc.L * co.Ghat / K)


def test_unbiased_divisor_flag(lc):
    sched = build_schedule("fixed", {"eta": 0.05}, 4, lc.delta, lc.L)
    K = 5
    base = build_coefficients(CASE_UNBIASED, sched, lc, K, 10)
    literal = build_coefficients(CASE_UNBIASED, sched, lc, K, 10,
                                 literal_unbiased_divisor=True)
    assert base.A is None
    assert np.allclose(base.B, literal.B * K)


def test_gradient_bound_override(lc):
    sched = build_schedule("fixed", {"eta": 0.05}, 3, lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, 2, 10, G_override=1.5)
    assert np.allclose(co.G, 1.5)


def test_effective_gap_matches_brute_force(lc):
    rng = np.random.default_rng(1)
    K, N = 3, 4
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, K, 10)
    from airfeel.channel import ChannelTrace
    trace = ChannelTrace(rng.uniform(0.2, 2.0, (K, N)), 0.0)
    p = rng.uniform(0.0, 2.0, (K, N))
    r = trace.gains * np.sqrt(p)
    brute = 0.0
    for n in range(N):
        brute += co.J[n] * co.A[n] * (r[:, n].sum() - K) ** 2
        brute += co.J[n] * co.B[n] * ((r[:, n] - 1.0) ** 2).sum()
    assert np.isclose(effective_gap_biased(p, trace, co), brute)
    co_u = build_coefficients(CASE_UNBIASED, sched, lc, K, 10)
    brute_u = sum(co_u.J[n] * co_u.B[n] * ((r[:, n] - 1.0) ** 2).sum()
                  for n in range(N))
    assert np.isclose(effective_gap_unbiased(p, trace, co_u), brute_u)


def test_fixed_and_per_round_bounds_differ_only_in_variance_term(lc):
    # the fixed-rate form inflates the gradient-variance term by 1/delta
    # relative to the per-round form; everything else coincides at m_b = N
    N, K = 6, 4
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    rng = np.random.default_rng(2)
    b = rng.uniform(0.0, 0.5, N)
    m = rng.uniform(0.0, 1.0, N)
    gap0 = 3.0
    fixed = fixed_rate_bound(gap0, b, m, sched, lc, K, m_b=N)
    per_round = per_round_bound(gap0, b, m, sched, lc, K, m_b=N)
    C = 1.0 - lc.delta * 0.05
    w_sum = float((C ** (N - np.arange(1, N + 1)) / 2.0).sum())
    sig2 = float(lc.sigma @ lc.sigma)
    var_gap = (w_sum * 0.05 ** 2 * lc.L * sig2 / (2.0 * N * K ** 2)
               * (1.0 / lc.delta - 1.0))
    assert np.isclose(fixed.total - per_round, var_gap)
    assert fixed.total >= per_round  # delta <= 1 makes the fixed form looser
    assert fixed.error_floor >= 0
    assert np.isclose(fixed.total, fixed.error_floor + fixed.gap_to_floor)


def test_fixed_rate_bound_flags_batch_mismatch(lc):
    sched = build_schedule("fixed", {"eta": 0.05}, 4, lc.delta, lc.L)
    res = fixed_rate_bound(1.0, np.zeros(4), np.zeros(4), sched, lc, 2, m_b=3)
    assert any("mini-batch" in f for f in res.flags)


def test_zero_error_fixed_rate_bound_contracts(lc):
    N = 10
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    res = fixed_rate_bound(2.0, np.zeros(N), np.zeros(N), sched, lc, K=4,
                           m_b=N)
    C = 1.0 - lc.delta * 0.05
    sig2 = float(lc.sigma @ lc.sigma)
    var = 0.05 ** 2 * lc.L * sig2 / (2.0 * lc.delta * N * 16)
    w = C ** (N - np.arange(1, N + 1)) / 2.0
    assert res.error_floor == 0.0
    assert np.isclose(res.total, C ** N * 2.0 + float(w @ np.full(N, var)))


def test_analytic_bound_dominates_effective_gap(lc):
    rng = np.random.default_rng(3)
    K, N = 3, 5
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, K, 10)
    from airfeel.channel import ChannelTrace
    trace = ChannelTrace(rng.uniform(0.2, 2.0, (K, N)), 0.3)
    p = rng.uniform(0.0, 2.0, (K, N))
    total = analytic_gap_bound(p, trace, co, lc, initial_gap=1.0, q=6)
    assert total >= effective_gap_biased(p, trace, co)


def test_save_bound_breakdown(tmp_path, lc):
    N = 4
    sched = build_schedule("fixed", {"eta": 0.05}, N, lc.delta, lc.L)
    co = build_coefficients(CASE_BIASED, sched, lc, 2, 10)
    path = tmp_path / "bound.csv"
    save_bound_breakdown(path, co, np.ones(N), np.ones(N), lc)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == N + 1
    assert lines[0].split(",")[0] == "round"
