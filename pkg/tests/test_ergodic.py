"""Ergodic-machinery tests: stationary estimate, lambda estimators, corrector, probes."""

import numpy as np
import pytest

from mfgcn.core import SolveParams
from mfgcn.couplings import CouplingSpec
from mfgcn.discounted import DiscountCaps
from mfgcn.ergodic import (
    corollary_probe,
    estimate_corrector,
    estimate_lambda,
    estimate_stationary,
    evaluate_master,
)
from mfgcn.torus import DensityField, Grid, ValueField, wasserstein1

from oracles import stationary_newton


def grid32():
    return Grid(32)


def zero_field(g):
    return ValueField(g, np.zeros(g.n))


def picard(tol=1e-9, dt=4e-3):
    return SolveParams(damping="picard", theta=1.0, tol=tol, max_iters=400, dt=dt)


def spec_of(g, a_amp=0.2, lam=(0.0, 1.0), mu=()):
    return CouplingSpec(a=ValueField(g, a_amp * np.cos(2 * np.pi * g.nodes)),
                        lam=lam, b=zero_field(g), mu=mu)


def test_stationary_zero_data_heat_equilibrium():
    g = grid32()
    spec = CouplingSpec(a=zero_field(g), lam=(), b=zero_field(g), mu=())
    stat = estimate_stationary(spec, 0.0, t_ladder=(2.0, 3.0), p=picard())
    assert stat.accepted
    assert np.max(np.abs(stat.mu_bar - 1.0)) < 1e-9
    assert np.max(np.abs(stat.v_bar)) < 1e-12


def test_stationary_matches_newton_oracle():
    # decoupled potential game: midpoint density vs the independent Newton
    # solve of the time-independent system
    g = grid32()
    spec = spec_of(g, lam=())
    stat = estimate_stationary(spec, 0.0, t_ladder=(3.0, 5.0), p=picard())
    _, m_newton, _ = stationary_newton(32, spec.a.values)
    m_mid = DensityField(g, stat.mu_bar[0] / (g.h * stat.mu_bar[0].sum()))
    assert wasserstein1(m_mid, DensityField(g, m_newton)) < 2e-3
    assert np.max(np.abs(stat.mu_bar[0] - m_newton)) < 5e-3


def test_stationary_anchor_gap_small():
    g = grid32()
    spec = spec_of(g)
    stat = estimate_stationary(spec, 0.5, t_ladder=(4.0,), p=picard())
    assert stat.anchor_gap <= 1e-3


def test_lambda_flat_all_methods():
    g = grid32()
    c0 = 0.7
    spec = CouplingSpec(a=ValueField(g, np.full(32, c0)), lam=(), b=zero_field(g), mu=())
    p = picard()
    lams = {
        "hd": estimate_lambda(spec, 0.0, "horizon_difference", p=p, t_pair=(6.0, 8.0)).lambda_hat,
        "disc": estimate_lambda(spec, 0.0, "discounted", p=p, delta_grid=(0.1,),
                                caps=DiscountCaps(cap_t=150.0)).lambda_hat,
        "stat": estimate_lambda(spec, 0.0, "stationary_formula", p=p,
                                stationary=estimate_stationary(
                                    spec, 0.0, t_ladder=(2.0, 3.0), p=p)).lambda_hat,
    }
    for name, lam in lams.items():
        assert abs(lam - c0) < 2e-3, (name, lam)


def test_lambda_zero_data_zero():
    g = grid32()
    spec = CouplingSpec(a=zero_field(g), lam=(), b=zero_field(g), mu=())
    p = picard()
    assert estimate_lambda(spec, 0.0, "horizon_difference", p=p, t_pair=(2.0, 3.0)).lambda_hat == pytest.approx(0.0, abs=1e-12)
    assert estimate_lambda(spec, 0.0, "discounted", p=p, delta_grid=(0.2,),
                           caps=DiscountCaps(cap_t=10.0)).lambda_hat == pytest.approx(0.0, abs=1e-12)


def test_lambda_matches_newton_oracle():
    g = grid32()
    spec = spec_of(g, lam=())
    lam_hd = estimate_lambda(spec, 0.0, "horizon_difference", p=picard(), t_pair=(6.0, 8.0)).lambda_hat
    _, _, lam_newton = stationary_newton(32, spec.a.values)
    assert abs(lam_hd - lam_newton) < 5e-3


def test_unknown_method_rejected():
    g = grid32()
    with pytest.raises(ValueError, match="method"):
        estimate_lambda(spec_of(g), 0.0, "bogus")


def test_master_zero_data():
    g = grid32()
    spec = CouplingSpec(a=zero_field(g), lam=(), b=zero_field(g), mu=())
    u, _ = evaluate_master(spec, 0.0, 2.0, g.uniform_density(), picard())
    assert np.max(np.abs(u.values)) == 0.0


def test_master_horizon_consistency_and_time_regularity():
    g = grid32()
    spec = spec_of(g)
    p = picard()
    m = g.uniform_density()
    lam = estimate_lambda(spec, 0.0, "horizon_difference", p=p, t_pair=(5.0, 6.0)).lambda_hat
    horizons = [4.0, 4.25, 4.5, 5.0]
    vals = {T: evaluate_master(spec, 0.0, T, m, p)[0].values for T in horizons}
    # increment consistency: U(-T-h) - U(-T) ~ lambda*h for large T
    for T, h_step in [(4.0, 0.25), (4.25, 0.25), (4.0, 0.5)]:
        gap = np.max(np.abs(vals[T + h_step] - vals[T] - lam * h_step))
        assert gap < 5e-3 * h_step + 1e-6
    # time regularity |U(-T-h) - U(-T)| <= C sqrt(h) + |lam| h, C calibrated
    # on the smallest step
    c_cal = (np.max(np.abs(vals[4.25] - vals[4.0])) - abs(lam) * 0.25) / np.sqrt(0.25)
    c_cal = max(c_cal, 1e-12) * 3.0
    for T, h_step in [(4.25, 0.25), (4.0, 0.5), (4.0, 1.0)]:
        diff = np.max(np.abs(vals[min(T + h_step, 5.0)] - vals[T]))
        assert diff <= c_cal * np.sqrt(h_step) + abs(lam) * h_step + 1e-9


def test_corrector_zero_data():
    g = grid32()
    spec = CouplingSpec(a=zero_field(g), lam=(), b=zero_field(g), mu=())
    est = estimate_corrector(spec, 0.0, g.uniform_density(), t_ladder=(1.0, 2.0),
                             lambda_hat=0.0, p=picard())
    assert np.max(np.abs(est.chi.values)) < 1e-12
    assert abs(est.c_hat) < 1e-12


def test_corrector_gaps_stabilize():
    g = grid32()
    spec = spec_of(g)
    est = estimate_corrector(spec, 0.0, g.uniform_density(), t_ladder=(1.0, 2.0, 4.0),
                             lambda_hat=0.0, p=picard())
    gaps = [est.gaps[T] for T in sorted(est.gaps)]
    assert all(g2 <= g1 + 1e-4 for g1, g2 in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4


def test_corrector_monotonicity():
    g = grid32()
    spec = spec_of(g, mu=(0.0, 0.5))
    p = picard()
    bump = np.exp(1.5 * np.cos(2 * np.pi * (g.nodes - 0.4)))
    m1 = DensityField(g, bump / (g.h * bump.sum()))
    m2 = g.uniform_density()
    est1 = estimate_corrector(spec, 0.0, m1, t_ladder=(3.0,), lambda_hat=0.0, p=p)
    est2 = estimate_corrector(spec, 0.0, m2, t_ladder=(3.0,), lambda_hat=0.0, p=p)
    pairing = g.h * np.sum((est1.chi.values - est2.chi.values) * (m1.values - m2.values))
    assert pairing >= -1e-6


def test_probe_zero_data():
    g = grid32()
    spec = CouplingSpec(a=zero_field(g), lam=(), b=zero_field(g), mu=())
    rep = corollary_probe(spec, 0.0, g.uniform_density(), t_grid=(0.0, 0.5),
                          t_ladder=(1.0, 2.0), t_ref=2.0, lambda_hat=0.0, p=picard())
    assert all(gap < 1e-10 for gap in rep["gaps"].values())


def test_probe_sigma0_single_leaf():
    g = grid32()
    spec = spec_of(g)
    rep = corollary_probe(spec, 0.0, g.uniform_density(), t_grid=(0.0, 0.5),
                          t_ladder=(2.0,), t_ref=3.0, p=picard())
    assert len(rep["per_leaf"][2.0]) == 2  # one node per t-grid point
    assert all(np.isfinite(r["gap"]) for r in rep["per_leaf"][2.0])


def test_lambda_invariant_to_anchor_and_step():
    g = grid32()
    spec = spec_of(g)
    p = picard(tol=1e-9, dt=4e-3)
    bumpy = np.exp(2.0 * np.cos(2 * np.pi * (g.nodes - 0.3)))
    m_b = DensityField(g, bumpy / (g.h * bumpy.sum()))
    lam_u = estimate_lambda(spec, 0.0, "horizon_difference", p=p, t_pair=(5.0, 7.0),
                            m0=g.uniform_density()).lambda_hat
    lam_b = estimate_lambda(spec, 0.0, "horizon_difference", p=p, t_pair=(5.0, 7.0),
                            m0=m_b).lambda_hat
    assert abs(lam_u - lam_b) < 1e-6
    lam_fine = estimate_lambda(spec, 0.0, "horizon_difference",
                               p=picard(tol=1e-9, dt=2e-3), t_pair=(5.0, 7.0),
                               m0=g.uniform_density()).lambda_hat
    assert abs(lam_u - lam_fine) < 1e-4


def test_corrector_independent_of_lambda_hat():
    # normalization at (x_ref, m_ref) removes the linear growth entirely
    g = grid32()
    spec = spec_of(g)
    p = picard()
    a = estimate_corrector(spec, 0.0, g.uniform_density(), t_ladder=(2.0,),
                           lambda_hat=0.0, p=p)
    b = estimate_corrector(spec, 0.0, g.uniform_density(), t_ladder=(2.0,),
                           lambda_hat=123.0, p=p)
    assert np.array_equal(a.chi.values, b.chi.values)
