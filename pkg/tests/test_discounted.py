"""Discounted solver tests: flat closed form, bounds, truncation bookkeeping."""

import numpy as np
import pytest

from mfgcn.core import SolveParams
from mfgcn.couplings import CouplingSpec
from mfgcn.diagnostics import fit_exponential_decay
from mfgcn.discounted import DiscountCaps, solve_discounted
from mfgcn.noise import expect_at_depth
from mfgcn.torus import DensityField, Grid, ValueField, w1_circle


def flat_spec(grid, c0):
    return CouplingSpec(a=ValueField(grid, np.full(grid.n, c0)), lam=(),
                        b=ValueField(grid, np.zeros(grid.n)), mu=())


def test_flat_running_cost_closed_form():
    # spatially flat data: the scheme reduces to the scalar recurrence
    # u_k = (1 - delta*dt) u_{k+1} + dt*c0, solvable in closed form
    g = Grid(32)
    c0 = 0.8
    delta = 0.3
    p = SolveParams(dt=2e-3, tol=1e-12, max_iters=50, damping="picard", theta=1.0)
    ds = solve_discounted(flat_spec(g, c0), 0.0, delta, g.uniform_density(), p=p,
                          caps=DiscountCaps(cap_t=10.0))
    tree = ds.base.tree
    k = tree.fine_steps  # root slice 0 is k steps from the terminal
    expected = c0 * ds.base.tree.dt * (1.0 - (1.0 - delta * tree.dt) ** k) / (delta * tree.dt)
    assert np.allclose(ds.base.u0(), expected, atol=1e-10)
    # and within the recorded truncation bound of the continuum limit c0/delta
    assert abs(delta * expected - c0) < delta * ds.truncation_error_bound + 5e-3


def test_zero_data_zero_solution():
    g = Grid(32)
    spec = CouplingSpec(a=ValueField(g, np.zeros(32)), lam=(),
                        b=ValueField(g, np.zeros(32)), mu=())
    ds = solve_discounted(spec, 0.0, 0.5, g.uniform_density(),
                          p=SolveParams(dt=4e-3, tol=1e-10), caps=DiscountCaps(cap_t=8.0))
    assert np.max(np.abs(ds.base.u_levels[0])) == 0.0


def test_delta_u_bounded_by_max_f():
    g = Grid(32)
    a = ValueField(g, 0.2 * np.cos(2 * np.pi * g.nodes))
    spec = CouplingSpec(a=a, lam=(0.0, 1.0), b=ValueField(g, np.zeros(32)), mu=())
    p = SolveParams(dt=4e-3, tol=1e-8, damping="picard", theta=1.0)
    for delta in (0.2, 0.05):
        ds = solve_discounted(spec, 0.0, delta, g.uniform_density(), p=p,
                              caps=DiscountCaps(cap_t=40.0))
        assert np.max(np.abs(ds.delta_u0())) <= spec.max_abs_f() + 1e-6


def test_truncation_flagging_and_bound():
    g = Grid(32)
    spec = flat_spec(g, 0.5)
    p = SolveParams(dt=4e-3, tol=1e-7, damping="picard", theta=1.0)
    ds = solve_discounted(spec, 0.0, 0.05, g.uniform_density(), p=p,
                          caps=DiscountCaps(cap_t=10.0))
    assert ds.capped  # ln(1e7)/0.05 = 322 >> 10
    assert ds.t_max == pytest.approx(10.0)
    assert ds.truncation_error_bound == pytest.approx(0.5 * np.exp(-0.5) / 0.05)


def test_invalid_delta_rejected():
    g = Grid(32)
    with pytest.raises(ValueError, match="discount"):
        solve_discounted(flat_spec(g, 0.1), 0.0, 0.0, g.uniform_density())


def test_contraction_between_initial_conditions():
    # E[d1(m_t(m0a), m_t(m0b))] decays exponentially (discounted turnpike)
    g = Grid(32)
    a = ValueField(g, 0.2 * np.cos(2 * np.pi * g.nodes))
    spec = CouplingSpec(a=a, lam=(0.0, 1.0), b=ValueField(g, np.zeros(32)), mu=())
    p = SolveParams(dt=4e-3, tol=1e-8, damping="picard", theta=1.0)
    caps = DiscountCaps(cap_t=2.0, epoch_len=1.0)
    bump = np.exp(2 * np.cos(2 * np.pi * (g.nodes - 0.3)))
    m0b = DensityField(g, bump / (g.h * bump.sum()))
    d1 = solve_discounted(spec, 0.5, 0.2, g.uniform_density(), p=p, caps=caps)
    d2 = solve_discounted(spec, 0.5, 0.2, m0b, p=p, caps=caps)
    tree = d1.base.tree
    times, dists = [], []
    for e, i, t in d1.base.sample_times():
        w = w1_circle(g.h * d1.base.m_levels[e][:, i], g.h * d2.base.m_levels[e][:, i], g.h)
        times.append(t)
        dists.append(float(expect_at_depth(tree, e, w)))
    fit = fit_exponential_decay(times, dists, window=(0.0, 0.4), floor=1e-12)
    assert fit.rate > 1.0
