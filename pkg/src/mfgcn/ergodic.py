"""Stationary regime, ergodic constant estimators, corrector, master-equation probes.

Three independent routes to the ergodic constant:

  horizon_difference   (mean_x u^{T2}_0 - mean_x u^{T1}_0) / (T2 - T1),
  discounted           mean_x delta * u^delta_0 for small delta,
  stationary_formula   E[ int f(x, mu_bar) dx - int 0.5|V_bar|^2 dx ],

the last evaluated with the scheme's own Godunov kinetic energy on the
midpoint fields of a horizon ladder.  The master map U(-T, x, m) is realized
as u_0 of the horizon-T solve started from m, and the corrector as the
stabilized normalized limit U(-T, ., m) - U(-T, x_ref, m_ref).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import MFGTreeSolution, SolveParams, solve_mfg_tree, tree_for, fp_step_arr, _push_children
from .couplings import CouplingSpec, kernel_apply
from .discounted import DiscountCaps, solve_discounted
from .noise import NoiseTree, expect_at_depth
from .torus import (
    DensityField,
    ValueField,
    diffusion_inverse,
    grad_minus,
    grad_plus,
    w1_circle,
)

log = logging.getLogger(__name__)


def godunov_energy_density(u: np.ndarray, h: float) -> np.ndarray:
    """Kinetic energy density 0.5[min(D+u,0)^2 + max(D-u,0)^2] (scheme-consistent)."""
    return 0.5 * (np.minimum(grad_plus(u, h), 0.0) ** 2 + np.maximum(grad_minus(u, h), 0.0) ** 2)


def slice_at(sol: MFGTreeSolution, t: float) -> tuple[int, int]:
    """(level, index) of the sample time nearest t; boundaries resolve post-shock."""
    tree = sol.tree
    d, dt, S = tree.epoch_len, tree.dt, tree.fine_steps
    e = min(int(t / d + 1e-9), tree.n_levels - 1)
    i = int(round((t - e * d) / dt))
    i = max(0, min(S, i))
    if i == S and e + 1 < tree.n_levels:
        e, i = e + 1, 0
    return e, i


@dataclass
class StationaryEstimate:
    mu_bar: np.ndarray   # (nodes, n) midpoint densities, largest accepted horizon
    u_mid: np.ndarray    # (nodes, n) midpoint value slices
    v_bar: np.ndarray    # (nodes, n) centered gradients of u_mid
    depth: int
    horizon: float
    t_mid: float
    anchor_gap: float
    successive_gap: float
    accepted: bool
    ladder: list = field(default_factory=list)

    def mean_density(self, tree_prob: float) -> np.ndarray:
        return tree_prob * self.mu_bar.sum(axis=0)


def estimate_stationary(
    c: CouplingSpec,
    sigma: float,
    t_ladder=(4.0, 6.0, 8.0),
    anchors: Optional[tuple[DensityField, DensityField]] = None,
    p: Optional[SolveParams] = None,
    epochs_per_unit: float = 1.0,
    tol: float = 1e-3,
) -> StationaryEstimate:
    """Midpoint-window construction of the stationary regime.

    Solves the finite-horizon problem for each ladder horizon and both anchor
    initial conditions; accepts once the anchors' midpoint densities agree in
    E[d1] and successive horizons' mean midpoint densities stabilize.
    """
    grid = c.grid
    if p is None:
        p = SolveParams()
    if anchors is None:
        b = np.exp(2.0 * np.cos(2.0 * np.pi * (grid.nodes - 0.3)))
        anchors = (grid.uniform_density(), DensityField(grid, b / (grid.h * b.sum())))
    m0_a, m0_b = anchors
    prev_mean = None
    ladder_info = []
    result = None
    for horizon in sorted(t_ladder):
        epochs = 0 if sigma == 0.0 else max(1, round(horizon * epochs_per_unit))
        tree = tree_for(sigma, horizon, epochs, p.dt)
        sol_a = solve_mfg_tree(c, tree, m0_a, p=p)
        sol_b = solve_mfg_tree(c, tree, m0_b, p=p)
        t_mid = horizon / 2.0
        e, i = slice_at(sol_a, t_mid)
        mu_a, mu_b = sol_a.m_levels[e][:, i], sol_b.m_levels[e][:, i]
        prob = tree.node_prob(e)
        h = grid.h
        d1 = w1_circle(h * mu_a, h * mu_b, h)
        anchor_gap = float(expect_at_depth(tree, e, d1))
        mean_mu = prob * mu_a.sum(axis=0)
        succ = float("inf") if prev_mean is None else float(
            w1_circle(h * mean_mu, h * prev_mean, h)
        )
        prev_mean = mean_mu
        ladder_info.append({"horizon": horizon, "anchor_gap": anchor_gap,
                            "successive_gap": succ, "converged": sol_a.converged and sol_b.converged})
        result = StationaryEstimate(
            mu_bar=mu_a.copy(), u_mid=sol_a.u_levels[e][:, i].copy(),
            v_bar=(np.roll(sol_a.u_levels[e][:, i], -1, axis=-1)
                   - np.roll(sol_a.u_levels[e][:, i], 1, axis=-1)) / (2 * h),
            depth=e, horizon=horizon, t_mid=t_mid,
            anchor_gap=anchor_gap, successive_gap=succ,
            accepted=anchor_gap <= tol and (succ <= tol or succ == float("inf")),
            ladder=ladder_info,
        )
        if result.accepted and succ <= tol:
            return result
    if result is not None and not result.accepted:
        log.warning("stationary ladder exhausted without stabilization (anchor gap %.3e)",
                    result.anchor_gap)
    return result


@dataclass
class ErgodicEstimate:
    lambda_hat: float
    method: str
    diagnostics: dict


def estimate_lambda(
    c: CouplingSpec,
    sigma: float,
    method: str,
    p: Optional[SolveParams] = None,
    t_pair=(6.0, 8.0),
    delta_grid=(0.2, 0.1, 0.05),
    caps: Optional[DiscountCaps] = None,
    stationary: Optional[StationaryEstimate] = None,
    m0: Optional[DensityField] = None,
    epochs_per_unit: float = 1.0,
) -> ErgodicEstimate:
    """Ergodic constant by one of the three estimators."""
    grid = c.grid
    h = grid.h
    if p is None:
        p = SolveParams()
    if m0 is None:
        m0 = grid.uniform_density()

    if method == "horizon_difference":
        t1, t2 = sorted(t_pair)
        means = {}
        for horizon in (t1, t2):
            epochs = 0 if sigma == 0.0 else max(1, round(horizon * epochs_per_unit))
            tree = tree_for(sigma, horizon, epochs, p.dt)
            sol = solve_mfg_tree(c, tree, m0, p=p)
            means[horizon] = h * float(sol.u0().sum())
        lam = (means[t2] - means[t1]) / (t2 - t1)
        return ErgodicEstimate(lam, method, {"u0_means": means, "t_pair": (t1, t2)})

    if method == "discounted":
        per_delta = {}
        for delta in sorted(delta_grid, reverse=True):
            ds = solve_discounted(c, sigma, delta, m0, p=p, caps=caps)
            per_delta[delta] = {
                "lambda": h * float(ds.delta_u0().sum()),
                "delta_u0": ds.delta_u0(),
                "t_max": ds.t_max,
                "capped": ds.capped,
                "truncation_bound": ds.truncation_error_bound,
            }
        smallest = min(per_delta)
        return ErgodicEstimate(per_delta[smallest]["lambda"], method,
                               {"per_delta": per_delta, "delta_used": smallest})

    if method == "stationary_formula":
        if stationary is None:
            stationary = estimate_stationary(c, sigma, p=p, epochs_per_unit=epochs_per_unit)
        mu, u_mid = stationary.mu_bar, stationary.u_mid
        f_vals = c.a.values + kernel_apply(c.lam, mu, h)
        pay = h * (f_vals - godunov_energy_density(u_mid, h)).sum(axis=-1)
        prob = 0.5**stationary.depth
        lam = float(prob * pay.sum())
        return ErgodicEstimate(lam, method, {
            "horizon": stationary.horizon, "depth": stationary.depth,
            "anchor_gap": stationary.anchor_gap,
        })

    raise ValueError(f"unknown method {method!r}")


def evaluate_master(
    c: CouplingSpec,
    sigma: float,
    horizon: float,
    m: DensityField,
    p: Optional[SolveParams] = None,
    epochs_per_unit: float = 1.0,
    warm_start: Optional[MFGTreeSolution] = None,
) -> tuple[ValueField, MFGTreeSolution]:
    """U(-T, ., m): value at time 0 of the horizon-T solve started from m."""
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    if p is None:
        p = SolveParams()
    epochs = 0 if sigma == 0.0 else max(1, round(horizon * epochs_per_unit))
    tree = tree_for(sigma, horizon, epochs, p.dt)
    sol = solve_mfg_tree(c, tree, m, p=p, warm_start=warm_start)
    return ValueField(c.grid, sol.u0()), sol


@dataclass
class CorrectorEstimate:
    chi: ValueField          # normalized corrector at the largest ladder horizon
    gaps: dict               # successive-horizon sup gaps
    c_hat: float             # reported additive constant (no reference value claimed)
    horizons: tuple
    x_ref_cell: int


def estimate_corrector(
    c: CouplingSpec,
    sigma: float,
    m: DensityField,
    t_ladder=(2.0, 4.0, 6.0),
    lambda_hat: float = 0.0,
    p: Optional[SolveParams] = None,
    x_ref_cell: int = 0,
    m_ref: Optional[DensityField] = None,
    epochs_per_unit: float = 1.0,
) -> CorrectorEstimate:
    """chi(x, m) from the ladder limit of U(-T, x, m) - U(-T, x_ref, m_ref).

    Normalizing at (x_ref, m_ref) removes both lambda*T and the additive
    constant, so the output only uses lambda_hat for the reported c_hat.
    """
    if m_ref is None:
        m_ref = c.grid.uniform_density()
    horizons = tuple(sorted(t_ladder))
    chi_prev = None
    gaps = {}
    chi = None
    c_hat = float("nan")
    warm_m = warm_ref = None
    for horizon in horizons:
        u_m, warm_m = evaluate_master(c, sigma, horizon, m, p, epochs_per_unit, warm_m)
        u_ref, warm_ref = evaluate_master(c, sigma, horizon, m_ref, p, epochs_per_unit, warm_ref)
        chi_vals = u_m.values - u_ref.values[x_ref_cell]
        if chi_prev is not None:
            gaps[horizon] = float(np.max(np.abs(chi_vals - chi_prev)))
        chi_prev = chi_vals
        chi = ValueField(c.grid, chi_vals)
        c_hat = float(u_ref.values[x_ref_cell] - lambda_hat * horizon)
    if gaps:
        worst = max(gaps.values())
        if worst > 1e-3:
            log.warning("corrector ladder gaps not stabilized: %.3e", worst)
    return CorrectorEstimate(chi=chi, gaps=gaps, c_hat=c_hat,
                             horizons=horizons, x_ref_cell=x_ref_cell)


def mckean_vlasov_flow(
    c: CouplingSpec,
    sigma: float,
    m0: DensityField,
    t_max: float,
    t_ref: float,
    p: Optional[SolveParams] = None,
    refresh: float = 0.5,
) -> dict:
    """Forward tree flow driven by D_x chi, chi tabulated on the fly.

    The drift field on each node is U(-t_ref, ., m_t) refreshed every
    `refresh` time units (frozen in between); returns the per-node densities
    and the tabulated value fields at the refresh times.
    """
    if p is None:
        p = SolveParams()
    grid = c.grid
    n, h = grid.n, grid.h
    epochs = 0 if sigma == 0.0 else max(1, round(t_max))
    tree = tree_for(sigma, t_max, epochs, p.dt)
    S, dt, s_shock = tree.fine_steps, tree.dt, tree.shock
    inv = diffusion_inverse(n, dt)
    refresh_every = max(1, int(round(refresh / dt)))
    levels = [np.zeros((2**e, S + 1, n)) for e in range(tree.n_levels)]
    levels[0][0, 0] = m0.values
    tabulated = {}  # (level, index_in_level, node) -> chi values
    warm = None
    for e in range(tree.n_levels):
        lvl = levels[e]
        n_nodes = lvl.shape[0]
        drift = np.zeros((n_nodes, n))
        for i in range(S):
            if i % refresh_every == 0:
                for nu in range(n_nodes):
                    m_now = DensityField(grid, np.maximum(lvl[nu, i], 0.0) /
                                         (h * np.maximum(lvl[nu, i], 0.0).sum()))
                    u_val, warm = evaluate_master(c, sigma, t_ref, m_now, p, warm_start=warm)
                    drift[nu] = u_val.values
                    tabulated[(e, i, nu)] = u_val.values.copy()
            lvl[:, i + 1] = fp_step_arr(lvl[:, i], drift, dt, h, inv)
        if e + 1 < tree.n_levels:
            levels[e + 1][:, 0] = _push_children(lvl[:, S], s_shock, h, "physical")
    return {"tree": tree, "levels": levels, "tabulated": tabulated, "t_ref": t_ref}


def corollary_probe(
    c: CouplingSpec,
    sigma: float,
    m0: DensityField,
    t_grid=(0.0, 0.5, 1.0, 1.5, 2.0),
    t_ladder=(3.0, 6.0),
    t_ref: float = 5.0,
    lambda_hat: Optional[float] = None,
    p: Optional[SolveParams] = None,
) -> dict:
    """Long-time master-equation probe (per-leaf sup gaps along the chi-driven flow).

    For each ladder horizon T, measures over the t_grid and tree nodes

        gap_T = max |u^T_t(x) - lambda_hat*(T - t) - P_t(x)|,
        P_t(x) = U(-t_ref, x, mbar_t) - lambda_hat * t_ref,

    where mbar is the McKean-Vlasov flow driven by the tabulated corrector
    gradient.  Reports the gaps and the ratio between successive horizons.
    """
    if p is None:
        p = SolveParams()
    if lambda_hat is None:
        t_hi = max(t_ladder)
        t_lo = t_hi - 2.0 if t_hi > 2.0 else t_hi / 2.0
        lam_est = estimate_lambda(c, sigma, "horizon_difference", p=p,
                                  t_pair=(t_lo, t_hi), m0=m0)
        lambda_hat = lam_est.lambda_hat
    # one epoch beyond the grid so every grid time has a post-shock slice,
    # matching the node pairing with the u^T solves (equal epoch length)
    t_max = max(t_grid) + 1.0
    refresh = min(0.5, max(t_grid[1] - t_grid[0], p.dt)) if len(t_grid) > 1 else 0.5
    flow = mckean_vlasov_flow(c, sigma, m0, t_max, t_ref, p, refresh)
    flow_tree = flow["tree"]
    gaps = {}
    per_leaf = {}
    grid = c.grid
    for horizon in sorted(t_ladder):
        epochs = 0 if sigma == 0.0 else max(1, round(horizon))
        tree = tree_for(sigma, horizon, epochs, p.dt)
        sol = solve_mfg_tree(c, tree, m0, p=p)
        worst = 0.0
        leaf_rows = []
        warm = None
        for t in t_grid:
            e_f, i_f = _flow_slice(flow_tree, t)
            e_s, i_s = slice_at(sol, t)
            n_nodes = flow["levels"][e_f].shape[0]
            for nu in range(n_nodes):
                if (e_f, i_f, nu) in flow["tabulated"]:
                    u_pred_vals = flow["tabulated"][(e_f, i_f, nu)]
                else:
                    m_slice = np.maximum(flow["levels"][e_f][nu, i_f], 0.0)
                    m_t = DensityField(grid, m_slice / (grid.h * m_slice.sum()))
                    u_val, warm = evaluate_master(c, sigma, t_ref, m_t, p, warm_start=warm)
                    u_pred_vals = u_val.values
                pred = u_pred_vals - lambda_hat * t_ref
                u_t = sol.u_levels[e_s][_match_node(e_s, e_f, nu), i_s]
                gap = float(np.max(np.abs(u_t - lambda_hat * (horizon - t) - pred)))
                worst = max(worst, gap)
                leaf_rows.append({"t": t, "node": nu, "gap": gap})
        gaps[horizon] = worst
        per_leaf[horizon] = leaf_rows
    hs = sorted(gaps)
    ratios = {(hs[i], hs[i + 1]): gaps[hs[i + 1]] / gaps[hs[i]] if gaps[hs[i]] > 0 else float("nan")
              for i in range(len(hs) - 1)}
    return {"gaps": gaps, "ratios": ratios, "per_leaf": per_leaf,
            "lambda_hat": lambda_hat, "t_ref": t_ref}


def _flow_slice(tree: NoiseTree, t: float) -> tuple[int, int]:
    d, dt, S = tree.epoch_len, tree.dt, tree.fine_steps
    e = min(int(t / d + 1e-9), tree.n_levels - 1)
    i = int(round((t - e * d) / dt))
    i = max(0, min(S, i))
    if i == S and e + 1 < tree.n_levels:
        e, i = e + 1, 0
    return e, i


def _match_node(depth_sol: int, depth_flow: int, node_flow: int) -> int:
    """Node pairing between two trees with equal epoch length."""
    if depth_sol == depth_flow:
        return node_flow
    if depth_sol < depth_flow:
        return node_flow % (2**depth_sol)
    return node_flow  # flow coarser: same prefix word
