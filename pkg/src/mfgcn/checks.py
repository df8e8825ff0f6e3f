"""Property suite behind the `check` CLI task: module invariants at config scale."""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .core import SolveParams, solve_mfg_tree, tree_for
from .couplings import monotonicity_certificate
from .diagnostics import lasry_lions_functional
from .linearized import solve_linearized
from .noise import build_tree, expect_at_depth
from .torus import (
    DensityField,
    ValueField,
    implicit_diffusion_step,
    laplacian,
    translate,
    wasserstein1,
)


def run_property_suite(cfg: ExperimentConfig) -> list[dict]:
    """Executes the module invariants; returns one record per check."""
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    h = grid.h
    results = []

    def check(name, passed, detail):
        results.append({"name": name, "passed": bool(passed), "detail": detail})

    u = rng.standard_normal(grid.n)
    lap_sum = abs(laplacian(ValueField(grid, u)).values.sum())
    check("laplacian telescoping", lap_sum < 1e-8 * grid.n / h, f"sum={lap_sum:.3e}")

    mode = np.cos(2 * np.pi * grid.nodes)
    lap_mode = laplacian(ValueField(grid, mode)).values
    eig_err = np.max(np.abs(lap_mode + grid.mode_rate(1) * mode))
    check("laplacian eigenmode", eig_err < 1e-8, f"err={eig_err:.3e}")

    bump = np.exp(np.cos(2 * np.pi * grid.nodes))
    m = DensityField(grid, bump / (h * bump.sum()))
    tr = translate(m, 0.137)
    check("translate mass exact", abs(tr.mass() - 1.0) < 1e-13, f"defect={abs(tr.mass()-1):.2e}")
    check("translate nonnegative", tr.values.min() >= -1e-14, f"min={tr.values.min():.2e}")

    out = implicit_diffusion_step(m, 1.0, 0.01)
    check("diffusion mass exact", abs(out.mass() - 1.0) < 1e-13, f"defect={abs(out.mass()-1):.2e}")
    const = implicit_diffusion_step(ValueField(grid, np.full(grid.n, 3.0)), 1.0, 0.01)
    check("diffusion constants", np.max(np.abs(const.values - 3.0)) < 1e-12, "")

    q = rng.random(grid.n) + 0.1
    m2 = DensityField(grid, q / (h * q.sum()))
    d_ab = wasserstein1(m, m2)
    check("w1 symmetric", abs(d_ab - wasserstein1(m2, m)) < 1e-14, f"d={d_ab:.3e}")
    check("w1 bounded by circle diameter", d_ab <= 0.5 + 1e-12, f"d={d_ab:.3e}")

    tree = build_tree(cfg.sigma, 2.0, min(cfg.epochs, 4), 4)
    for depth in range(tree.leaf_depth + 1):
        var = expect_at_depth(tree, depth, tree.depth_shifts(depth) ** 2)
        want = 2.0 * cfg.sigma * depth * tree.epoch_len
        if abs(var - want) > 1e-12 * (1 + want):
            check("tree moments", False, f"depth {depth}: {var} vs {want}")
            break
    else:
        check("tree moments", True, "variance 2*sigma*e*Delta at all depths")

    coupling = cfg.coupling()
    cert = monotonicity_certificate(coupling, trials=50, seed=cfg.seed)
    check("coupling monotone", cert["min_quadratic_form"] >= -1e-12,
          f"min quad form {cert['min_quadratic_form']:.3e}")

    p = SolveParams(dt=max(cfg.solver_params().dt, 4e-3), tol=1e-8, max_iters=300,
                    damping="picard", theta=1.0)
    small_tree = tree_for(cfg.sigma, 2.0, min(cfg.epochs, 2) if cfg.sigma > 0 else 0, p.dt)
    sol = solve_mfg_tree(coupling, small_tree, cfg.m0(), p=p)
    masses = [h * lvl.sum(axis=-1) for lvl in sol.m_levels]
    mass_err = max(float(np.max(np.abs(ms - 1.0))) for ms in masses)
    min_m = min(float(lvl.min()) for lvl in sol.m_levels)
    check("solve mass conservation", mass_err < 1e-9, f"err={mass_err:.2e}")
    check("solve nonnegativity", min_m >= -1e-13, f"min={min_m:.2e}")
    check("solve converged", sol.converged, f"iters={sol.iterations}")
    check("solve gradient bounded", sol.max_grad() < 10.0, f"max|Du|={sol.max_grad():.3f}")

    sol_b = solve_mfg_tree(coupling, small_tree, cfg.anchors()[1], p=p)
    ll = lasry_lions_functional(sol, sol_b)
    slack = 1e-6 * (1.0 + ll["magnitudes"]) + 10 * p.tol + 100 * ll["shock_slack"]
    check("lasry-lions identity", ll["identity_residual"] <= slack,
          f"residual={ll['identity_residual']:.2e} slack={slack:.2e}")

    rho0 = rng.standard_normal(grid.n)
    rho0 -= rho0.mean()
    lin = solve_linearized(sol, coupling, rho0, p=p)
    check("linearized centering", lin.centering_defect() < 1e-10,
          f"defect={lin.centering_defect():.2e}")

    return results
