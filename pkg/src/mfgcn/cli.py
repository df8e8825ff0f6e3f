"""Command-line entry point: experiment orchestration and artifact emission.

    mfgcn <task> --config cfg.toml [--out DIR] [--threads N] [--seed S]

Tasks: solve, turnpike, ergodic, discounted, linearize, corrector,
master-probe, check.  Exit codes: 0 ok, 2 config error, 3 solver
non-convergence, 4 acceptance failure (check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from .checks import run_property_suite
from .config import ConfigError, ExperimentConfig, RunRecord, load_config, write_ndjson, write_series
from .core import solve_mfg_tree, tree_for
from .diagnostics import turnpike_report
from .discounted import DiscountCaps, solve_discounted
from .ergodic import corollary_probe, estimate_corrector, estimate_lambda, estimate_stationary
from .linearized import derivative_check, dirac_direction

log = logging.getLogger(__name__)

TASKS = ("solve", "turnpike", "ergodic", "discounted", "linearize",
         "corrector", "master-probe", "check")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfgcn", description=__doc__)
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None, help="output directory (default: env MFGCN_OUT or config run.out_dir)")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker count; outputs are bit-identical for any value")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--y-cell", type=int, default=None,
                        help="linearize: cell of the Dirac perturbation direction")
    parser.add_argument("--epsilons", type=float, nargs="+", default=None,
                        help="linearize: finite-difference step sizes")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out or os.environ.get("MFGCN_OUT")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.y_cell is not None:
        cfg.raw["linearize"]["y_cell"] = args.y_cell
    if args.epsilons is not None:
        cfg.raw["linearize"]["epsilons"] = list(args.epsilons)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        record = _dispatch(args.task, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    record.wall_time = time.time() - t0
    record.save(out)
    _summary(record)
    if record.status == "check-failed":
        return 4
    if record.status != "ok":
        return 3
    return 0


def _summary(record: RunRecord):
    print(f"task          {record.task}")
    print(f"config hash   {record.config_hash}")
    print(f"status        {record.status}")
    print(f"wall time     {record.wall_time:.2f} s")
    for key, val in sorted(record.metrics.items()):
        if isinstance(val, float):
            print(f"{key:<22s}{val:.6g}")
        else:
            print(f"{key:<22s}{val}")
    for path in record.outputs:
        print(f"wrote         {path}")


def _dispatch(task: str, cfg: ExperimentConfig, out: Path) -> RunRecord:
    chash = cfg.config_hash()
    coupling = cfg.coupling()
    p = cfg.solver_params()
    rec = RunRecord(config_hash=chash, task=task, wall_time=0.0)

    if task == "solve":
        tree = tree_for(cfg.sigma, cfg.horizon(), cfg.epochs if cfg.sigma > 0 else 0,
                        p.dt, cfg.fine_steps)
        sol = solve_mfg_tree(coupling, tree, cfg.m0(), p=p)
        rec.status = "ok" if sol.converged else "no-convergence"
        rec.residual_traces["solve"] = sol.residuals
        rec.metrics = {
            "iterations": sol.iterations,
            "residual": sol.residuals[-1],
            "max_grad": sol.max_grad(),
            "u0_mean": cfg.grid.h * float(sol.u0().sum()),
        }
        rec.outputs.append(write_series(
            out / "residuals.csv", list(enumerate(sol.residuals)), chash))
        rec.outputs.append(write_series(
            out / "u0.csv", list(zip(cfg.grid.nodes, sol.u0())), chash))
        mean_term = tree.node_prob(tree.leaf_depth) * sol.m_term.sum(axis=0)
        rec.outputs.append(write_series(
            out / "m_terminal_mean.csv", list(zip(cfg.grid.nodes, mean_term)), chash))
        return rec

    if task == "turnpike":
        stat = estimate_stationary(coupling, cfg.sigma,
                                   t_ladder=cfg.raw["horizon"]["t_ladder"],
                                   anchors=cfg.anchors(), p=p)
        tree = tree_for(cfg.sigma, cfg.horizon(), cfg.epochs if cfg.sigma > 0 else 0, p.dt,
                        cfg.fine_steps)
        sol = solve_mfg_tree(coupling, tree, cfg.m0(), p=p)
        report = turnpike_report(sol, stat, p=p)
        rec.status = "ok" if sol.converged else "no-convergence"
        rec.metrics = {
            "anchor_gap": stat.anchor_gap,
            "rate": report["fit"].rate if report["fit"] else float("nan"),
            "r2": report["fit"].r2 if report["fit"] else float("nan"),
            "value_t1": report["value_t1"],
            "value_mid": report["value_mid"],
            "end_over_mid": report["end_over_mid"],
        }
        rec.outputs.append(write_series(out / "dist_m.csv",
                                        list(zip(report["times"], report["dist_m"])), chash))
        rec.outputs.append(write_series(out / "dist_du.csv",
                                        list(zip(report["times"], report["dist_du"])), chash))
        rec.outputs.append(write_ndjson(out / "turnpike.ndjson", [{
            "task": task, "metrics": rec.metrics}], chash))
        return rec

    if task == "ergodic":
        t_pair = tuple(cfg.raw["horizon"]["t_pair"])
        stat = estimate_stationary(coupling, cfg.sigma,
                                   t_ladder=cfg.raw["horizon"]["t_ladder"],
                                   anchors=cfg.anchors(), p=p)
        caps = DiscountCaps(cap_t=float(cfg.raw["discount"]["cap_t"]),
                            epoch_len=float(cfg.raw["discount"]["epoch_len"]))
        e_hd = estimate_lambda(coupling, cfg.sigma, "horizon_difference", p=p,
                               t_pair=t_pair, m0=cfg.m0())
        e_di = estimate_lambda(coupling, cfg.sigma, "discounted", p=p,
                               delta_grid=cfg.raw["discount"]["delta_grid"],
                               caps=caps, m0=cfg.m0())
        e_st = estimate_lambda(coupling, cfg.sigma, "stationary_formula", p=p, stationary=stat)
        lam = e_hd.lambda_hat
        rec.metrics = {
            "lambda_horizon_difference": e_hd.lambda_hat,
            "lambda_discounted": e_di.lambda_hat,
            "lambda_stationary_formula": e_st.lambda_hat,
            "cross_gap_discounted": abs(e_hd.lambda_hat - e_di.lambda_hat),
            "cross_gap_stationary": abs(e_hd.lambda_hat - e_st.lambda_hat),
            "cross_tol": 0.05 * (1.0 + abs(lam)),
        }
        rec.outputs.append(write_ndjson(out / "ergodic.ndjson", [
            {"task": task, "metrics": {"method": m, "lambda_hat": v}}
            for m, v in [("horizon_difference", e_hd.lambda_hat),
                         ("discounted", e_di.lambda_hat),
                         ("stationary_formula", e_st.lambda_hat)]
        ], chash))
        return rec

    if task == "discounted":
        caps = DiscountCaps(cap_t=float(cfg.raw["discount"]["cap_t"]),
                            epoch_len=float(cfg.raw["discount"]["epoch_len"]))
        rows = []
        series = []
        for delta in sorted(cfg.raw["discount"]["delta_grid"], reverse=True):
            ds = solve_discounted(coupling, cfg.sigma, float(delta), cfg.m0(), p=p, caps=caps)
            lam_d = cfg.grid.h * float(ds.delta_u0().sum())
            rows.append({"task": task, "metrics": {
                "delta": delta, "lambda": lam_d, "t_max": ds.t_max,
                "capped": ds.capped, "truncation_bound": ds.truncation_error_bound,
                "converged": ds.base.converged}})
            series.append((delta, lam_d))
            rec.status = "ok" if ds.base.converged else "no-convergence"
        rec.metrics = {f"lambda_delta_{d}": v for d, v in series}
        rec.outputs.append(write_ndjson(out / "discounted.ndjson", rows, chash))
        rec.outputs.append(write_series(out / "delta_lambda.csv", series, chash))
        return rec

    if task == "linearize":
        lin_cfg = cfg.raw["linearize"]
        tree = tree_for(cfg.sigma, cfg.horizon(), cfg.epochs if cfg.sigma > 0 else 0, p.dt,
                        cfg.fine_steps)
        rho0 = dirac_direction(cfg.grid.n, int(lin_cfg["y_cell"]))
        report = derivative_check(coupling, tree, cfg.m0(), rho0,
                                  lin_cfg["epsilons"], p=None)
        rec.metrics = {
            "slope": report["slope"],
            "z0_max": report["z0_max"],
            "rho0_dual_norm": report["rho0_dual_norm"],
            **{f"e_{eps}": err for eps, err in report["errors"].items()},
        }
        rec.status = "ok" if report["base_converged"] and report["lin_converged"] else "no-convergence"
        rec.outputs.append(write_ndjson(out / "linearize.ndjson",
                                        [{"task": task, "metrics": rec.metrics}], chash))
        return rec

    if task == "corrector":
        lam = estimate_lambda(coupling, cfg.sigma, "horizon_difference", p=p,
                              t_pair=tuple(cfg.raw["horizon"]["t_pair"]), m0=cfg.m0())
        est = estimate_corrector(coupling, cfg.sigma, cfg.m0(),
                                 t_ladder=cfg.raw["horizon"]["t_ladder"],
                                 lambda_hat=lam.lambda_hat, p=p)
        rec.metrics = {
            "c_hat": est.c_hat,
            "lambda_hat": lam.lambda_hat,
            **{f"gap_T{T}": g for T, g in est.gaps.items()},
        }
        rec.outputs.append(write_series(out / "chi.csv",
                                        list(zip(cfg.grid.nodes, est.chi.values)), chash))
        rec.outputs.append(write_ndjson(out / "corrector.ndjson",
                                        [{"task": task, "metrics": rec.metrics}], chash))
        return rec

    if task == "master-probe":
        probe_cfg = cfg.raw["probe"]
        report = corollary_probe(coupling, cfg.sigma, cfg.m0(),
                                 t_grid=tuple(probe_cfg["t_grid"]),
                                 t_ladder=tuple(probe_cfg["t_ladder"]),
                                 t_ref=float(probe_cfg["t_ref"]), p=p)
        rec.metrics = {
            "lambda_hat": report["lambda_hat"],
            **{f"gap_T{T}": g for T, g in report["gaps"].items()},
            **{f"ratio_{a}_{b}": r for (a, b), r in report["ratios"].items()},
        }
        rec.outputs.append(write_ndjson(out / "master_probe.ndjson",
                                        [{"task": task, "metrics": rec.metrics}], chash))
        return rec

    if task == "check":
        results = run_property_suite(cfg)
        n_pass = sum(r["passed"] for r in results)
        rec.metrics = {"passed": n_pass, "failed": len(results) - n_pass}
        rec.status = "ok" if n_pass == len(results) else "check-failed"
        for r in results:
            flag = "PASS" if r["passed"] else "FAIL"
            print(f"  [{flag}] {r['name']}: {r['detail']}")
        rec.outputs.append(write_ndjson(out / "check.ndjson", [
            {"task": task, "metrics": r} for r in results], chash))
        return rec

    raise ConfigError(f"unknown task {task!r}")


if __name__ == "__main__":
    sys.exit(main())
