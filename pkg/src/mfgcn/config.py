"""Experiment configuration: TOML parsing, validation, presets, artifact I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np

from .core import SolveParams
from .couplings import CouplingSpec
from .noise import MAX_EPOCHS
from .torus import DensityField, Grid, ValueField


class ConfigError(ValueError):
    """Malformed or invalid experiment configuration."""


_SCHEMA = {
    "grid": {"n"},
    "noise": {"sigma", "epochs", "fine_steps"},
    "coupling": {"f", "g"},
    "coupling.f": {"potential", "kernel_eigs"},
    "coupling.g": {"potential", "kernel_eigs"},
    "solver": {"dt", "tol", "max_iters", "damping", "cfl_factor"},
    "horizon": {"T", "t_ladder", "t_pair"},
    "initial": {"m0", "anchors"},
    "discount": {"delta_grid", "cap_t", "epoch_len"},
    "linearize": {"y_cell", "epsilons"},
    "probe": {"t_grid", "t_ladder", "t_ref"},
    "run": {"seed", "out_dir"},
}

DEFAULTS = {
    "noise": {"sigma": 0.5, "epochs": 4},
    "solver": {"dt": 2e-3, "tol": 1e-7, "max_iters": 400,
               "damping": "fictitious-play", "cfl_factor": 0.5},
    "horizon": {"T": 2.0, "t_ladder": [4.0, 6.0, 8.0], "t_pair": [6.0, 8.0]},
    "initial": {"m0": "uniform", "anchors": ["uniform", "bump"]},
    "discount": {"delta_grid": [0.2, 0.1, 0.05], "cap_t": 16.0, "epoch_len": 2.0},
    "linearize": {"y_cell": 8, "epsilons": [0.04, 0.02, 0.01]},
    "probe": {"t_grid": [0.0, 0.5, 1.0, 1.5, 2.0], "t_ladder": [3.0, 6.0], "t_ref": 5.0},
    "run": {"seed": 0, "out_dir": "runs"},
}


def resolve_potential(spec, grid: Grid) -> np.ndarray:
    """Potential presets: zero, constant:<v>, cosine:<amp>[:<k>], sine:<amp>[:<k>], or samples."""
    if isinstance(spec, list):
        arr = np.asarray(spec, dtype=float)
        if arr.shape != (grid.n,):
            raise ConfigError(f"inline potential has {len(arr)} samples, grid expects {grid.n}")
        return arr
    if not isinstance(spec, str):
        raise ConfigError(f"potential must be a preset string or sample list, got {spec!r}")
    parts = spec.split(":")
    name = parts[0]
    if name == "zero":
        return np.zeros(grid.n)
    if name == "constant":
        return np.full(grid.n, float(parts[1]))
    if name in ("cosine", "sine"):
        amp = float(parts[1]) if len(parts) > 1 else 1.0
        k = int(parts[2]) if len(parts) > 2 else 1
        fn = np.cos if name == "cosine" else np.sin
        return amp * fn(2.0 * np.pi * k * grid.nodes)
    raise ConfigError(f"unknown potential preset {name!r}")


def resolve_density(spec, grid: Grid) -> DensityField:
    """Density presets: uniform, bump[:<kappa>[:<x0>]], or inline samples."""
    if isinstance(spec, list):
        arr = np.asarray(spec, dtype=float)
        if arr.shape != (grid.n,):
            raise ConfigError(f"inline density has {len(arr)} samples, grid expects {grid.n}")
        if arr.min() < 0:
            raise ConfigError("inline density has negative samples")
        return DensityField(grid, arr / (grid.h * arr.sum()))
    if not isinstance(spec, str):
        raise ConfigError(f"density must be a preset string or sample list, got {spec!r}")
    parts = spec.split(":")
    if parts[0] == "uniform":
        return grid.uniform_density()
    if parts[0] == "bump":
        kappa = float(parts[1]) if len(parts) > 1 else 2.0
        x0 = float(parts[2]) if len(parts) > 2 else 0.3
        v = np.exp(kappa * np.cos(2.0 * np.pi * (grid.nodes - x0)))
        return DensityField(grid, v / (grid.h * v.sum()))
    raise ConfigError(f"unknown density preset {parts[0]!r}")


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    out_dir: str

    def __post_init__(self):
        self._grid = Grid(int(self.raw["grid"]["n"]))

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def sigma(self) -> float:
        return float(self.raw["noise"]["sigma"])

    @property
    def epochs(self) -> int:
        return int(self.raw["noise"]["epochs"])

    @property
    def fine_steps(self):
        v = self.raw["noise"].get("fine_steps")
        return None if v is None else int(v)

    def coupling(self) -> CouplingSpec:
        g = self.grid
        f_cfg = self.raw["coupling"]["f"]
        g_cfg = self.raw["coupling"]["g"]
        return CouplingSpec(
            a=ValueField(g, resolve_potential(f_cfg["potential"], g)),
            lam=tuple(float(v) for v in f_cfg["kernel_eigs"]),
            b=ValueField(g, resolve_potential(g_cfg["potential"], g)),
            mu=tuple(float(v) for v in g_cfg["kernel_eigs"]),
        )

    def solver_params(self) -> SolveParams:
        s = self.raw["solver"]
        damping = s["damping"]
        theta = 1.0
        if damping.startswith("picard"):
            parts = damping.split(":")
            theta = float(parts[1]) if len(parts) > 1 else 1.0
            damping = "picard"
        elif damping in ("fictitious-play", "fictitious_play"):
            damping = "fictitious_play"
        else:
            raise ConfigError(f"unknown damping rule {s['damping']!r}")
        return SolveParams(dt=float(s["dt"]), tol=float(s["tol"]),
                           max_iters=int(s["max_iters"]), damping=damping, theta=theta,
                           cfl_factor=float(s["cfl_factor"]))

    def m0(self) -> DensityField:
        return resolve_density(self.raw["initial"]["m0"], self.grid)

    def anchors(self) -> tuple[DensityField, DensityField]:
        specs = self.raw["initial"]["anchors"]
        if len(specs) != 2:
            raise ConfigError("initial.anchors needs exactly two entries")
        return resolve_density(specs[0], self.grid), resolve_density(specs[1], self.grid)

    def horizon(self) -> float:
        return float(self.raw["horizon"]["T"])

    def config_hash(self) -> str:
        canon = json.dumps({"raw": self.raw, "seed": self.seed}, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _validate_section(name: str, table: dict):
    known = _SCHEMA.get(name)
    if known is None:
        raise ConfigError(f"unknown config section [{name}]")
    for key, val in table.items():
        if isinstance(val, dict):
            _validate_section(f"{name}.{key}", val)
        elif key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")


def parse_config(text: str, seed: int | None = None, out_dir: str | None = None) -> ExperimentConfig:
    """Parse and validate a TOML experiment config, filling documented defaults."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    for section, table in data.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {section!r} must be a section")
        _validate_section(section, table)
    if "grid" not in data or "n" not in data["grid"]:
        raise ConfigError("config must set grid.n")
    merged: dict = {}
    for section, defaults in DEFAULTS.items():
        merged[section] = dict(defaults)
        merged[section].update(data.get(section, {}))
    merged["grid"] = dict(data["grid"])
    coupling = data.get("coupling", {})
    merged["coupling"] = {
        "f": {"potential": "zero", "kernel_eigs": []},
        "g": {"potential": "zero", "kernel_eigs": []},
    }
    for side in ("f", "g"):
        merged["coupling"][side].update(coupling.get(side, {}))

    n = int(merged["grid"]["n"])
    if n < 8:
        raise ConfigError("grid.n must be >= 8")
    if int(merged["noise"]["epochs"]) > MAX_EPOCHS:
        raise ConfigError(f"noise.epochs {merged['noise']['epochs']} exceeds tree cap {MAX_EPOCHS}")
    if float(merged["noise"]["sigma"]) < 0:
        raise ConfigError("noise.sigma must be >= 0")
    for side in ("f", "g"):
        eigs = merged["coupling"][side]["kernel_eigs"]
        if any(float(v) < 0 for v in eigs):
            raise ConfigError(
                f"coupling.{side}.kernel_eigs must be nonnegative: negative eigenvalues "
                "break Lasry-Lions monotonicity"
            )
        if eigs and len(eigs) - 1 > n // 4:
            raise ConfigError(f"coupling.{side}.kernel_eigs cutoff exceeds n/4")

    run = merged["run"]
    cfg = ExperimentConfig(
        raw=merged,
        seed=int(seed if seed is not None else run["seed"]),
        out_dir=str(out_dir if out_dir is not None else run["out_dir"]),
    )
    cfg.coupling()       # eager validation of potentials / eigenvalues
    cfg.solver_params()
    cfg.m0()
    return cfg


def load_config(path, seed=None, out_dir=None) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), seed=seed, out_dir=out_dir)


# ---------------------------------------------------------------------------
# artifacts


def write_series(path, series, config_hash: str) -> Path:
    """CSV artifact: `# config_hash=...` header then t,value rows, 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config_hash}", "t,value"]
    for t, v in series:
        lines.append(f"{t:.17g},{v:.17g}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_series(path) -> list[tuple[float, float]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line == "t,value" or not line:
            continue
        t_str, v_str = line.split(",")
        out.append((float(t_str), float(v_str)))
    return out


def write_ndjson(path, records, config_hash: str) -> Path:
    """One JSON object per line; every record carries task and metrics keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        if "task" not in rec or "metrics" not in rec:
            raise ValueError("NDJSON records need 'task' and 'metrics' keys")
        rec = dict(rec)
        rec["config_hash"] = config_hash
        lines.append(json.dumps(rec, sort_keys=True, default=_json_default))
    path.write_text("\n".join(lines) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


@dataclass
class RunRecord:
    config_hash: str
    task: str
    wall_time: float
    outputs: list = field(default_factory=list)
    residual_traces: dict = field(default_factory=dict)
    status: str = "ok"
    metrics: dict = field(default_factory=dict)

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / f"run_{self.task}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "config_hash": self.config_hash,
            "task": self.task,
            "wall_time": self.wall_time,
            "outputs": [str(p) for p in self.outputs],
            "residual_traces": self.residual_traces,
            "status": self.status,
            "metrics": self.metrics,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
        return path
