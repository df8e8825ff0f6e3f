"""Monotone couplings f, g: potential plus PSD convolution kernel in Fourier form.

The realization is

    f(x, m) = a(x) + sum_k lam_k [c_k(m) cos(2 pi k x) + s_k(m) sin(2 pi k x)],

with c_k(m) = int cos(2 pi k y) m(dy) and s_k analogous, so the flat
derivative is the m-independent PSD kernel sum_k lam_k cos(2 pi k (x - y)).
Nonnegative kernel eigenvalues enforce Lasry-Lions monotonicity by
construction, and affinity in m makes the flat derivative exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .torus import DensityField, Grid, GridMismatchError, ValueField


@dataclass(frozen=True)
class CouplingSpec:
    """Running coupling (a, lam) and terminal coupling (b, mu).

    lam[k] / mu[k] are the kernel eigenvalues for Fourier mode k (k = 0
    included; mode 0 couples only to the total mass, which is constant 1).
    """

    a: ValueField
    lam: tuple[float, ...]
    b: ValueField
    mu: tuple[float, ...]
    allow_indefinite: bool = field(default=False, repr=False)  # test-only escape hatch

    def __post_init__(self):
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        if self.a.grid.n != self.b.grid.n:
            raise GridMismatchError("potentials a and b on different grids")
        kmax = max(len(self.lam), len(self.mu)) - 1
        if kmax > self.a.grid.n // 4:
            raise ValueError(f"mode cutoff {kmax} exceeds n/4 = {self.a.grid.n // 4}")
        if not self.allow_indefinite:
            for name, eigs in (("f", self.lam), ("g", self.mu)):
                if any(v < 0 for v in eigs):
                    raise ValueError(
                        f"kernel eigenvalues of {name} must be nonnegative for "
                        f"Lasry-Lions monotonicity, got {eigs}"
                    )

    @property
    def grid(self) -> Grid:
        return self.a.grid

    def lipschitz_f(self) -> float:
        """Lipschitz constant of m -> f(., m) w.r.t. d1: sum_k lam_k * 2 pi k."""
        return sum(l * 2.0 * np.pi * k for k, l in enumerate(self.lam))

    def max_abs_f(self) -> float:
        """Upper bound for |f| over all probability measures."""
        return float(np.max(np.abs(self.a.values))) + sum(abs(v) for v in self.lam)


def _mode_tables(n: int, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(n) / n
    k = np.arange(kmax + 1)[:, None]
    ang = 2.0 * np.pi * k * x[None, :]
    return np.cos(ang), np.sin(ang)


def kernel_apply(eigs: tuple[float, ...], rho: np.ndarray, h: float) -> np.ndarray:
    """Convolution kernel sum_k eig_k cos(2 pi k (x-y)) applied to a grid measure.

    rho holds cell values (density scale); quadrature is the midpoint rule,
    exact for resolvable modes.  Acts on the last axis.
    """
    n = rho.shape[-1]
    cos_t, sin_t = _mode_tables(n, len(eigs) - 1) if eigs else (None, None)
    out = np.zeros_like(rho, dtype=float)
    for k, lam_k in enumerate(eigs):
        if lam_k == 0.0:
            continue
        ck = h * rho @ cos_t[k]
        sk = h * rho @ sin_t[k]
        out += lam_k * (np.multiply.outer(ck, cos_t[k]) + np.multiply.outer(sk, sin_t[k]))
    return out


def _eval(potential: ValueField, eigs: tuple[float, ...], m: DensityField) -> ValueField:
    if potential.grid.n != m.grid.n:
        raise GridMismatchError("coupling and density on different grids")
    vals = potential.values + kernel_apply(eigs, m.values, m.grid.h)
    return ValueField(potential.grid, vals)


def eval_f(c: CouplingSpec, m: DensityField) -> ValueField:
    """Running cost f(., m)."""
    return _eval(c.a, c.lam, m)


def eval_g(c: CouplingSpec, m: DensityField) -> ValueField:
    """Terminal cost g(., m)."""
    return _eval(c.b, c.mu, m)


def apply_flat_derivative(c: CouplingSpec, rho: np.ndarray, which: str = "f") -> ValueField:
    """<delta f / delta m (., m), rho> for a centered signed grid measure rho.

    Independent of m for this coupling family; linear in rho.  Since f is
    affine in m the identity eval_f(c, m + eps*rho) - eval_f(c, m) =
    eps * apply_flat_derivative(c, rho) is exact.
    """
    rho = np.asarray(rho, dtype=float)
    grid = c.grid
    if rho.shape != (grid.n,):
        raise GridMismatchError("rho shape does not match coupling grid")
    if abs(grid.h * rho.sum()) > 1e-8:
        raise ValueError(f"rho must be centered, h*sum = {grid.h * rho.sum():g}")
    eigs = {"f": c.lam, "g": c.mu}[which]
    return ValueField(grid, kernel_apply(eigs, rho, grid.h))


def kernel_matrix(c: CouplingSpec, which: str = "f") -> np.ndarray:
    """Dense kernel K(x_i, y_j) = sum_k lam_k cos(2 pi k (x_i - y_j))."""
    n = c.grid.n
    eigs = {"f": c.lam, "g": c.mu}[which]
    x = np.arange(n) / n
    diff = x[:, None] - x[None, :]
    out = np.zeros((n, n))
    for k, lam_k in enumerate(eigs):
        if lam_k != 0.0:
            out += lam_k * np.cos(2.0 * np.pi * k * diff)
    return out


def monotonicity_certificate(c: CouplingSpec, trials: int, seed: int = 0, which: str = "f") -> dict:
    """Empirical check of the monotonicity quadratic form.

    Draws centered random grid measures mu (normalized to h*sum(mu^2) = 1) and
    includes the pure Fourier modes as candidates; reports the minimal value of
    h^2 * sum_ij K(x_i, y_j) mu_i mu_j and the minimizing witness.  For a valid
    spec the minimum is >= -1e-12; an indefinite test-only spec yields a
    negative value along the offending eigenmode.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = c.grid.n
    h = c.grid.h
    ker = kernel_matrix(c, which)
    rng = np.random.default_rng(seed)
    candidates = []
    for _ in range(trials):
        mu = rng.standard_normal(n)
        mu -= mu.mean()
        candidates.append(mu)
    kmax = len({"f": c.lam, "g": c.mu}[which]) - 1
    cos_t, sin_t = _mode_tables(n, max(kmax, 1))
    for k in range(1, max(kmax, 1) + 1):
        candidates.append(cos_t[k].copy())
        candidates.append(sin_t[k].copy())
    best = np.inf
    witness = None
    for mu in candidates:
        norm = np.sqrt(h * np.sum(mu**2))
        if norm < 1e-14:
            continue
        mu = mu / norm
        q = h**2 * float(mu @ ker @ mu)
        if q < best:
            best = q
            witness = mu
    return {"min_quadratic_form": best, "witness": witness, "trials": trials}
