"""Tree MFG solver: within-epoch HJB/FP steps, shock rules, monotone fixed point.

Scheme (per fine step of size dt, diffusion coefficient 1 as in the shifted
system; the common-noise part of the diffusion is carried by the tree
translations):

  backward   u_i = (I - dt*Lap)^{-1} [u_{i+1} + dt*(f(m_i) - H(Du_{i+1}) - delta*u_{i+1})]
  forward    m_{i+1} = (I + dt*A(u_{i+1})) (I - dt*Lap)^{-1} m_i

with the Godunov Hamiltonian H(p+, p-) = 0.5*[min(p+,0)^2 + max(p-,0)^2] and
A(u) the conservative upwind transport whose flux at face j+1/2 reads
F = m_j*min(p,0) + m_{j+1}*max(p,0), p = (u_{j+1}-u_j)/h.  A(u) is the exact
negative adjoint of the directional derivative of H, and the forward step
diffuses before advecting, so the discrete Lasry-Lions duality identity holds
at machine precision (only the fixed-point residual enters its slack).

At a branch time with shock magnitude s the density is pushed forward by the
signed shock while the parent value is the average of the two translated
continuations, u_parent(x) = 0.5*[u_plus(x+s) + u_minus(x-s)], which realizes
the conditional expectation absorbing the martingale term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .couplings import CouplingSpec, kernel_apply
from .noise import NoiseTree
from .torus import (
    DensityField,
    Grid,
    ValueField,
    diffusion_inverse,
    grad_minus,
    grad_plus,
    shift_density,
    shift_values,
)

log = logging.getLogger(__name__)


class CFLViolation(RuntimeError):
    """dt too large for the current drift magnitude."""


@dataclass
class SolveParams:
    dt: float = 2e-3          # requested fine step; rounded so it divides the epoch
    tol: float = 1e-7
    max_iters: int = 400
    damping: str = "fictitious_play"  # or "picard"
    theta: float = 1.0        # picard weight
    cfl_factor: float = 0.5
    burn_in: int = 8

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.damping not in ("fictitious_play", "picard"):
            raise ValueError(f"unknown damping rule {self.damping!r}")
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("picard theta must lie in (0, 1]")

    def beta(self, k: int) -> float:
        if self.damping == "fictitious_play":
            return 2.0 / (k + 2.0)
        return self.theta

    def check_cfl(self, dt: float, h: float, max_du: float):
        bound = self.cfl_factor * h / (max_du + 1.0)
        if dt > bound * (1.0 + 1e-12):
            raise CFLViolation(
                f"dt={dt:g} exceeds CFL bound {bound:g} (max|Du|={max_du:g}, h={h:g})"
            )


# ---------------------------------------------------------------------------
# single-step kernels (leading axes broadcast over tree nodes)


def hj_step_arr(u_next, f_now, dt, h, inv, delta=0.0):
    dp = grad_plus(u_next, h)
    dm = grad_minus(u_next, h)
    ham = 0.5 * (np.minimum(dp, 0.0) ** 2 + np.maximum(dm, 0.0) ** 2)
    rhs = u_next + dt * (f_now - ham - delta * u_next)
    return rhs @ inv  # inv is symmetric

def fp_step_arr(m_now, u_next, dt, h, inv):
    mu = m_now @ inv
    p = grad_plus(u_next, h)
    flux = mu * np.minimum(p, 0.0) + np.roll(mu, -1, axis=-1) * np.maximum(p, 0.0)
    return mu + dt * (flux - np.roll(flux, 1, axis=-1)) / h


def hj_backward_step(u_next: ValueField, f_now: ValueField, dt: float, delta: float = 0.0) -> ValueField:
    """One semi-implicit backward step of du = (-Lap u + H(Du) + delta*u - f) dt."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    h = u_next.grid.h
    max_du = float(np.max(np.abs(grad_plus(u_next.values, h))))
    if dt > h / (max_du + 1e-300):
        raise CFLViolation(f"dt={dt:g} above hard CFL limit h/max|Du|={h / (max_du + 1e-300):g}")
    inv = diffusion_inverse(u_next.grid.n, dt)
    return ValueField(u_next.grid, hj_step_arr(u_next.values, f_now.values, dt, h, inv, delta))


def fp_forward_step(m_now: DensityField, drift: tuple[ValueField, ValueField], dt: float) -> DensityField:
    """One conservative upwind + implicit-diffusion step of dm = (Lap m + div(m Du)) dt.

    `drift` is the upwind gradient pair (dplus, dminus) of the value field;
    the flux uses the face gradient dplus_j = dminus_{j+1}.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    dplus, _ = drift
    h = m_now.grid.h
    p = dplus.values
    if 2.0 * dt * float(np.max(np.abs(p))) > h * (1.0 + 1e-12):
        raise CFLViolation("advective CFL violated: dt*2*max|Du| > h")
    inv = diffusion_inverse(m_now.grid.n, dt)
    mu = m_now.values @ inv
    flux = mu * np.minimum(p, 0.0) + np.roll(mu, -1) * np.maximum(p, 0.0)
    out = mu + dt * (flux - np.roll(flux, 1)) / h
    return DensityField(m_now.grid, out)


def branch_average_backward(u_plus: ValueField, u_minus: ValueField, s: float) -> ValueField:
    """Pre-shock value: average of the translated continuations.

    u(x) = 0.5*[u_plus(x + s) + u_minus(x - s)]; a player at x lands at x +- s
    after the shock, so the '+' continuation is sampled at x + s.
    """
    if u_plus.grid.n != u_minus.grid.n:
        raise ValueError("branch children on different grids")
    h = u_plus.grid.h
    vals = 0.5 * (shift_values(u_plus.values, -s, h) + shift_values(u_minus.values, +s, h))
    return ValueField(u_plus.grid, vals)


def branch_push_forward(m: DensityField, s_signed: float) -> DensityField:
    """Post-shock density (Id + s)#m, mass-conservative."""
    return DensityField(m.grid, shift_density(m.values, s_signed, m.grid.h))


# ---------------------------------------------------------------------------
# tree solution container


@dataclass
class MFGTreeSolution:
    grid: Grid
    tree: NoiseTree
    coupling: CouplingSpec
    params: SolveParams
    m0: np.ndarray
    terminal: Union[str, np.ndarray]
    frame: str
    delta: float
    u_levels: list  # level e: array (2^e, S+1, n)
    m_levels: list
    u_term: np.ndarray  # (2^leaves, n)
    m_term: np.ndarray
    residuals: list
    iterations: int
    converged: bool
    residual_monotone: bool = True
    warm_start_used: bool = False

    def u0(self) -> np.ndarray:
        return self.u_levels[0][0, 0].copy()

    def node_count(self) -> int:
        return sum(arr.shape[0] for arr in self.u_levels)

    def max_grad(self) -> float:
        h = self.grid.h
        return max(float(np.max(np.abs(grad_plus(u, h)))) for u in self.u_levels)

    def sample_times(self):
        """(level, index, t) covering [0, T] once; boundary times post-shock."""
        out = []
        S = self.tree.fine_steps
        d = self.tree.epoch_len
        dt = self.tree.dt
        for e in range(self.tree.n_levels):
            last = S if e == self.tree.n_levels - 1 else S - 1
            for i in range(last + 1):
                out.append((e, i, e * d + i * dt))
        return out

    def interior_density_bounds(self, t_min: float = 1.0) -> tuple[float, float]:
        lo, hi = np.inf, -np.inf
        for e, i, t in self.sample_times():
            if t < t_min:
                continue
            sl = self.m_levels[e][:, i]
            lo = min(lo, float(sl.min()))
            hi = max(hi, float(sl.max()))
        return lo, hi


# ---------------------------------------------------------------------------
# solver


class _TreeProblem:
    """Precomputed tables for one (coupling, tree, grid) triple."""

    def __init__(self, c: CouplingSpec, tree: NoiseTree, frame: str):
        self.c = c
        self.tree = tree
        self.grid = c.grid
        self.frame = frame
        n = self.grid.n
        h = self.grid.h
        self.inv = diffusion_inverse(n, tree.dt)
        if frame == "shifted":
            # potential translated per node: a(x + shift); kernel part is
            # shift-invariant for convolution couplings
            self.a_nodes = [
                np.stack([shift_values(c.a.values, -s, h) for s in tree.depth_shifts(e)])
                for e in range(tree.n_levels)
            ]
            self.b_leaves = np.stack(
                [shift_values(c.b.values, -s, h) for s in tree.depth_shifts(tree.leaf_depth)]
            )
        else:
            self.a_nodes = [c.a.values[None, :] for _ in range(tree.n_levels)]
            self.b_leaves = c.b.values[None, :]

    def f_of(self, level: int, m_arr: np.ndarray) -> np.ndarray:
        return self.a_nodes[level] + kernel_apply(self.c.lam, m_arr, self.grid.h)

    def g_of(self, m_term: np.ndarray) -> np.ndarray:
        return self.b_leaves + kernel_apply(self.c.mu, m_term, self.grid.h)


def _alloc_levels(tree: NoiseTree, n: int):
    return [np.zeros((2**e, tree.fine_steps + 1, n)) for e in range(tree.n_levels)]


def heat_flow_levels(tree: NoiseTree, grid: Grid, m0: np.ndarray, frame: str = "physical"):
    """Zero-drift trajectory (pure diffusion + pushforwards): the initial guess."""
    inv = diffusion_inverse(grid.n, tree.dt)
    S = tree.fine_steps
    levels = _alloc_levels(tree, grid.n)
    levels[0][0, 0] = m0
    for e in range(tree.n_levels):
        for i in range(S):
            levels[e][:, i + 1] = levels[e][:, i] @ inv
        if e + 1 < tree.n_levels:
            levels[e + 1][:, 0] = _push_children(levels[e][:, S], tree.shock, grid.h, frame)
    m_term = _push_children(levels[-1][:, S], tree.shock, grid.h, frame) \
        if tree.epochs >= 1 else levels[-1][:, S].copy()
    return levels, m_term


def _push_children(parent_slices: np.ndarray, s: float, h: float, frame: str) -> np.ndarray:
    """Density shock: children [minus-block, plus-block]; new branch = high bit."""
    if frame == "shifted" or s == 0.0:
        return np.concatenate([parent_slices, parent_slices], axis=0)
    return np.concatenate(
        [shift_density(parent_slices, -s, h), shift_density(parent_slices, +s, h)], axis=0
    )


def _average_children(child_slices: np.ndarray, s: float, h: float, frame: str) -> np.ndarray:
    half = child_slices.shape[0] // 2
    minus, plus = child_slices[:half], child_slices[half:]
    if frame == "shifted" or s == 0.0:
        return 0.5 * (plus + minus)
    return 0.5 * (shift_values(plus, -s, h) + shift_values(minus, +s, h))


def solve_mfg_tree(
    c: CouplingSpec,
    tree: NoiseTree,
    m0: DensityField,
    terminal: Union[str, np.ndarray] = "coupling_g",
    p: Optional[SolveParams] = None,
    delta: float = 0.0,
    frame: str = "physical",
    warm_start: Optional[MFGTreeSolution] = None,
) -> MFGTreeSolution:
    """Fixed point of the forward-backward tree system.

    Forward: root m0, upwind/implicit FP steps inside epochs, density
    pushforward at shocks.  Backward: per-leaf terminal (coupling g or fixed
    fields), HJB steps inside epochs, branch averaging at shocks.  The
    m-trajectory is damped (fictitious play by default) until the residual
    max over nodes/times of h*sum|dm| + max|du| falls below tol.
    """
    if p is None:
        p = SolveParams()
    if frame not in ("physical", "shifted"):
        raise ValueError(f"unknown frame {frame!r}")
    grid = c.grid
    if m0.grid.n != grid.n:
        raise ValueError("m0 grid does not match coupling grid")
    n, h = grid.n, grid.h
    S, dt, s_shock = tree.fine_steps, tree.dt, tree.shock
    n_leaves = 2**tree.leaf_depth
    prob = _TreeProblem(c, tree, frame)

    if isinstance(terminal, np.ndarray):
        term_fields = np.broadcast_to(terminal, (n_leaves, n)).astype(float)
        term_mode = "fixed"
    elif terminal == "coupling_g":
        term_fields = None
        term_mode = "coupling_g"
    else:
        raise ValueError(f"unknown terminal spec {terminal!r}")

    if warm_start is not None and warm_start.tree == tree and warm_start.grid.n == n:
        m_levels = [arr.copy() for arr in warm_start.m_levels]
        m_levels[0][0, 0] = m0.values
        warm = True
    else:
        m_levels, _ = heat_flow_levels(tree, grid, m0.values, frame)
        warm = False

    u_levels = _alloc_levels(tree, n)
    u_prev = None
    residuals: list[float] = []
    monotone = True
    converged = False
    it = 0

    for it in range(p.max_iters):
        # ---- backward sweep -------------------------------------------------
        if tree.epochs >= 1:
            m_term = _push_children(m_levels[-1][:, S], s_shock, h, frame)
        else:
            m_term = m_levels[-1][:, S].copy()
        u_term = term_fields.copy() if term_mode == "fixed" else prob.g_of(m_term)
        max_du = 0.0
        carry = u_term
        for e in range(tree.n_levels - 1, -1, -1):
            lvl = u_levels[e]
            if carry.shape[0] == lvl.shape[0]:
                lvl[:, S] = carry
            else:
                lvl[:, S] = _average_children(carry, s_shock, h, frame)
            for i in range(S - 1, -1, -1):
                f_now = prob.f_of(e, m_levels[e][:, i])
                lvl[:, i] = hj_step_arr(lvl[:, i + 1], f_now, dt, h, prob.inv, delta)
            carry = lvl[:, 0]
            max_du = max(max_du, float(np.max(np.abs(grad_plus(lvl, h)))))
        p.check_cfl(dt, h, max_du)

        # ---- forward sweep --------------------------------------------------
        m_new = _alloc_levels(tree, n)
        m_new[0][0, 0] = m0.values
        for e in range(tree.n_levels):
            lvl = m_new[e]
            for i in range(S):
                lvl[:, i + 1] = fp_step_arr(lvl[:, i], u_levels[e][:, i + 1], dt, h, prob.inv)
            if e + 1 < tree.n_levels:
                m_new[e + 1][:, 0] = _push_children(lvl[:, S], s_shock, h, frame)

        # ---- damping + residual ---------------------------------------------
        # the m-residual is the undamped fixed-point defect, so stopping at tol
        # bounds the true defect regardless of the damping schedule
        beta = p.beta(it)
        resid = 0.0
        for e in range(tree.n_levels):
            defect = m_new[e] - m_levels[e]
            r_m = h * np.abs(defect).sum(axis=-1).max()
            r_u = 0.0 if u_prev is None else np.abs(u_levels[e] - u_prev[e]).max()
            resid = max(resid, r_m + r_u)
            m_levels[e] += beta * defect
        u_prev = [arr.copy() for arr in u_levels]
        residuals.append(resid)
        if it > p.burn_in and len(residuals) >= 2 and residuals[-1] > 1.05 * residuals[-2]:
            monotone = False
            log.warning("residual increased at iteration %d: %.3e -> %.3e",
                        it, residuals[-2], residuals[-1])
        if resid <= p.tol:
            converged = True
            break

    if not converged:
        log.warning("solve_mfg_tree: no convergence after %d iterations (residual %.3e)",
                    p.max_iters, residuals[-1] if residuals else float("nan"))

    if tree.epochs >= 1:
        m_term = _push_children(m_levels[-1][:, S], s_shock, h, frame)
    else:
        m_term = m_levels[-1][:, S].copy()
    u_term = term_fields.copy() if term_mode == "fixed" else prob.g_of(m_term)

    return MFGTreeSolution(
        grid=grid, tree=tree, coupling=c, params=p, m0=m0.values.copy(),
        terminal=terminal if term_mode == "coupling_g" else term_fields,
        frame=frame, delta=delta,
        u_levels=u_levels, m_levels=m_levels, u_term=u_term, m_term=m_term,
        residuals=residuals, iterations=it + 1, converged=converged,
        residual_monotone=monotone, warm_start_used=warm,
    )


def tree_for(sigma: float, horizon: float, epochs: Optional[int], dt_request: float,
             fine_steps: Optional[int] = None):
    """Build a tree whose fine step divides the epoch and is <= dt_request."""
    from .noise import build_tree

    if epochs is None:
        epochs = 0 if sigma == 0.0 else max(1, round(horizon))
    if sigma == 0.0:
        epochs = 0
    d = horizon if epochs == 0 else horizon / epochs
    if fine_steps is None:
        fine_steps = max(1, int(np.ceil(d / dt_request - 1e-12)))
    return build_tree(sigma, horizon, epochs, fine_steps)
