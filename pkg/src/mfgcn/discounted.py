"""Infinite-horizon discounted MFG via horizon truncation.

The discounted system adds a +delta*u term to the backward equation and runs
on [0, infinity); we truncate at t_max = min(cap, ln(1/tol)/delta) with
terminal u = 0 and record the bound ||f||_inf * exp(-delta*t_max) / delta on
the truncation error.  The boundedness condition of the continuous problem
selects this solution up to that bound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import MFGTreeSolution, SolveParams, solve_mfg_tree, tree_for
from .couplings import CouplingSpec
from .noise import MAX_EPOCHS
from .torus import DensityField

log = logging.getLogger(__name__)


@dataclass
class DiscountCaps:
    cap_t: float = 16.0
    epoch_len: float = 2.0  # target epoch length for sigma > 0 (weak error O(Delta))
    epochs: Optional[int] = None


@dataclass
class DiscountedSolution:
    base: MFGTreeSolution
    delta: float
    t_max: float
    truncation_error_bound: float
    capped: bool

    def u0(self) -> np.ndarray:
        return self.base.u0()

    def delta_u0(self) -> np.ndarray:
        return self.delta * self.base.u0()


def solve_discounted(
    c: CouplingSpec,
    sigma: float,
    delta: float,
    m0: DensityField,
    p: Optional[SolveParams] = None,
    caps: Optional[DiscountCaps] = None,
) -> DiscountedSolution:
    """Solve the discounted tree MFG truncated at t_max with terminal u = 0."""
    if not (0.0 < delta <= 1.0):
        raise ValueError(f"discount rate must lie in (0, 1], got {delta}")
    if p is None:
        p = SolveParams()
    if caps is None:
        caps = DiscountCaps()
    t_needed = np.log(1.0 / p.tol) / delta
    t_max = min(caps.cap_t, t_needed)
    capped = t_max < t_needed
    if capped:
        log.info("discounted horizon capped at %.3g (uncapped target %.3g)", t_max, t_needed)
    if sigma == 0.0:
        epochs = 0
    elif caps.epochs is not None:
        epochs = caps.epochs
    else:
        epochs = min(MAX_EPOCHS, max(1, int(np.ceil(t_max / caps.epoch_len))))
    tree = tree_for(sigma, t_max, epochs, p.dt)
    terminal = np.zeros((2**tree.leaf_depth, c.grid.n))
    base = solve_mfg_tree(c, tree, m0, terminal=terminal, p=p, delta=delta)
    bound = c.max_abs_f() * float(np.exp(-delta * t_max)) / delta
    sup_delta_u = float(np.max(np.abs(delta * base.u_levels[0])))
    if sup_delta_u > c.max_abs_f() + 1e-6:
        log.warning("||delta*u|| = %.3g exceeds max|f| = %.3g", sup_delta_u, c.max_abs_f())
    return DiscountedSolution(
        base=base, delta=delta, t_max=t_max,
        truncation_error_bound=bound, capped=capped,
    )
