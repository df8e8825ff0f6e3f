"""mfgcn: mean field games with common noise on the 1-D torus.

Finite-difference solvers for the finite-horizon, discounted, and linearized
MFG systems on a binomial common-noise tree, plus estimators for the ergodic
constant, the corrector of the ergodic master equation, and turnpike/decay
diagnostics.
"""

from .torus import (
    Grid,
    ValueField,
    DensityField,
    GridMismatchError,
    laplacian,
    gradient_upwind,
    translate,
    wasserstein1,
    implicit_diffusion_step,
)
from .couplings import CouplingSpec, eval_f, eval_g, apply_flat_derivative, monotonicity_certificate
from .noise import NoiseTree, build_tree, expect_over_leaves, child_shifts

__all__ = [
    "Grid",
    "ValueField",
    "DensityField",
    "GridMismatchError",
    "laplacian",
    "gradient_upwind",
    "translate",
    "wasserstein1",
    "implicit_diffusion_step",
    "CouplingSpec",
    "eval_f",
    "eval_g",
    "apply_flat_derivative",
    "monotonicity_certificate",
    "NoiseTree",
    "build_tree",
    "expect_over_leaves",
    "child_shifts",
]
