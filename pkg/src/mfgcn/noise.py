"""Binomial tree surrogate for the common Brownian motion.

The Brownian increment over each epoch of length Delta = T/K is lumped into a
two-point shock +-sqrt(2*sigma*Delta) applied at the epoch's end, so the
cumulative translation at depth e has mean zero and variance 2*sigma*(e*Delta)
exactly, and conditional expectations at branch points are exact two-point
averages.  Depth-e nodes (e < K) own the time range [e*Delta, (e+1)*Delta];
depth-K nodes carry only the post-shock terminal instant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_EPOCHS = 14  # memory guard: 2^14 leaves


@dataclass(frozen=True)
class NoiseTree:
    sigma: float
    horizon: float
    epochs: int
    fine_steps: int

    @property
    def epoch_len(self) -> float:
        return self.horizon if self.epochs == 0 else self.horizon / self.epochs

    @property
    def dt(self) -> float:
        return self.epoch_len / self.fine_steps

    @property
    def shock(self) -> float:
        """Magnitude sqrt(2*sigma*Delta) of a single shock."""
        return float(np.sqrt(2.0 * self.sigma * self.epoch_len))

    @property
    def n_levels(self) -> int:
        """Number of depths that own a time range."""
        return max(self.epochs, 1)

    @property
    def leaf_depth(self) -> int:
        return self.epochs

    def node_prob(self, depth: int) -> float:
        return 0.5**depth

    def depth_shifts(self, depth: int) -> np.ndarray:
        """Cumulative translations of all 2^depth nodes, in index order.

        A node's index spells its branch choices: bit b (from the oldest
        branch) set means the '+' child was taken.
        """
        if depth < 0 or depth > self.epochs:
            raise ValueError(f"depth {depth} outside tree (epochs={self.epochs})")
        idx = np.arange(2**depth, dtype=np.uint64)
        ones = np.zeros(2**depth, dtype=np.int64)
        for b in range(depth):
            ones += ((idx >> np.uint64(b)) & np.uint64(1)).astype(np.int64)
        return self.shock * (2.0 * ones - depth)

    def leaf_shifts(self) -> np.ndarray:
        return self.depth_shifts(self.leaf_depth)

    def times(self, level: int) -> np.ndarray:
        """Fine time samples owned by an interior level, endpoints included."""
        if level < 0 or level >= self.n_levels:
            raise ValueError(f"level {level} outside tree")
        d = self.epoch_len
        return level * d + np.arange(self.fine_steps + 1) * self.dt


def build_tree(sigma: float, horizon: float, epochs: int, fine_steps: int) -> NoiseTree:
    """Build the binomial noise tree; sigma = 0 collapses to a single branch."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if fine_steps < 1:
        raise ValueError("fine_steps must be >= 1")
    if sigma == 0.0:
        epochs = 0
    if epochs > MAX_EPOCHS:
        raise ValueError(f"epochs {epochs} exceeds tree cap {MAX_EPOCHS} (2^{MAX_EPOCHS} leaves)")
    return NoiseTree(sigma=float(sigma), horizon=float(horizon), epochs=int(epochs), fine_steps=int(fine_steps))


def expect_over_leaves(tree: NoiseTree, leaf_values) -> float:
    """Exact expectation over leaves: sum of node_prob * value, in index order."""
    vals = np.asarray(leaf_values, dtype=float)
    n_leaves = 2**tree.leaf_depth
    if vals.shape[0] != n_leaves:
        raise ValueError(f"expected {n_leaves} leaf values, got {vals.shape[0]}")
    p = tree.node_prob(tree.leaf_depth)
    acc = 0.0
    for v in vals:  # fixed left-to-right order for bit-reproducibility
        acc += p * v
    return acc


def expect_at_depth(tree: NoiseTree, depth: int, values) -> float:
    """Exact expectation over the 2^depth nodes at a given depth."""
    vals = np.asarray(values, dtype=float)
    if vals.shape[0] != 2**depth:
        raise ValueError(f"expected {2**depth} values at depth {depth}, got {vals.shape[0]}")
    p = tree.node_prob(depth)
    acc = 0.0
    for v in vals:
        acc += p * v
    return acc


def child_shifts(tree: NoiseTree, node: tuple[int, int]) -> tuple[float, float]:
    """Shock increments (s_plus, s_minus) = (+sqrt(2 sigma Delta), -...) below a node."""
    depth, index = node
    if depth >= tree.leaf_depth:
        raise ValueError("leaf nodes have no children")
    if index < 0 or index >= 2**depth:
        raise ValueError(f"index {index} invalid at depth {depth}")
    return tree.shock, -tree.shock
