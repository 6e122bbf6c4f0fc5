"""Binary indexed (Fenwick) tree over float weights.

The jitted helpers operate on a raw ``tree`` array of length ``n + 1`` so
they can be inlined into the event loop; ``FenwickSampler`` wraps them for
use from Python.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def fw_build(weights):
    n = weights.shape[0]
    tree = np.zeros(n + 1)
    for i in range(n):
        j = i + 1
        tree[j] += weights[i]
        parent = j + (j & -j)
        if parent <= n:
            tree[parent] += tree[j]
    return tree


@njit(cache=True)
def fw_add(tree, i, delta):
    n = tree.shape[0] - 1
    j = i + 1
    while j <= n:
        tree[j] += delta
        j += j & -j


@njit(cache=True)
def fw_prefix(tree, i):
    """Sum of the first ``i`` weights."""
    s = 0.0
    j = i
    while j > 0:
        s += tree[j]
        j -= j & -j
    return s


@njit(cache=True)
def fw_top_bit(n):
    bit = 1
    while bit * 2 <= n:
        bit *= 2
    return bit


@njit(cache=True)
def fw_find(tree, u, top_bit):
    """Smallest leaf index whose inclusive prefix sum exceeds ``u``."""
    n = tree.shape[0] - 1
    pos = 0
    bit = top_bit
    while bit > 0:
        nxt = pos + bit
        if nxt <= n and tree[nxt] <= u:
            pos = nxt
            u -= tree[nxt]
        bit >>= 1
    return pos


class FenwickSampler:
    """Weighted sampler with O(log n) update and draw."""

    def __init__(self, weights):
        self.weights = np.array(weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        self.tree = fw_build(self.weights)
        self._top = fw_top_bit(max(len(self.weights), 1))

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def total(self) -> float:
        return fw_prefix(self.tree, len(self.weights))

    def prefix(self, i: int) -> float:
        return fw_prefix(self.tree, i)

    def update(self, i: int, weight: float) -> None:
        if weight < 0:
            raise ValueError("weights must be nonnegative")
        fw_add(self.tree, i, weight - self.weights[i])
        self.weights[i] = weight

    def find(self, u: float) -> int:
        i = fw_find(self.tree, u, self._top)
        return min(i, len(self.weights) - 1)

    def sample(self, rng: np.random.Generator) -> int:
        total = self.total
        if total <= 0:
            raise ValueError("cannot sample with all-zero weights")
        return self.find(rng.random() * total)
