"""Factorization orders and the attention masks that realize them.

The sequence is never reordered. A permutation only decides, through the
masks, which positions each position may attend to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PERM_MODES = ("random", "identity")


@dataclass(frozen=True)
class PermutationOrder:
    order: np.ndarray  # order[k] = position predicted k-th
    rank: np.ndarray  # rank[p] = k iff order[k] == p

    @classmethod
    def from_order(cls, order) -> "PermutationOrder":
        order = np.asarray(order, dtype=np.int64)
        t = len(order)
        if t < 1 or not np.array_equal(np.sort(order), np.arange(t)):
            raise ValueError(f"not a permutation of range({t}): {order.tolist()}")
        rank = np.empty(t, dtype=np.int64)
        rank[order] = np.arange(t)
        return cls(order, rank)

    def __len__(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class AttentionMasks:
    content: np.ndarray  # T x T, content[i, j]: position i may attend to j
    query: np.ndarray
    targets: np.ndarray  # sorted positions whose frames are predicted

    @property
    def length(self) -> int:
        return self.content.shape[0]


def sample_permutation(T: int, mode: str = "random", rng: np.random.Generator | None = None) -> PermutationOrder:
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode == "identity":
        return PermutationOrder.from_order(np.arange(T))
    if mode != "random":
        raise ValueError(f"unknown permutation mode {mode!r}")
    if rng is None:
        raise ValueError("random permutations need an rng")
    order = np.arange(T)
    # Fisher-Yates, drawing from the supplied stream only
    for i in range(T - 1, 0, -1):
        j = int(rng.integers(i + 1))
        order[i], order[j] = order[j], order[i]
    return PermutationOrder.from_order(order)


def num_targets(T: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ValueError(f"target fraction must lie in (0, 1], got {fraction}")
    return max(1, math.floor(fraction * T))


def select_targets(perm: PermutationOrder, fraction: float = 0.2) -> np.ndarray:
    """Positions occupying the last ``max(1, floor(fraction*T))`` slots of the order."""
    e = num_targets(len(perm), fraction)
    return np.sort(perm.order[len(perm) - e:])


def build_masks(perm: PermutationOrder, fraction: float = 0.2) -> AttentionMasks:
    r = perm.rank
    content = r[None, :] <= r[:, None]
    query = r[None, :] < r[:, None]
    return AttentionMasks(content, query, select_targets(perm, fraction))


def permutation_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, sequence index)."""
    return np.random.default_rng([seed, epoch, index, 0x5E])
