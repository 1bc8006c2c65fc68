"""Random partition of N observations into n near-equal groups.

The assignment is a seeded shuffle followed by a contiguous split: the
first N mod n groups receive ceil(N/n) members, the rest floor(N/n), so
group sizes never differ by more than one. The result is a pure function
of (N, n, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ArgumentError


@dataclass(frozen=True)
class Grouping:
    n_obs: int
    n_groups: int
    seed: int
    order: np.ndarray = field(repr=False)   # observation indices, group-sorted
    starts: np.ndarray = field(repr=False)  # n+1 boundaries into order
    sizes: np.ndarray = field(repr=False)   # (n,)

    @property
    def mean_group_size(self) -> float:
        return self.n_obs / self.n_groups

    @property
    def assignment(self) -> np.ndarray:
        """Group id per observation, (N,)."""
        ids = np.empty(self.n_obs, dtype=np.int64)
        ids[self.order] = np.repeat(np.arange(self.n_groups), self.sizes)
        return ids

    def members(self, i: int) -> np.ndarray:
        return self.order[self.starts[i]:self.starts[i + 1]]


def _split_sizes(N: int, n: int) -> np.ndarray:
    base, extra = divmod(N, n)
    sizes = np.full(n, base, dtype=np.int64)
    sizes[:extra] += 1
    return sizes


def make_grouping(N: int, n: int, seed: int = 0) -> Grouping:
    """Seeded random grouping of N observations into n groups."""
    N, n = int(N), int(n)
    if N < 1:
        raise ArgumentError(f"need N >= 1, got {N}")
    if not 1 <= n <= N:
        raise ArgumentError(f"need 1 <= n <= N, got n={n}, N={N}")
    order = np.random.default_rng(int(seed)).permutation(N)
    sizes = _split_sizes(N, n)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    return Grouping(N, n, int(seed), order, starts, sizes)


def identity_grouping(N: int) -> Grouping:
    """Singleton groups in natural order: the ungrouped (classical) case."""
    N = int(N)
    if N < 1:
        raise ArgumentError(f"need N >= 1, got {N}")
    idx = np.arange(N, dtype=np.int64)
    return Grouping(N, N, 0, idx, np.arange(N + 1, dtype=np.int64),
                    np.ones(N, dtype=np.int64))
