"""Brownian filtration on a binary tree.

Level ``n`` of the tree has ``2**n`` nodes; node ``j`` at level ``n`` has
children ``2j`` (increment ``+sqrt(dt)``) and ``2j + 1`` (increment
``-sqrt(dt)``), each with conditional probability 1/2.  Conditional
expectations are therefore exact two-point averages.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 20


@dataclass(frozen=True)
class NoiseTree:
    N: int
    T: float

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("tree needs at least one time step")
        if self.N > MAX_DEPTH:
            raise ValueError(f"tree depth {self.N} exceeds the memory guard {MAX_DEPTH}")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @property
    def half_times(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.dt

    def child_increments(self, level: int) -> np.ndarray:
        """Increment ``W(t_{level}) - W(t_{level-1})`` at each node of ``level`` (>= 1)."""
        if not 1 <= level <= self.N:
            raise ValueError("increments live on levels 1..N")
        signs = np.where(np.arange(2 ** level) % 2 == 0, 1.0, -1.0)
        return signs * self.sqrt_dt

    def brownian(self, level: int) -> np.ndarray:
        """W(t_level) at every node of ``level``."""
        w = np.zeros(1)
        for n in range(1, level + 1):
            w = np.repeat(w, 2) + self.child_increments(n)
        return w

    def zeros(self, M: int, levels: range | None = None) -> "AdaptedField":
        levels = range(self.N + 1) if levels is None else levels
        return AdaptedField(self, [np.zeros((2 ** n, M)) for n in levels], levels.start)


class AdaptedField:
    """One spatial vector per tree node, for a contiguous range of levels.

    ``field[n]`` is the ``(2**n, M)`` array at level ``n``.  Adaptedness is
    structural: the value at a node is indexed by its increment history.
    """

    def __init__(self, tree: NoiseTree, levels: list[np.ndarray], first: int = 0):
        self.tree = tree
        self.first = first
        self.levels = levels
        for k, arr in enumerate(levels):
            if arr.ndim != 2 or arr.shape[0] != 2 ** (first + k):
                raise ValueError(f"level {first + k} must have shape (2**n, M)")

    @classmethod
    def deterministic(cls, tree: NoiseTree, values, levels: range | None = None) -> "AdaptedField":
        """Broadcast deterministic data: a vector (M,) or a (num_levels, M) array."""
        levels = range(tree.N + 1) if levels is None else levels
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = np.broadcast_to(values, (len(levels), values.size))
        return cls(tree, [np.repeat(values[k][None, :], 2 ** n, axis=0)
                          for k, n in enumerate(levels)], levels.start)

    @property
    def last(self) -> int:
        return self.first + len(self.levels) - 1

    @property
    def M(self) -> int:
        return self.levels[0].shape[1]

    @property
    def level_range(self) -> range:
        return range(self.first, self.last + 1)

    def __getitem__(self, n: int) -> np.ndarray:
        if not self.first <= n <= self.last:
            raise IndexError(f"level {n} not in {self.first}..{self.last}")
        return self.levels[n - self.first]

    def __setitem__(self, n: int, value) -> None:
        self.levels[n - self.first][...] = value

    def copy(self) -> "AdaptedField":
        return AdaptedField(self.tree, [a.copy() for a in self.levels], self.first)

    def map(self, fn) -> "AdaptedField":
        return AdaptedField(self.tree, [fn(n, a) for n, a in zip(self.level_range, self.levels)],
                            self.first)

    def _combine(self, other, op) -> "AdaptedField":
        if isinstance(other, AdaptedField):
            if other.level_range != self.level_range:
                raise ValueError("level ranges differ")
            return AdaptedField(self.tree, [op(a, b) for a, b in zip(self.levels, other.levels)],
                                self.first)
        return AdaptedField(self.tree, [op(a, other) for a in self.levels], self.first)

    def __add__(self, other):
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def expectation(self, n: int) -> np.ndarray:
        return expectation(self, n)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.levels)

    def dump(self, path) -> None:
        """Binary dump (``.npz``) for debugging."""
        np.savez(path, first=self.first, N=self.tree.N, T=self.tree.T,
                 **{f"level_{n}": a for n, a in zip(self.level_range, self.levels)})


def expectation(field: AdaptedField | np.ndarray, level: int | None = None) -> np.ndarray:
    """Uniform average over the nodes of one level."""
    arr = field[level] if isinstance(field, AdaptedField) else np.asarray(field)
    return arr.mean(axis=0)


def conditional_expectation(values: np.ndarray) -> np.ndarray:
    """E_n of a level-(n+1) array: average of children ``2j`` and ``2j+1``."""
    values = np.asarray(values)
    return 0.5 * (values[0::2] + values[1::2])


def martingale_coefficient(values: np.ndarray, dt: float) -> np.ndarray:
    """``k_n`` with ``v_{n+1} = E_n[v_{n+1}] + k_n dW_n`` exactly."""
    values = np.asarray(values)
    return (values[0::2] - values[1::2]) / (2.0 * np.sqrt(dt))


def split(values: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    return conditional_expectation(values), martingale_coefficient(values, dt)


def recombine(mean: np.ndarray, k: np.ndarray, dt: float) -> np.ndarray:
    """Inverse of :func:`split`: children ``mean +- k sqrt(dt)`` interleaved."""
    out = np.empty((2 * mean.shape[0],) + mean.shape[1:])
    sq = np.sqrt(dt)
    out[0::2] = mean + k * sq
    out[1::2] = mean - k * sq
    return out


def sample_paths(seed: int, count: int, N: int, T: float) -> np.ndarray:
    """Gaussian increments ``N(0, T/N)``, shape ``(count, N)``, for Monte Carlo runs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, np.sqrt(T / N), size=(count, N))
