"""Fixed-edge 1-D histograms with under/overflow counters.

Merging is a monoid operation (commutative, associative, empty histogram as
identity), which is what makes ensemble summaries independent of worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EdgeMismatch(Exception):
    """Raised when combining or comparing histograms with different edges."""


def log_edges(lo: float, hi: float, n_bins: int) -> np.ndarray:
    if not (0 < lo < hi):
        raise ValueError("need 0 < lo < hi for log-spaced edges")
    return np.logspace(np.log10(lo), np.log10(hi), n_bins + 1)


def linear_edges(lo: float, hi: float, n_bins: int) -> np.ndarray:
    if not lo < hi:
        raise ValueError("need lo < hi")
    return np.linspace(lo, hi, n_bins + 1)


@dataclass
class Histogram1D:
    edges: np.ndarray
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.edges.ndim != 1 or self.edges.size < 2:
            raise ValueError("edges must be a 1-D array with at least 2 entries")
        if not np.all(np.diff(self.edges) > 0):
            raise ValueError("edges must be strictly increasing")
        if self.counts is None:
            self.counts = np.zeros(self.edges.size - 1, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.edges.size - 1,):
                raise ValueError("counts length must be len(edges) - 1")

    @classmethod
    def from_samples(cls, values, edges) -> "Histogram1D":
        h = cls(edges)
        h.add(values)
        return h

    def add(self, values) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        idx = np.searchsorted(self.edges, values, side="right") - 1
        # x == edges[-1] belongs to the last bin, not overflow
        idx[values == self.edges[-1]] = self.counts.size - 1
        self.underflow += int(np.count_nonzero(idx < 0))
        self.overflow += int(np.count_nonzero(idx >= self.counts.size))
        inside = (idx >= 0) & (idx < self.counts.size)
        np.add.at(self.counts, idx[inside], 1)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow

    def __add__(self, other: "Histogram1D") -> "Histogram1D":
        if not isinstance(other, Histogram1D):
            return NotImplemented
        if self.edges.shape != other.edges.shape or not np.array_equal(self.edges, other.edges):
            raise EdgeMismatch("cannot merge histograms with different edges")
        return Histogram1D(
            self.edges,
            self.counts + other.counts,
            self.underflow + other.underflow,
            self.overflow + other.overflow,
        )

    def normalized(self) -> np.ndarray:
        """Probability vector over (underflow, bins..., overflow)."""
        n = self.total
        if n == 0:
            raise ValueError("empty histogram cannot be normalized")
        out = np.empty(self.counts.size + 2)
        out[0] = self.underflow
        out[1:-1] = self.counts
        out[-1] = self.overflow
        return out / n
