"""Gaussian statistics of embedding sets and the Frechet distance between them.

The Frechet distance between N(mu_a, S_a) and N(mu_b, S_b) is

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)

which is the quantity reported as FAD/FID when the statistics come from audio
or image embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NotPSD

__all__ = [
    "GaussStats",
    "RunningStats",
    "as_embeddings",
    "accumulate_stats",
    "merge_stats",
    "matrix_sqrt_psd",
    "frechet_distance",
]

NEG_EIG_TOL = 1e-8
SYM_TOL = 1e-8


def as_embeddings(x) -> np.ndarray:
    """Validate and return a 2-D float64 embedding matrix (rows x dim)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"expected a non-empty (rows, dim) matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0, 0])
        raise InvalidInput(f"non-finite entry in embedding row {bad}")
    return arr


@dataclass(frozen=True)
class GaussStats:
    """Mean, sample covariance (n - 1 divisor) and sample count of an embedding set.

    ``count == 0`` is only used for the empty identity element of ``merge_stats``.
    """

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise InvalidInput(f"cov shape {cov.shape} does not match mean dim {mean.size}")
        if self.count < 0:
            raise InvalidInput("count must be non-negative")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise InvalidInput("non-finite statistics")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(cov), initial=0.0)):
            raise InvalidInput("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "count", int(self.count))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def empty(cls, dim: int) -> "GaussStats":
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "cov": [float(v) for v in self.cov.reshape(-1)],
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussStats":
        try:
            mean = np.asarray(d["mean"], dtype=np.float64)
            cov = np.asarray(d["cov"], dtype=np.float64)
            count = int(d["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"malformed stats record: {exc}") from exc
        dim = mean.size
        if cov.size != dim * dim:
            raise InvalidInput(f"cov has {cov.size} entries, expected {dim * dim}")
        return cls(mean, cov.reshape(dim, dim), count)


def accumulate_stats(embeddings) -> GaussStats:
    x = as_embeddings(embeddings)
    n = x.shape[0]
    mean = x.mean(axis=0)
    if n == 1:
        cov = np.zeros((x.shape[1], x.shape[1]))
    else:
        centered = x - mean
        cov = centered.T @ centered / (n - 1)
    return GaussStats(mean, cov, n)


def merge_stats(a: GaussStats, b: GaussStats) -> GaussStats:
    """Combine statistics of two disjoint row sets (pairwise update of Chan et al.)."""
    if a.dim != b.dim:
        raise InvalidInput(f"dim mismatch: {a.dim} vs {b.dim}")
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.cov * (a.count - 1) + b.cov * (b.count - 1) + np.outer(delta, delta) * (a.count * b.count / n)
    return GaussStats(mean, m2 / (n - 1), n)


class RunningStats:
    """Sufficient statistics (sum, sum of outer products) with O(d^2) row updates.

    Used where a set changes one row at a time and its Gaussian fit must be
    re-evaluated after every change.
    """

    def __init__(self, embeddings=None, dim: int | None = None):
        if embeddings is not None:
            x = as_embeddings(embeddings)
            self.n = x.shape[0]
            self.total = x.sum(axis=0)
            self.outer = x.T @ x
        else:
            if dim is None:
                raise InvalidInput("need embeddings or dim")
            self.n = 0
            self.total = np.zeros(dim)
            self.outer = np.zeros((dim, dim))

    def copy(self) -> "RunningStats":
        other = RunningStats.__new__(RunningStats)
        other.n = self.n
        other.total = self.total.copy()
        other.outer = self.outer.copy()
        return other

    def add(self, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        self.n += 1
        self.total += row
        self.outer += np.outer(row, row)

    def remove(self, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        self.n -= 1
        self.total -= row
        self.outer -= np.outer(row, row)

    def replace(self, old, new) -> None:
        self.remove(old)
        self.add(new)

    def stats(self) -> GaussStats:
        if self.n < 1:
            raise InvalidInput("no rows accumulated")
        mean = self.total / self.n
        if self.n == 1:
            cov = np.zeros_like(self.outer)
        else:
            cov = (self.outer - self.n * np.outer(mean, mean)) / (self.n - 1)
            cov = 0.5 * (cov + cov.T)
        return GaussStats(mean, cov, self.n)


def matrix_sqrt_psd(m) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in [-1e-8, 0) are treated as round-off and clamped to zero;
    anything more negative raises ``NotPSD``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix has non-finite entries")
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise InvalidInput("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w[0] < -NEG_EIG_TOL:
        raise NotPSD(f"smallest eigenvalue {w[0]:.3e} is below {-NEG_EIG_TOL:g}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussStats, b: GaussStats) -> float:
    if a.dim != b.dim:
        raise InvalidInput(f"dim mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    sa = matrix_sqrt_psd(a.cov)
    inner = sa @ b.cov @ sa
    cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T)))
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(d, 0.0)
