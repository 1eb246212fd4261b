"""Vendi diversity score with a linear kernel on unit-normalized embeddings."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput
from .gauss_stats import as_embeddings

__all__ = ["normalize_rows", "vendi_score", "entropy_of_spectrum"]

ZERO_NORM = 1e-12
ZERO_EIG = 1e-12


def normalize_rows(x) -> np.ndarray:
    x = as_embeddings(x)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < ZERO_NORM):
        raise InvalidInput(f"row {int(np.argmin(norms))} has zero norm")
    return x / norms[:, None]


def entropy_of_spectrum(eigenvalues) -> float:
    """Shannon entropy of a probability spectrum, with 0 log 0 = 0."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    lam = lam[lam > ZERO_EIG]
    return float(-np.sum(lam * np.log(lam)))


def vendi_score(x) -> float:
    """Effective number of mutually dissimilar rows, in [1, rows].

    The kernel eigenvalues are divided by the number of rows so they form a
    probability vector; whichever of the n x n Gram matrix and the d x d
    scatter matrix is smaller is decomposed (both share the nonzero spectrum).
    """
    xh = normalize_rows(x)
    n, d = xh.shape
    gram = xh @ xh.T if n <= d else xh.T @ xh
    lam = np.linalg.eigvalsh(gram) / n
    score = float(np.exp(entropy_of_spectrum(lam)))
    return min(max(score, 1.0), float(n))
