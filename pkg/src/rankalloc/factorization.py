"""Activation-whitened SVD of linear-layer weights.

A layer with weight W (out x in) seen by calibration inputs X (in x tokens)
is factored by taking the Cholesky factor S of the (damped) Gram matrix
X X^T and the SVD of W S. Truncating that SVD minimizes the data-weighted
reconstruction error ||W X - W' X||_F over rank-constrained W', and the
error of keeping the top r singular values has the closed form
sqrt(sum of the discarded squared singular values).

Factorizations are computed once per layer before mask training and are
immutable afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InputError, NumericalError

DEFAULT_DAMPING = 1e-6


def gram(x: np.ndarray) -> np.ndarray:
    """X X^T for calibration activations X (features x tokens)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise InputError(f"calibration matrix must be 2-D and non-empty, got shape {x.shape}")
    h = x @ x.T
    return (h + h.T) / 2.0  # exact symmetry for the Cholesky step


def cholesky_damped(h: np.ndarray, damping_scale: float = DEFAULT_DAMPING) -> np.ndarray:
    """Lower-triangular S with S S^T = H + eps*I, eps = damping_scale * mean(diag H)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise InputError(f"gram matrix must be square, got shape {h.shape}")
    if damping_scale < 0:
        raise InputError("damping scale must be nonnegative")
    scale = max(np.abs(h).max(), 1.0)
    if np.abs(h - h.T).max() > 1e-10 * scale:
        raise InputError("gram matrix is not symmetric")
    eps = damping_scale * float(np.mean(np.diag(h)))
    damped = h + eps * np.eye(h.shape[0])
    try:
        return np.linalg.cholesky(damped)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"cholesky failed even with damping eps={eps:.3e}; "
            "increase the damping scale or supply more calibration tokens") from exc


@dataclass(frozen=True)
class WhitenedFactorization:
    """SVD of W S plus the whitening pair (S, S^-1).

    u has orthonormal columns (rows x k), sigma is non-increasing (k,),
    v is (cols x k), k = min(rows, cols). The sign convention fixes the
    first significantly-nonzero entry of each right singular vector to be
    nonnegative so repeated runs produce identical factors.
    """

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    whitener: np.ndarray
    whitener_inv: np.ndarray
    rows: int
    cols: int

    @property
    def max_rank(self) -> int:
        return int(self.sigma.size)

    def total_norm(self) -> float:
        """||W S||_F = sqrt(sum of all squared singular values)."""
        return float(np.sqrt(np.sum(self.sigma**2)))


@dataclass(frozen=True)
class FactorPair:
    """Rank-r factors: left (rows x r), right (r x cols), W ~ left @ right."""

    left: np.ndarray
    right: np.ndarray
    rank: int

    @property
    def parameter_count(self) -> int:
        return self.left.size + self.right.size


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = vt.shape[0]
    for j in range(k):
        row = vt[j]
        nz = np.flatnonzero(np.abs(row) > 1e-12 * max(np.abs(row).max(), 1e-300))
        if nz.size and row[nz[0]] < 0:
            vt[j] = -row
            u[:, j] = -u[:, j]
    return u, vt


def whiten_and_decompose(w: np.ndarray, x: np.ndarray,
                         damping_scale: float = DEFAULT_DAMPING) -> WhitenedFactorization:
    """Factor weight W (rows x cols) against calibration inputs X (cols x tokens)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise InputError(f"weight must be 2-D, got shape {w.shape}")
    rows, cols = w.shape
    if x.shape[0] != cols:
        raise InputError(
            f"calibration rows ({x.shape[0]}) must match weight input dim ({cols})")
    s = cholesky_damped(gram(x), damping_scale)
    try:
        u, sigma, vt = np.linalg.svd(w @ s, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("SVD of the whitened weight failed to converge") from exc
    u, vt = _fix_signs(u, vt)
    s_inv = scipy.linalg.solve_triangular(s, np.eye(cols), lower=True)
    return WhitenedFactorization(u=u, sigma=sigma, v=vt.T, whitener=s,
                                 whitener_inv=s_inv, rows=rows, cols=cols)


def truncate(fact: WhitenedFactorization, rank: int) -> FactorPair:
    """Keep the top ``rank`` singular directions; parameter count is rank*(rows+cols)."""
    if not 1 <= rank <= fact.max_rank:
        raise InputError(f"rank must be in [1, {fact.max_rank}], got {rank}")
    root = np.sqrt(fact.sigma[:rank])
    left = fact.u[:, :rank] * root
    right = (root[:, None] * fact.v[:, :rank].T) @ fact.whitener_inv
    return FactorPair(left=left, right=right, rank=rank)


def truncation_loss(fact: WhitenedFactorization, rank: int) -> float:
    """Whitened reconstruction error of keeping the top ``rank`` values."""
    if not 0 <= rank <= fact.max_rank:
        raise InputError(f"rank must be in [0, {fact.max_rank}], got {rank}")
    return float(np.sqrt(np.sum(fact.sigma[rank:] ** 2)))
