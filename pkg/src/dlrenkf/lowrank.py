"""Dense low-rank linear algebra shared by the full-order and low-rank filters.

Everything here is a pure function of its inputs. Matrices are small enough
(``d`` in the thousands, ranks in the tens) that deterministic dense LAPACK
routines are used throughout; no randomised sketching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import NonFinite, NotSPD, RankDeficient

__all__ = [
    "TruncatedFactors",
    "RankPolicy",
    "CovarianceFactor",
    "orthonormalize",
    "truncated_svd",
    "adaptive_rank",
    "reduced_gain",
    "factored_gain",
    "factored_gain_apply",
    "sign_normalize",
]


@dataclass(frozen=True)
class TruncatedFactors:
    """Rank-``R`` factors ``left_modes @ diag(singular_values) @ right_modes.T``."""

    left_modes: np.ndarray
    singular_values: np.ndarray
    right_modes: np.ndarray

    @property
    def rank(self) -> int:
        return self.singular_values.size

    def reconstruct(self) -> np.ndarray:
        return (self.left_modes * self.singular_values) @ self.right_modes.T


@dataclass(frozen=True)
class RankPolicy:
    """How the zero-mean part of a low-rank ensemble is truncated.

    ``mode="fixed"`` keeps ``rank`` modes per variable block. ``mode="adaptive"``
    keeps the smallest rank whose discarded singular-value energy is below
    ``threshold**2`` (never fewer than ``min_rank``). During the first
    ``warm_start`` steps an adaptive policy behaves as a fixed policy at
    ``rank``.
    """

    mode: str = "fixed"
    rank: int = 1
    threshold: float = 0.0
    min_rank: int = 1
    warm_start: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown rank policy mode {self.mode!r}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.mode == "adaptive":
            if not self.threshold > 0:
                raise ValueError("adaptive rank policy requires threshold > 0")
            if self.min_rank < 1:
                raise ValueError("adaptive rank policy requires min_rank >= 1")

    @classmethod
    def fixed(cls, rank: int) -> "RankPolicy":
        return cls("fixed", rank=rank)

    @classmethod
    def adaptive(cls, threshold: float, min_rank: int = 1, rank: int = 1,
                 warm_start: int = 0) -> "RankPolicy":
        return cls("adaptive", rank=rank, threshold=threshold,
                   min_rank=min_rank, warm_start=warm_start)

    def is_adaptive_at(self, step: int | None) -> bool:
        if self.mode != "adaptive":
            return False
        return step is None or step >= self.warm_start

    def choose(self, singular_values: np.ndarray, old_rank: int,
               step: int | None = None) -> int:
        """Rank to keep given the singular values of the augmented coefficients."""
        available = singular_values.size
        if not self.is_adaptive_at(step):
            return min(self.rank, available)
        window = singular_values[: 2 * old_rank]
        return min(adaptive_rank(window, self.threshold, self.min_rank), available)


class CovarianceFactor:
    """Cholesky-type factorisation of an SPD noise covariance.

    Diagonal matrices are detected and handled elementwise, which matters
    for fully observed states where ``k`` equals the state dimension.
    """

    def __init__(self, matrix):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0.0):
            raise NotSPD("covariance is not symmetric")
        self.matrix = matrix
        self.size = matrix.shape[0]
        off = matrix - np.diag(np.diag(matrix))
        if not np.any(off):
            d = np.diag(matrix).copy()
            if not np.all(d > 0) or not np.all(np.isfinite(d)):
                raise NotSPD("diagonal covariance has non-positive entries")
            self.diag = d
            self._sqrt_diag = np.sqrt(d)
            self.chol = None
        else:
            self.diag = None
            try:
                self.chol = sla.cholesky(matrix, lower=True)
            except np.linalg.LinAlgError as exc:
                raise NotSPD(f"Cholesky factorisation failed: {exc}") from None

    def scaled(self, factor: float) -> "CovarianceFactor":
        return CovarianceFactor(self.matrix * factor)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``Gamma^{-1} rhs``."""
        if self.diag is not None:
            return rhs / (self.diag[:, None] if rhs.ndim == 2 else self.diag)
        return sla.cho_solve((self.chol, True), rhs)

    def sqrt_mul(self, rhs: np.ndarray) -> np.ndarray:
        """Return ``L rhs`` with ``L L^T = Gamma``."""
        if self.diag is not None:
            return rhs * (self._sqrt_diag[:, None] if rhs.ndim == 2 else self._sqrt_diag)
        return self.chol @ rhs

    def dense(self) -> np.ndarray:
        return self.matrix


def orthonormalize(M: np.ndarray, tol: float = 1e-14, drop_dependent: bool = False):
    """Thin QR factorisation with a nonnegative diagonal in ``R``.

    Parameters
    ----------
    M : ndarray, shape (d, k)
    tol : float
        A column whose residual (after removing its projection on the
        previous columns) is below ``tol`` times its own norm is treated as
        linearly dependent.
    drop_dependent : bool
        If False, dependent columns raise :class:`RankDeficient`. If True they
        are removed and ``Q`` spans the remaining columns; the returned
        ``R = Q.T @ M`` then has fewer rows than columns.

    Returns
    -------
    Q : ndarray, shape (d, k')
    R : ndarray, shape (k', k)
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    d, k = M.shape
    if k > d and not drop_dependent:
        raise RankDeficient(f"{k} columns cannot be independent in dimension {d}")
    norms = np.linalg.norm(M, axis=0)
    keep = np.flatnonzero(norms > 0)
    if keep.size < k and not drop_dependent:
        raise RankDeficient("zero column in input")
    while True:
        sub = M[:, keep]
        if sub.shape[1] == 0:
            return np.zeros((d, 0)), np.zeros((0, k))
        Q, R = np.linalg.qr(sub, mode="reduced")
        m = min(sub.shape)
        bad = np.abs(np.diag(R)) < tol * norms[keep][:m]
        if bad.any():
            if not drop_dependent:
                j = int(keep[np.flatnonzero(bad)[0]])
                raise RankDeficient(f"column {j} is numerically dependent on the previous ones")
            keep = np.concatenate([keep[:m][~bad], keep[m:]])
            continue
        # columns beyond d are dependent by counting
        keep = keep[:m]
        if sub.shape[1] > d:
            R = R[:, :m]
        break
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    Q = Q * signs
    if keep.size == k:
        R = R * signs[:, None]
    else:
        R = Q.T @ M
    return Q, R


def sign_normalize(U: np.ndarray, V: np.ndarray | None = None, tol: float = 1e-12):
    """Flip column signs so the first significant entry of each column of ``U`` is positive.

    ``V`` (the paired right factor) receives the same flips.
    """
    U = U.copy()
    V = None if V is None else V.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        scale = np.max(np.abs(col)) if col.size else 0.0
        idx = np.flatnonzero(np.abs(col) > tol * max(scale, 1e-300))
        if idx.size and col[idx[0]] < 0:
            U[:, j] = -col
            if V is not None:
                V[:, j] = -V[:, j]
    return U, V


def truncated_svd(M: np.ndarray, rank: int) -> TruncatedFactors:
    """Best rank-``rank`` approximation of ``M`` in the Frobenius norm."""
    M = np.asarray(M, dtype=float)
    if not 1 <= rank <= min(M.shape):
        raise ValueError(f"rank {rank} outside [1, {min(M.shape)}]")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    U, V = sign_normalize(U[:, :rank], Vt[:rank].T)
    return TruncatedFactors(U, s[:rank].copy(), V)


def adaptive_rank(singular_values, threshold: float, min_rank: int) -> int:
    """Smallest rank ``R >= min_rank`` whose discarded energy is at most ``threshold**2``.

    The discarded energy of rank ``R`` is ``sum(singular_values[R:]**2)``. The
    full length always satisfies the bound, so the result never exceeds
    ``len(singular_values)``.
    """
    s = np.asarray(singular_values, dtype=float)
    n = s.size
    if n == 0:
        return 0
    # tail[R] = sum_{j >= R} s_j^2 for R = 0..n
    tail = np.concatenate([np.cumsum((s**2)[::-1])[::-1], [0.0]])
    lo = min(max(min_rank, 0), n)
    ok = np.flatnonzero(tail[lo:] <= threshold**2)
    return lo + int(ok[0])


def _cholesky(M: np.ndarray):
    if not np.all(np.isfinite(M)):
        raise NonFinite("innovation covariance contains NaN or Inf")
    try:
        return sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotSPD(f"innovation covariance not SPD: {exc}") from None


def factored_gain(left: np.ndarray, B: np.ndarray, gamma: CovarianceFactor,
                  dt: float = 1.0) -> np.ndarray:
    """Return ``left @ B.T @ inv(Gamma + dt * B @ B.T)``.

    This is the Kalman gain for a covariance ``C C^T`` written through its
    factor: with ``left = C_full`` and ``B = H C_state``. The inner matrix is
    never inverted explicitly; depending on which side is smaller the solve
    is done in observation space (``k x k``) or in factor space (``q x q``).
    """
    k, q = B.shape
    if q == 0:
        return np.zeros((left.shape[0], k))
    if k <= q:
        G = gamma.dense() + dt * (B @ B.T)
        cf = _cholesky(G)
        W = sla.cho_solve(cf, B)  # G^{-1} B
        return left @ W.T
    GiB = gamma.solve(B)  # Gamma^{-1} B
    inner = np.eye(q) + dt * (B.T @ GiB)
    cf = _cholesky(inner)
    return left @ sla.cho_solve(cf, GiB.T)


def factored_gain_apply(left: np.ndarray, B: np.ndarray, gamma: CovarianceFactor,
                        rhs: np.ndarray, dt: float = 1.0) -> np.ndarray:
    """Apply the gain of :func:`factored_gain` to ``rhs`` without forming it.

    Returns ``left @ (B.T @ inv(Gamma + dt B B^T) @ rhs)``; the product with
    ``left`` is done last so the cost is linear in ``left.shape[0]``.
    """
    k, q = B.shape
    if q == 0:
        return np.zeros((left.shape[0],) + rhs.shape[1:])
    if k <= q:
        G = gamma.dense() + dt * (B @ B.T)
        cf = _cholesky(G)
        coef = B.T @ sla.cho_solve(cf, rhs)
    else:
        GiB = gamma.solve(B)
        inner = np.eye(q) + dt * (B.T @ GiB)
        cf = _cholesky(inner)
        coef = sla.cho_solve(cf, GiB.T @ rhs)
    return left @ coef


def _psd_sqrt(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def reduced_gain(P_Y: np.ndarray, H_U, Gamma, dt: float) -> np.ndarray:
    """Gain in the reduced coordinates, ``P_Y H_U^T (Gamma + dt H_U P_Y H_U^T)^{-1}``.

    ``Gamma`` may be a matrix or a :class:`CovarianceFactor`. ``P_Y`` only
    needs to be positive semi-definite.
    """
    gamma = Gamma if isinstance(Gamma, CovarianceFactor) else CovarianceFactor(Gamma)
    P_Y = np.atleast_2d(np.asarray(P_Y, dtype=float))
    H_U = H_U.toarray() if sp.issparse(H_U) else np.atleast_2d(np.asarray(H_U, dtype=float))
    C = _psd_sqrt(P_Y)
    return factored_gain(C, H_U @ C, gamma, dt)
