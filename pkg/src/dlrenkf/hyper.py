"""DEIM index selection and CUR approximation of the drift matrix.

The low-rank forecast needs the drift of every particle only through a few
projections. With hyper-reduction the ``d x P`` drift matrix is replaced by a
CUR surrogate built from ``2r`` full columns (particles) and ``r`` full rows
(state entries), so the number of drift entries evaluated per step is
``d * 2r + r * P`` instead of ``d * P``.

Indices are chosen in three stages:

1. ``r`` particles from DEIM on an orthonormal basis of the stochastic modes;
2. ``r`` rows from DEIM on the drift evaluated at those particles;
3. ``r`` further particles from DEIM on the drift rows (oversampling), skipping
   the particles already chosen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SingularInterpolation
from .lowrank import orthonormalize

__all__ = ["CurSelection", "deim_select", "select_cur_indices", "cur_approximate", "CurFactors"]

_PINV_RTOL = 1e-12
_DEP_TOL = 1e-12
_TIE_RTOL = 1e-12


@dataclass
class CurSelection:
    """Selected rows ``sigma`` and columns ``varsigma`` of a drift matrix.

    ``columns`` (``d x m``) and ``rows`` (``n x P``) cache the drift values
    evaluated during selection so they are not computed twice.
    """

    row_indices: np.ndarray
    col_indices: np.ndarray
    columns: np.ndarray | None = field(default=None, repr=False)
    rows: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.row_indices = np.asarray(self.row_indices, dtype=int)
        self.col_indices = np.asarray(self.col_indices, dtype=int)
        for name, idx in (("row", self.row_indices), ("column", self.col_indices)):
            if np.unique(idx).size != idx.size:
                raise ValueError(f"repeated {name} index")
            if idx.size and idx.min() < 0:
                raise ValueError(f"negative {name} index")

    @property
    def cross(self) -> np.ndarray:
        """Intersection block ``P_sigma f P_varsigma^T`` taken from the cached rows."""
        return self.rows[:, self.col_indices]


@dataclass(frozen=True)
class CurFactors:
    """Factored CUR surrogate ``left @ right`` of a ``d x P`` matrix."""

    left: np.ndarray
    right: np.ndarray

    @property
    def shape(self):
        return (self.left.shape[0], self.right.shape[1])

    def __matmul__(self, other):
        return self.left @ (self.right @ other)

    def rmatmul(self, other):
        """``other @ (left @ right)`` evaluated in factored order."""
        return (other @ self.left) @ self.right

    def dense(self) -> np.ndarray:
        return self.left @ self.right

    def column_mean(self) -> np.ndarray:
        return self.left @ self.right.mean(axis=1)


def deim_select(Q: np.ndarray, exclude=None) -> np.ndarray:
    """Greedy DEIM interpolation indices for the columns of ``Q``.

    Parameters
    ----------
    Q : ndarray, shape (n, m)
        Linearly independent columns, ``m <= n``.
    exclude : array_like of int, optional
        Indices that may not be selected.

    Returns
    -------
    ndarray of int, shape (m,)
        Distinct indices; argmax ties (up to a relative ``1e-12``) resolve
        to the lowest index.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[:, None]
    n, m = Q.shape
    banned = np.zeros(n, dtype=bool)
    if exclude is not None:
        banned[np.asarray(exclude, dtype=int)] = True
    if m > n - banned.sum():
        raise ValueError("not enough admissible indices")
    idx: list[int] = []
    for j in range(m):
        if j == 0:
            r = Q[:, 0]
        else:
            block = Q[np.ix_(idx, range(j))]
            if np.linalg.cond(block) > 1e14:
                raise SingularInterpolation(f"interpolation block singular at step {j}")
            c = np.linalg.solve(block, Q[idx, j])
            r = Q[:, j] - Q[:, :j] @ c
        score = np.abs(r)
        score[banned] = -1.0
        top = score.max()
        # rounding-level near ties count as ties so the lowest index wins
        p = int(np.flatnonzero(score >= top * (1.0 - _TIE_RTOL))[0])
        if score[p] <= 0.0:
            raise SingularInterpolation(f"zero residual at step {j}")
        idx.append(p)
        banned[p] = True
    return np.asarray(idx, dtype=int)


def select_cur_indices(Y: np.ndarray, eval_columns: Callable[[np.ndarray], np.ndarray],
                       eval_rows: Callable[[np.ndarray], np.ndarray]) -> CurSelection:
    """Three-stage selection of ``r`` rows and ``2r`` columns.

    Parameters
    ----------
    Y : ndarray, shape (P, r)
        Right factor whose span guides the first particle choice.
    eval_columns : callable
        ``eval_columns(cols)`` returns the drift at particles ``cols`` as a
        ``d x len(cols)`` array.
    eval_rows : callable
        ``eval_rows(rows)`` returns the drift rows ``rows`` for every
        particle as a ``len(rows) x P`` array.

    Notes
    -----
    Linearly dependent directions are dropped before each DEIM call, so a
    drift of rank below ``r`` yields correspondingly fewer indices.
    """
    P = Y.shape[0]
    r = Y.shape[1]
    if 2 * r > P:
        raise ValueError(f"need 2r <= P, got r={r}, P={P}")
    QY, _ = orthonormalize(Y, tol=_DEP_TOL, drop_dependent=True)
    first = deim_select(QY)
    C1 = eval_columns(first)
    QC, _ = orthonormalize(C1, tol=_DEP_TOL, drop_dependent=True)
    rows_idx = deim_select(QC)
    Rrows = eval_rows(rows_idx)
    Qrows, _ = orthonormalize(Rrows.T, tol=_DEP_TOL, drop_dependent=True)
    Qrows = Qrows[:, : len(rows_idx)]
    extra = deim_select(Qrows, exclude=first)
    C2 = eval_columns(extra)
    cols = np.concatenate([first, extra])
    return CurSelection(rows_idx, cols, np.hstack([C1, C2]), Rrows)


def cur_approximate(C: np.ndarray, Ucross: np.ndarray, Rrows: np.ndarray) -> CurFactors:
    """Factored CUR surrogate ``C @ pinv(Ucross) @ Rrows``.

    The pseudoinverse discards singular values below ``1e-12`` times the
    largest one. The returned left factor is ``C @ pinv(Ucross)`` (``d x n``)
    and the right factor is ``Rrows`` (``n x P``).
    """
    n, m = Ucross.shape
    if C.shape[1] != m or Rrows.shape[0] != n:
        raise ValueError("inconsistent CUR block shapes")
    if n == 0 or m == 0:
        return CurFactors(np.zeros((C.shape[0], 0)), np.zeros((0, Rrows.shape[1])))
    U, s, Vt = np.linalg.svd(Ucross, full_matrices=False)
    keep = s > _PINV_RTOL * s[0] if s.size and s[0] > 0 else np.zeros(s.size, dtype=bool)
    pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return CurFactors(C @ pinv, Rrows)
