"""Forward-model interface used by the filters.

A forward model is a drift ``f(X, theta, t)`` acting column-wise on a matrix
of particles. Models also describe how their state vector is split into
variable blocks (used for per-variable truncation) and how to evaluate a
subset of drift rows, which the hyper-reduction relies on.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ForwardModel:
    """Base class for drifts ``f: R^d x R^n_theta -> R^d``.

    Subclasses implement :meth:`drift`. The default row evaluation falls back
    to a full drift evaluation, which is correct but gives no savings;
    models with local stencils override :meth:`row_support` and
    :meth:`drift_rows`.
    """

    dim: int = 0
    n_params: int = 0

    @property
    def blocks(self) -> list[tuple[str, slice]]:
        return [("x", slice(0, self.dim))]

    def drift(self, X: np.ndarray, theta: np.ndarray, t: float = 0.0) -> np.ndarray:
        raise NotImplementedError

    def row_support(self, rows: np.ndarray) -> np.ndarray:
        """State rows needed to evaluate the drift at ``rows``."""
        return np.arange(self.dim)

    def drift_rows(self, rows, X_support, support, theta, t: float = 0.0) -> np.ndarray:
        """Drift restricted to ``rows``, given the state restricted to ``support``.

        ``support`` must be (a superset of) ``row_support(rows)`` and
        ``X_support`` holds the state at those rows for every particle.
        """
        X = np.zeros((self.dim, X_support.shape[1]))
        X[support] = X_support
        return self.drift(X, theta, t)[rows]


class LinearModel(ForwardModel):
    """Affine drift ``f(x, theta) = A x + B theta + c``."""

    def __init__(self, A, B=None, c=None):
        self.A = A if sp.issparse(A) else np.atleast_2d(np.asarray(A, dtype=float))
        self.dim = self.A.shape[0]
        self.B = None if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        self.n_params = 0 if self.B is None else self.B.shape[1]
        self.c = None if c is None else np.asarray(c, dtype=float)
        self._csr = sp.csr_matrix(self.A) if sp.issparse(self.A) else None

    def drift(self, X, theta=None, t=0.0):
        F = self.A @ X
        if self.B is not None:
            F = F + self.B @ theta
        if self.c is not None:
            F = F + self.c[:, None]
        return np.asarray(F)

    def row_support(self, rows):
        rows = np.asarray(rows)
        if self._csr is not None:
            return np.unique(self._csr[rows].indices)
        return np.unique(np.nonzero(self.A[rows])[1])

    def drift_rows(self, rows, X_support, support, theta, t=0.0):
        A_sub = self.A[np.asarray(rows)][:, support]
        F = A_sub @ X_support
        if self.B is not None:
            F = F + self.B[rows] @ theta
        if self.c is not None:
            F = F + self.c[rows][:, None]
        return np.asarray(F)


class FunctionModel(ForwardModel):
    """Wrap a plain callable ``fn(X, theta, t)`` with no row locality."""

    def __init__(self, fn, dim, n_params=0, blocks=None):
        self.fn = fn
        self.dim = dim
        self.n_params = n_params
        self._blocks = blocks

    @property
    def blocks(self):
        return self._blocks or [("x", slice(0, self.dim))]

    def drift(self, X, theta=None, t=0.0):
        return np.asarray(self.fn(X, theta, t), dtype=float)


class CountingModel(ForwardModel):
    """Instrumented wrapper counting evaluated drift entries."""

    def __init__(self, model: ForwardModel):
        self.model = model
        self.dim = model.dim
        self.n_params = model.n_params
        self.entries = 0

    @property
    def blocks(self):
        return self.model.blocks

    def drift(self, X, theta, t=0.0):
        self.entries += X.shape[0] * X.shape[1]
        return self.model.drift(X, theta, t)

    def row_support(self, rows):
        return self.model.row_support(rows)

    def drift_rows(self, rows, X_support, support, theta, t=0.0):
        self.entries += len(rows) * X_support.shape[1]
        return self.model.drift_rows(rows, X_support, support, theta, t)
