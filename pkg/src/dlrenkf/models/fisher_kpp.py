"""Fisher-KPP reaction-diffusion on a quarter annulus with a random diffusion field.

    du/dt = div(nu(x, theta) grad u) + 75 u (1 - u)   in D,
    nu grad u . n = 0                                  on the boundary,

with D = {1 <= |x| <= 1.5, x1 >= 0, x2 >= 0}. The diffusion coefficient is a
truncated Karhunen-Loeve-type expansion around sqrt(2) whose modes are the
leading eigenvectors of an exponential covariance on the grid nodes.

Space is discretised with a vertex-centred finite-volume scheme on a
structured polar grid: each node owns a dual cell (half cells on the
boundary), fluxes are exchanged across dual faces with the arithmetic mean
of the nodal diffusion, and boundary faces carry no flux. The cell areas
double as quadrature weights, so the discrete operator conserves mass and
annihilates constants exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import NegativeDiffusion
from .base import ForwardModel

__all__ = [
    "PolarGrid",
    "KlField",
    "FisherKPP",
    "build_kl_field",
    "nu",
    "initial_condition",
    "partial_observation_matrix",
    "THETA_TRUE",
    "REACTION",
    "T_FINAL",
    "DT",
]

THETA_TRUE = np.array([0.271, 0.266, 0.504, -0.111, -0.014, -0.086])
REACTION = 75.0
T_FINAL = 0.154
DT = 4.4e-5
NU_BASE = np.sqrt(2.0)


@dataclass(frozen=True)
class PolarGrid:
    """Tensor grid of ``n_r`` radii in ``[r_min, r_max]`` and ``n_alpha`` angles in ``[0, alpha_max]``.

    Nodes are numbered radius-major: node ``i * n_alpha + j`` sits at
    radius ``r[i]`` and angle ``alpha[j]``.
    """

    n_r: int = 18
    n_alpha: int = 30
    r_min: float = 1.0
    r_max: float = 1.5
    alpha_max: float = np.pi / 2

    def __post_init__(self):
        if self.n_r < 2 or self.n_alpha < 2:
            raise ValueError("need at least two nodes per direction")

    @property
    def dim(self) -> int:
        return self.n_r * self.n_alpha

    @property
    def r(self) -> np.ndarray:
        return np.linspace(self.r_min, self.r_max, self.n_r)

    @property
    def alpha(self) -> np.ndarray:
        return np.linspace(0.0, self.alpha_max, self.n_alpha)

    @property
    def dr(self) -> float:
        return (self.r_max - self.r_min) / (self.n_r - 1)

    @property
    def dalpha(self) -> float:
        return self.alpha_max / (self.n_alpha - 1)

    def polar(self):
        """Radius and angle of every node, each of length ``dim``."""
        R, A = np.meshgrid(self.r, self.alpha, indexing="ij")
        return R.ravel(), A.ravel()

    def coords(self) -> np.ndarray:
        """Cartesian node coordinates, shape ``(dim, 2)``."""
        rr, aa = self.polar()
        return np.column_stack([rr * np.cos(aa), rr * np.sin(aa)])

    def _dual_r(self):
        r = self.r
        lo = np.concatenate([[r[0]], 0.5 * (r[:-1] + r[1:])])
        hi = np.concatenate([0.5 * (r[:-1] + r[1:]), [r[-1]]])
        return lo, hi

    def _dual_alpha_width(self):
        w = np.full(self.n_alpha, self.dalpha)
        w[[0, -1]] *= 0.5
        return w

    def cell_areas(self) -> np.ndarray:
        """Area of each dual cell; these are also the quadrature weights."""
        lo, hi = self._dual_r()
        radial = 0.5 * (hi**2 - lo**2)
        return np.outer(radial, self._dual_alpha_width()).ravel()

    def faces(self):
        """Interior dual faces as ``(left node, right node, geometric weight)``.

        The weight multiplies ``nu * (u_right - u_left)`` to give the flux
        through the face.
        """
        nr, na = self.n_r, self.n_alpha
        idx = np.arange(self.dim).reshape(nr, na)
        r = self.r
        # radial faces at r_{i+1/2}, spanning the dual angular width
        r_half = 0.5 * (r[:-1] + r[1:])
        w_rad = np.outer(r_half / self.dr, self._dual_alpha_width())
        a_rad, b_rad = idx[:-1, :].ravel(), idx[1:, :].ravel()
        # angular faces at alpha_{j+1/2}: integral of dr / r over the dual radial width
        lo, hi = self._dual_r()
        w_ang = np.repeat((np.log(hi / lo) / self.dalpha)[:, None], na - 1, axis=1)
        a_ang, b_ang = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        left = np.concatenate([a_rad, a_ang])
        right = np.concatenate([b_rad, b_ang])
        weight = np.concatenate([w_rad.ravel(), w_ang.ravel()])
        return left, right, weight

    def contains(self, pts: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        rad = np.hypot(pts[:, 0], pts[:, 1])
        return ((rad >= self.r_min - tol) & (rad <= self.r_max + tol)
                & (pts[:, 0] >= -tol) & (pts[:, 1] >= -tol))


@dataclass(frozen=True)
class KlField:
    """Leading eigenpairs of the nodal covariance and the positivity bound."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    base: float = NU_BASE

    @property
    def n_params(self) -> int:
        return self.eigenvalues.size

    @property
    def modes(self) -> np.ndarray:
        """``sqrt(lambda_i) xi_i`` as columns, shape ``(d, n_theta)``."""
        return self.eigenvectors * np.sqrt(self.eigenvalues)

    @property
    def hypercube_bound(self) -> float:
        """Largest ``max_i |theta_i|`` that guarantees ``nu >= 0`` everywhere."""
        return self.base / np.sum(np.max(np.abs(self.modes), axis=0))

    def in_hypercube(self, theta) -> bool:
        return bool(np.max(np.abs(theta)) <= self.hypercube_bound)


def build_kl_field(grid_or_coords, a: float = 1.0, b: float = 1.0, c: float = 0.1,
                   n_theta: int = 6) -> KlField:
    """Eigen-decomposition of ``C_ij = a exp(-|x_i - x_j| / (2 b^2)) + c delta_ij``.

    Eigenvectors have unit Euclidean norm and the first entry with modulus
    above ``1e-8`` is positive.
    """
    pts = grid_or_coords.coords() if isinstance(grid_or_coords, PolarGrid) else np.asarray(grid_or_coords, float)
    d = pts.shape[0]
    if n_theta > d:
        raise ValueError("n_theta exceeds the number of nodes")
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    C = a * np.exp(-dist / (2.0 * b**2)) + c * np.eye(d)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1][:n_theta]
    lam, vec = w[order], V[:, order]
    for j in range(n_theta):
        first = np.flatnonzero(np.abs(vec[:, j]) > 1e-8)
        if first.size and vec[first[0], j] < 0:
            vec[:, j] = -vec[:, j]
    return KlField(lam, vec)


def nu(field: KlField, theta) -> np.ndarray:
    """Diffusion values at the nodes; ``theta`` may be a vector or ``n_theta x P``."""
    theta = np.asarray(theta, dtype=float)
    return field.base + field.modes @ theta


def initial_condition(grid: PolarGrid) -> np.ndarray:
    x = grid.coords()
    return np.exp(-(x[:, 0] - 1.5) ** 2 - 50.0 * x[:, 1] ** 2)


def partial_observation_matrix(grid: PolarGrid, width: float = 0.05, scale: float = 30.0,
                               radii=(1.0, 1.5),
                               angles=(np.pi / 2, np.pi / 3, np.pi / 4, np.pi / 6)) -> np.ndarray:
    """Eight Gaussian-weighted local averages, radius-major then angle as listed."""
    pts = grid.coords()
    wts = grid.cell_areas()
    rows = []
    for rho in radii:
        for alpha in angles:
            center = np.array([rho * np.cos(alpha), rho * np.sin(alpha)])
            dist2 = np.sum((pts - center) ** 2, axis=1)
            rows.append(scale / (width * np.pi) * np.exp(-dist2 / (2 * width**2)) * wts)
    return np.array(rows)


class FisherKPP(ForwardModel):
    """Drift of the discretised Fisher-KPP equation for a batch of particles.

    Parameters
    ----------
    grid : PolarGrid
    field : KlField, optional
        Built from ``grid`` with default hyperparameters when omitted.
    reaction : float
    check_positivity : bool
        Raise :class:`NegativeDiffusion` when any nodal ``nu`` is negative.
    """

    def __init__(self, grid: PolarGrid | None = None, field: KlField | None = None,
                 reaction: float = REACTION, check_positivity: bool = True):
        self.grid = grid or PolarGrid()
        self.field = field or build_kl_field(self.grid)
        self.reaction = reaction
        self.check_positivity = check_positivity
        self.dim = self.grid.dim
        self.n_params = self.field.n_params
        self.areas = self.grid.cell_areas()
        left, right, weight = self.grid.faces()
        self._left, self._right, self._weight = left, right, weight
        nf = left.size
        self.D = sp.csr_matrix(
            (np.concatenate([-np.ones(nf), np.ones(nf)]),
             (np.tile(np.arange(nf), 2), np.concatenate([left, right]))),
            shape=(nf, self.dim))
        self.Dt = self.D.T.tocsr()
        self._modes = self.field.modes

    def nu(self, theta) -> np.ndarray:
        return nu(self.field, theta)

    def _check(self, nu_vals):
        if self.check_positivity and np.min(nu_vals) < 0:
            raise NegativeDiffusion(f"diffusion coefficient reached {np.min(nu_vals):.3e}")

    def diffusion(self, X, theta) -> np.ndarray:
        """``L_nu X`` for ``X`` of shape ``(d, P)`` and ``theta`` of shape ``(n_theta, P)``."""
        X = np.asarray(X, dtype=float)
        theta = np.asarray(theta, dtype=float).reshape(self.n_params, -1)
        nu_n = self.field.base + self._modes @ theta
        self._check(nu_n)
        nu_face = 0.5 * (nu_n[self._left] + nu_n[self._right])
        flux = nu_face * self._weight[:, None] * (self.D @ X)
        return -(self.Dt @ flux) / self.areas[:, None]

    def drift(self, X, theta, t=0.0):
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        theta = np.asarray(theta, dtype=float).reshape(self.n_params, -1)
        if theta.shape[1] == 1 and X.shape[1] > 1:
            theta = np.repeat(theta, X.shape[1], axis=1)
        F = self.diffusion(X, theta) + self.reaction * X * (1.0 - X)
        return F[:, 0] if squeeze else F

    def row_support(self, rows):
        rows = np.asarray(rows, dtype=int)
        faces = np.unique(self.Dt[rows].indices)
        return np.unique(np.concatenate([rows, self.D[faces].indices]))

    def drift_rows(self, rows, X_support, support, theta, t=0.0):
        rows = np.asarray(rows, dtype=int)
        support = np.asarray(support, dtype=int)
        theta = np.asarray(theta, dtype=float).reshape(self.n_params, -1)
        faces = np.unique(self.Dt[rows].indices)
        D_sub = self.D[faces][:, support]
        nu_s = self.field.base + self._modes[support] @ theta
        self._check(nu_s)
        ends = np.abs(D_sub)
        nu_face = 0.5 * (ends @ nu_s)
        flux = nu_face * self._weight[faces][:, None] * (D_sub @ X_support)
        diff = -(self.Dt[rows][:, faces] @ flux) / self.areas[rows][:, None]
        pos = np.searchsorted(support, rows)
        Xr = X_support[pos]
        return diff + self.reaction * Xr * (1.0 - Xr)
