"""Dynamical low-rank ensemble Kalman filters.

The ensemble is stored as a mean plus a rank-``R`` zero-mean part,

    X_p = m + U Y[p]^T,

with orthonormal deterministic modes ``U`` (``d x R``) and zero-column-mean
stochastic modes ``Y`` (``P x R``). When the state consists of several
physical variables ``U`` is block diagonal, one block per variable, and
each block is truncated on its own.

The forecast is a Basis-Update & Galerkin (BUG) step in which the mean is
carried as an extra rank-one term ``[m, U] [1, Y]^T``. The analysis acts only
on ``m``, ``Y`` and the parameters; ``U`` is left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .enkf import FilterVariant, FullEnsemble, ObservationModel, _generator
from .errors import NonFinite
from .hyper import CurFactors, cur_approximate, select_cur_indices
from .lowrank import RankPolicy, factored_gain_apply, orthonormalize, sign_normalize
from .models.base import ForwardModel

__all__ = [
    "BlockInfo",
    "DlrEnsemble",
    "RankRecord",
    "reconstruct",
    "bug_forecast",
    "truncate",
    "dlr_analyze",
    "dlr_step",
]

_DEP_TOL = 1e-12


@dataclass(frozen=True)
class BlockInfo:
    """One variable block: state rows ``rows`` represented with ``rank`` modes."""

    name: str
    rows: slice
    rank: int

    @property
    def height(self) -> int:
        return self.rows.stop - self.rows.start


@dataclass(frozen=True)
class RankRecord:
    """Outcome of truncating one block in one step.

    ``singular_values`` and ``discarded`` use the sample-mean normalisation
    of the stochastic modes (``Y^T Y / P = I``), i.e. the Euclidean singular
    values of the anomalies divided by ``sqrt(P)``. The adaptive threshold is
    compared against the same quantities.
    """

    step: int | None
    block: str
    rank: int
    discarded: float
    singular_values: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DlrEnsemble:
    """Low-rank ensemble ``mean + det_modes @ stoch_modes.T`` with parameters.

    ``det_modes`` is stored as a dense ``d x sum(R_b)`` matrix that is zero
    outside its diagonal blocks; ``block_layout`` records the row range and
    rank of each block.
    """

    mean: np.ndarray
    det_modes: np.ndarray
    stoch_modes: np.ndarray
    params: np.ndarray
    block_layout: tuple[BlockInfo, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        U = np.atleast_2d(np.asarray(self.det_modes, dtype=float))
        Y = np.asarray(self.stoch_modes, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        params = np.asarray(self.params, dtype=float)
        if params.ndim == 1:
            params = params.reshape(-1, Y.shape[0]) if params.size else np.zeros((0, Y.shape[0]))
        if U.shape[0] != mean.size or U.shape[1] != Y.shape[1]:
            raise ValueError("inconsistent low-rank factor shapes")
        if params.shape[1] != Y.shape[0]:
            raise ValueError("params must have one column per particle")
        layout = tuple(self.block_layout) or (BlockInfo("x", slice(0, mean.size), U.shape[1]),)
        if sum(b.rank for b in layout) != U.shape[1]:
            raise ValueError("block ranks do not add up to the number of modes")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "det_modes", U)
        object.__setattr__(self, "stoch_modes", Y)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "block_layout", layout)

    @property
    def particle_count(self) -> int:
        return self.stoch_modes.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def rank(self) -> int:
        return self.det_modes.shape[1]

    @property
    def ranks(self) -> dict[str, int]:
        return {b.name: b.rank for b in self.block_layout}

    def mode_slices(self) -> list[slice]:
        """Column range of each block inside ``det_modes``."""
        out, start = [], 0
        for b in self.block_layout:
            out.append(slice(start, start + b.rank))
            start += b.rank
        return out

    @classmethod
    def from_full(cls, ens: FullEnsemble, ranks, blocks=None) -> "DlrEnsemble":
        """Truncate a full ensemble to the given rank(s) per block.

        ``ranks`` is an int (same rank for every block) or a sequence with one
        entry per block. A block whose anomalies vanish gets canonical unit
        vectors as modes and zero stochastic modes.
        """
        X = ens.states
        d, P = X.shape
        blocks = blocks or [("x", slice(0, d))]
        if np.isscalar(ranks):
            ranks = [int(ranks)] * len(blocks)
        m = X.mean(axis=1)
        A = X - m[:, None]
        Ublocks, Yblocks, layout = [], [], []
        for (name, rows), r in zip(blocks, ranks):
            height = rows.stop - rows.start
            r = max(1, min(int(r), height, P))
            W, s, Vt = np.linalg.svd(A[rows], full_matrices=False)
            Ub, Vb = sign_normalize(W[:, :r], Vt[:r].T)
            Ublocks.append((rows, Ub))
            Yblocks.append(Vb * s[:r])
            layout.append(BlockInfo(name, rows, r))
        U = np.zeros((d, sum(b.rank for b in layout)))
        col = 0
        for rows, Ub in Ublocks:
            U[rows, col:col + Ub.shape[1]] = Ub
            col += Ub.shape[1]
        Y = np.hstack(Yblocks)
        Y = Y - Y.mean(axis=0)
        return cls(m, U, Y, ens.params.copy(), tuple(layout))

    def with_factors(self, **kw) -> "DlrEnsemble":
        return replace(self, **kw)


def reconstruct(dlr: DlrEnsemble) -> FullEnsemble:
    """Full particle matrix ``mean + U Y^T``."""
    X = dlr.mean[:, None] + dlr.det_modes @ dlr.stoch_modes.T
    return FullEnsemble(X, dlr.params)


def truncate(U_bar: np.ndarray, S_tilde: np.ndarray, Y_bar: np.ndarray, block_layout,
             policy: RankPolicy, step: int | None = None):
    """Per-block truncation of the zero-mean part ``U_bar S_tilde Y_bar^T``.

    For each block ``b`` the block rows of ``U_bar`` are QR-factorised,
    ``U_b = Q_b R_b``, and ``R_b S_tilde = V Sigma W^T`` is truncated to the
    rank chosen by ``policy``. The new modes are ``Q_b V_r`` and
    ``Y_bar W_r Sigma_r``.

    Returns
    -------
    det_modes : ndarray, shape (d, sum R_b)
    stoch_modes : ndarray, shape (P, sum R_b)
    layout : tuple of BlockInfo
    report : list of RankRecord
    """
    d = U_bar.shape[0]
    P = Y_bar.shape[0]
    Ublocks, Yblocks, layout, report = [], [], [], []
    for b in block_layout:
        Ub_rows = U_bar[b.rows]
        Qb, Rb = np.linalg.qr(Ub_rows, mode="reduced")
        core = Rb @ S_tilde
        V, s, Wt = np.linalg.svd(core, full_matrices=False)
        cap = min(s.size, b.height, max(P - 1, 1))
        s_mean = s / np.sqrt(P)  # singular values w.r.t. Y^T Y / P = I
        r = policy.choose(s_mean[:cap], b.rank, step)
        r = max(1, min(r, cap)) if cap else 0
        Vr, Wr = sign_normalize(V[:, :r], Wt[:r].T)
        Ublocks.append((b.rows, Qb @ Vr))
        Yblocks.append(Y_bar @ (Wr * s[:r]))
        discarded = float(np.sum(s_mean[r:] ** 2))
        report.append(RankRecord(step, b.name, r, discarded, s_mean))
        layout.append(BlockInfo(b.name, b.rows, r))
    U = np.zeros((d, sum(x.rank for x in layout)))
    col = 0
    for rows, Ub in Ublocks:
        U[rows, col:col + Ub.shape[1]] = Ub
        col += Ub.shape[1]
    Y = np.hstack(Yblocks) if Yblocks else np.zeros((P, 0))
    return U, Y, tuple(layout), report


def _drift_surrogate(model, V_hat, Z_hat, params, t, hyper):
    """Drift of the reconstructed particles, exact or as a CUR surrogate."""
    if not hyper:
        X = V_hat @ Z_hat.T
        F = model.drift(X, params, t)
        if not np.all(np.isfinite(F)):
            raise NonFinite("drift returned non-finite values")
        return F, None

    def eval_columns(cols):
        return model.drift(V_hat @ Z_hat[cols].T, params[:, cols], t)

    def eval_rows(rows):
        support = model.row_support(rows)
        Xs = V_hat[support] @ Z_hat.T
        return model.drift_rows(rows, Xs, support, params, t)

    sel = select_cur_indices(Z_hat, eval_columns, eval_rows)
    if not (np.all(np.isfinite(sel.columns)) and np.all(np.isfinite(sel.rows))):
        raise NonFinite("drift returned non-finite values")
    return cur_approximate(sel.columns, sel.cross, sel.rows), sel


class _Matrix:
    """Uniform products for a dense drift matrix or its CUR factors."""

    def __init__(self, F):
        self.F = F

    def right(self, B):  # F @ B
        return self.F @ B

    def left(self, A):  # A @ F
        return self.F.rmatmul(A) if isinstance(self.F, CurFactors) else A @ self.F

    def col_mean(self):
        return self.F.column_mean() if isinstance(self.F, CurFactors) else self.F.mean(axis=1)

    def centered(self, mean=None):
        """The drift minus its column mean, formed explicitly."""
        if isinstance(self.F, CurFactors):
            right = self.F.right
            return _Matrix(CurFactors(self.F.left, right - right.mean(axis=1, keepdims=True)))
        mean = self.col_mean() if mean is None else mean
        return _Matrix(self.F - mean[:, None])


def _is_degenerate(dlr: DlrEnsemble) -> bool:
    return not np.any(dlr.stoch_modes)


def bug_forecast(dlr: DlrEnsemble, model: ForwardModel, dt: float, policy: RankPolicy,
                 hyper: bool = False, t: float = 0.0, step: int | None = None,
                 mean_in_basis: bool = True, report: list | None = None) -> DlrEnsemble:
    """One BUG step of the low-rank ensemble over ``[t, t + dt]``.

    Parameters
    ----------
    dlr : DlrEnsemble
    model : ForwardModel
    dt : float
    policy : RankPolicy
        Rank selection for the truncation of each block.
    hyper : bool
        Replace the drift matrix by a DEIM/CUR surrogate.
    step : int, optional
        Step index, used for the adaptive warm start and the rank report.
    mean_in_basis : bool
        Treat the mean as the extra rank-one term ``[m, U] [1, Y]^T`` when
        enriching the bases (default), so the new left basis also contains
        ``m`` and the mean drift, and the right basis the directions
        ``F^T m``. If False only the anomaly directions are used. The mean
        itself always advances by the sample mean of the drift.
    report : list, optional
        Receives one :class:`RankRecord` per block.

    Notes
    -----
    An ensemble whose stochastic modes are all zero (identical particles)
    carries no directions for the basis update. It is advanced by one
    full-order Euler step and re-factorised from the result.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    P = dlr.particle_count
    if _is_degenerate(dlr):
        return _bootstrap(dlr, model, dt, policy, t, step, report)

    m, U, Y, Theta = dlr.mean, dlr.det_modes, dlr.stoch_modes, dlr.params
    ones = np.ones((P, 1))
    V_hat = np.hstack([m[:, None], U])
    Z_hat = np.hstack([ones, Y])
    F, _ = _drift_surrogate(model, V_hat, Z_hat, Theta, t, hyper)
    Fm = _Matrix(F)

    # The algebra is written with the centred drift F* = F - Fbar 1^T. For
    # zero-mean Y, span([V, F Z]) = span([m, U, Fbar, F* Y]) and the zero-mean
    # part of span([Z, F^T V]) is span([Y, F*^T V]). Forming F* explicitly
    # keeps round-off of size eps * |m| out of the modes.
    Fbar = Fm.col_mean()
    Fc = Fm.centered(Fbar)
    new_mean = m + dt * Fbar
    if mean_in_basis:
        U_cols = [V_hat, Fbar[:, None], Fc.right(Y)]
        Y_cols = [Y, Fc.left(V_hat.T).T]
    else:
        U_cols = [U, Fc.right(Y)]
        Y_cols = [Y, Fc.left(U.T).T]
    U_bar, _ = orthonormalize(np.hstack(U_cols), tol=_DEP_TOL, drop_dependent=True)
    Y_rest, _ = orthonormalize(np.hstack(Y_cols), tol=_DEP_TOL, drop_dependent=True)
    Y_rest, _ = orthonormalize(Y_rest - Y_rest.mean(axis=0), tol=_DEP_TOL, drop_dependent=True)
    # Galerkin coefficients of the zero-mean part; the mean column of S1 is
    # exactly m + dt Fbar because both lie in span(U_bar).
    S_tilde = (U_bar.T @ U) @ (Y.T @ Y_rest) + dt * (Fc.left(U_bar.T) @ Y_rest)

    Unew, Ynew, layout, rep = truncate(U_bar, S_tilde, Y_rest, dlr.block_layout, policy, step)
    if report is not None:
        report.extend(rep)
    Ynew = Ynew - Ynew.mean(axis=0)
    out = DlrEnsemble(new_mean, Unew, Ynew, Theta, layout)
    if not (np.all(np.isfinite(out.mean)) and np.all(np.isfinite(out.stoch_modes))):
        raise NonFinite("low-rank forecast produced non-finite values", step)
    return out


def _bootstrap(dlr, model, dt, policy, t, step, report):
    X = reconstruct(dlr)
    F = model.drift(X.states, X.params, t)
    if not np.all(np.isfinite(F)):
        raise NonFinite("drift returned non-finite values", step)
    full = FullEnsemble(X.states + dt * F, X.params)
    blocks = [(b.name, b.rows) for b in dlr.block_layout]
    ranks = [b.rank for b in dlr.block_layout]
    out = DlrEnsemble.from_full(full, ranks, blocks)
    if report is not None:
        A = full.states - out.mean[:, None]
        for b in out.block_layout:
            s = np.linalg.svd(A[b.rows], compute_uv=False) / np.sqrt(A.shape[1])
            report.append(RankRecord(step, b.name, b.rank, float(np.sum(s[b.rank:] ** 2)), s))
    return out


def dlr_analyze(dlr: DlrEnsemble, obs: ObservationModel, variant: FilterVariant, dZ, dt: float,
                rng=None, noise: np.ndarray | None = None) -> DlrEnsemble:
    """Analysis restricted to the span of the deterministic modes.

    The innovation of particle ``p`` is the one of the full-order filter,
    evaluated on the low-rank reconstruction. Its sample mean updates the
    mean (including the sample mean of the perturbation noise) and its
    anomaly updates the stochastic modes through the reduced gain, so the
    stochastic modes stay zero-mean and ``det_modes`` is unchanged.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    P = dlr.particle_count
    obs_t = obs.rescaled(dt)
    y = np.asarray(dZ, dtype=float) / dt
    U, Y, Theta, m = dlr.det_modes, dlr.stoch_modes, dlr.params, dlr.mean
    H_U = np.asarray(obs.H @ U)
    Hm = obs.apply(m)

    xi = None
    if variant.stochastic:
        xi = noise if noise is not None else _generator(rng).standard_normal((obs.k, P))

    kappa, eta = variant.kappa, variant.eta
    c_state = 0.5 * (1 + kappa)
    c_mean = 0.5 * eta * (1 - kappa)
    innov = (y - (c_state + c_mean) * Hm)[:, None] - c_state * (H_U @ Y.T)
    if xi is not None:
        innov = innov - obs_t.gamma.sqrt_mul(xi)

    # Reduced factorisation of the anomalies: Y = Q_Y R_Y, so that
    # P_Y = R_Y^T R_Y / (P - 1) and the gain only involves R x R blocks.
    Q_Y, R_Y = np.linalg.qr(Y, mode="reduced")
    scale = 1.0 / np.sqrt(P - 1)
    Ts = Theta - Theta.mean(axis=1)[:, None]
    left = np.vstack([R_Y.T, Ts @ Q_Y]) * scale
    B = (H_U @ R_Y.T) * scale
    coef = factored_gain_apply(left, B, obs_t.gamma, innov)

    R = U.shape[1]
    dY = coef[:R]
    dY_mean = dY.mean(axis=1)
    new_mean = m + U @ dY_mean
    new_Y = Y + (dY - dY_mean[:, None]).T
    new_params = Theta + coef[R:]
    return DlrEnsemble(new_mean, U, new_Y, new_params, dlr.block_layout)


def dlr_step(dlr: DlrEnsemble, model: ForwardModel, obs: ObservationModel, variant: FilterVariant,
             dZ, dt: float, policy: RankPolicy, hyper: bool = False, rng=None, noise=None,
             t: float = 0.0, step: int | None = None, report: list | None = None,
             mean_in_basis: bool = True) -> DlrEnsemble:
    """BUG forecast from ``t`` to ``t + dt`` followed by the reduced analysis."""
    ens_f = bug_forecast(dlr, model, dt, policy, hyper=hyper, t=t, step=step,
                         mean_in_basis=mean_in_basis, report=report)
    return dlr_analyze(ens_f, obs, variant, dZ, dt, rng=rng, noise=noise)
