"""Full-order augmented-state Ensemble Kalman filters.

One assimilation step over ``[t0, t1]`` is an explicit Euler forecast of every
particle followed by a semi-implicit analysis. Parameters have no dynamics of
their own and are corrected through their sample cross-covariance with the
observed state.

Three analysis variants are supported, labelled by ``(kappa, eta)``:

======  =====  ===  ==========================================
name    kappa  eta  innovation of particle p
======  =====  ===  ==========================================
VEnKF   1      1    dZ - H x_p dt - Gamma^1/2 dV_p
DEnKF   0      1    dZ - H (x_p + m) dt / 2
SEnKF   1      0    dZ - H x_p dt
======  =====  ===  ==========================================

The sample covariance is never formed; all gains are applied through the
ensemble anomalies so that the cost stays linear in the state dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import NonFinite
from .lowrank import CovarianceFactor, factored_gain, factored_gain_apply
from .models.base import ForwardModel

__all__ = [
    "FullEnsemble",
    "FilterVariant",
    "ObservationModel",
    "NoiseStream",
    "sample_stats",
    "sample_covariance",
    "forecast",
    "kalman_gain",
    "analyze",
    "analyze_discrete",
    "step",
    "semi_implicit_equivalence_check",
]


@dataclass(frozen=True)
class FullEnsemble:
    """Particle cloud: ``states`` is ``d x P``, ``params`` is ``n_theta x P``."""

    states: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        params = np.asarray(self.params, dtype=float)
        if params.ndim == 1:
            params = params.reshape(-1, states.shape[1]) if params.size else np.zeros((0, states.shape[1]))
        if params.shape[1] != states.shape[1]:
            raise ValueError("states and params must have the same number of columns")
        if states.shape[1] < 2:
            raise ValueError("an ensemble needs at least two particles")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "params", params)

    @property
    def particle_count(self) -> int:
        return self.states.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[0]

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def augmented(self) -> np.ndarray:
        return np.vstack([self.states, self.params])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.states).all() and np.isfinite(self.params).all())


@dataclass(frozen=True)
class FilterVariant:
    kappa: int
    eta: int

    _NAMES = {(1, 1): "venkf", (0, 1): "denkf", (1, 0): "senkf"}

    def __post_init__(self):
        if (self.kappa, self.eta) not in self._NAMES:
            raise ValueError(f"unsupported variant kappa={self.kappa}, eta={self.eta}")

    @property
    def name(self) -> str:
        return self._NAMES[(self.kappa, self.eta)]

    @property
    def stochastic(self) -> bool:
        """True when the analysis draws perturbation noise."""
        return self.kappa * self.eta != 0

    @classmethod
    def from_name(cls, name: str) -> "FilterVariant":
        table = {v: k for k, v in cls._NAMES.items()}
        try:
            kappa, eta = table[name.lower()]
        except KeyError:
            raise ValueError(f"unknown filter variant {name!r}") from None
        return cls(kappa, eta)


FilterVariant.VENKF = FilterVariant(1, 1)
FilterVariant.DENKF = FilterVariant(0, 1)
FilterVariant.SENKF = FilterVariant(1, 0)


class ObservationModel:
    """Linear observation ``dZ = H x dt + Gamma^{1/2} dV``.

    ``H`` may be a dense array or a scipy sparse matrix. Parameters are never
    observed; the augmented operator ``[H, 0]`` is implicit.
    """

    def __init__(self, H, Gamma):
        if sp.issparse(H):
            self.H = sp.csr_matrix(H)
        else:
            self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.gamma = Gamma if isinstance(Gamma, CovarianceFactor) else CovarianceFactor(Gamma)
        if self.gamma.size != self.H.shape[0]:
            raise ValueError("Gamma size does not match the number of observations")

    @property
    def k(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def Gamma(self) -> np.ndarray:
        return self.gamma.matrix

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.H @ X)

    def rescaled(self, dt: float) -> "ObservationModel":
        """Discrete-time view with noise covariance ``Gamma / dt``."""
        return ObservationModel(self.H, self.gamma.matrix / dt)


class NoiseStream:
    """Reproducible standard-normal draws indexed by (purpose, step).

    Each step gets its own generator seeded from ``(seed, purpose, step)``;
    column ``p`` of a draw belongs to particle ``p``, so results do not
    depend on evaluation order.
    """

    ANALYSIS = 1
    OBSERVATION = 2

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, purpose: int, step: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(purpose, step))
        return np.random.default_rng(ss)

    def normal(self, purpose: int, step: int, shape) -> np.ndarray:
        return self.generator(purpose, step).standard_normal(shape)


def sample_stats(ens: FullEnsemble):
    """Sample mean and anomalies of the augmented ensemble."""
    Xbar = ens.augmented()
    mean = Xbar.mean(axis=1)
    return mean, Xbar - mean[:, None]


def sample_covariance(ens: FullEnsemble) -> np.ndarray:
    """Dense unbiased sample covariance (small problems and tests only)."""
    _, A = sample_stats(ens)
    return A @ A.T / (ens.particle_count - 1)


def forecast(ens: FullEnsemble, model: ForwardModel, dt: float, t: float = 0.0) -> FullEnsemble:
    """One explicit Euler step of every particle; parameters are unchanged."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    F = model.drift(ens.states, ens.params, t)
    if not np.isfinite(F).all():
        raise NonFinite("drift returned non-finite values")
    return FullEnsemble(ens.states + dt * F, ens.params)


def kalman_gain(anomalies: np.ndarray, obs: ObservationModel, dt: float):
    """Gain blocks ``(K_xx, K_thetax)`` of ``P H^T (Gamma + dt H P H^T)^{-1}``.

    ``anomalies`` is the ``(d + n_theta) x P`` augmented anomaly matrix; its
    first ``obs.dim`` rows are the state.
    """
    d = obs.dim
    P = anomalies.shape[1]
    scale = 1.0 / np.sqrt(P - 1)
    B = obs.apply(anomalies[:d]) * scale
    K = factored_gain(anomalies * scale, B, obs.gamma, dt)
    return K[:d], K[d:]


def analyze_discrete(ens_f: FullEnsemble, obs_tilde: ObservationModel, variant: FilterVariant,
                     y: np.ndarray, xi: np.ndarray | None = None) -> FullEnsemble:
    """Analysis in discrete-observation form.

    ``y`` is the observation ``dZ / dt`` and ``obs_tilde`` carries the
    rescaled covariance ``Gamma / dt``. ``xi`` holds ``k x P`` standard normal
    draws and is required by the perturbed-observation variant.
    """
    X, Theta = ens_f.states, ens_f.params
    d, P = X.shape
    m = X.mean(axis=1)
    Xs = X - m[:, None]
    Ts = Theta - Theta.mean(axis=1)[:, None]
    scale = 1.0 / np.sqrt(P - 1)
    S = obs_tilde.apply(Xs)
    Hm = obs_tilde.apply(m)
    HX = S + Hm[:, None]

    k, eta = variant.kappa, variant.eta
    innov = y[:, None] - 0.5 * (1 + k) * HX
    if eta and k == 0:
        innov = innov - 0.5 * Hm[:, None]
    if variant.stochastic:
        if xi is None:
            raise ValueError("the perturbed-observation variant needs noise draws")
        innov = innov - obs_tilde.gamma.sqrt_mul(xi)

    left = np.vstack([Xs, Ts]) * scale
    update = factored_gain_apply(left, S * scale, obs_tilde.gamma, innov)
    return FullEnsemble(X + update[:d], Theta + update[d:])


def analyze(ens_f: FullEnsemble, obs: ObservationModel, variant: FilterVariant,
            dZ: np.ndarray, dt: float, rng=None, noise: np.ndarray | None = None) -> FullEnsemble:
    """Semi-implicit analysis with the observation increment ``dZ`` over one step.

    Perturbation noise for the VEnKF is taken from ``noise`` (``k x P``
    standard normals, i.e. ``dV / sqrt(dt)``) when given, otherwise drawn
    from ``rng``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    xi = None
    if variant.stochastic:
        xi = noise if noise is not None else _generator(rng).standard_normal((obs.k, ens_f.particle_count))
    return analyze_discrete(ens_f, obs.rescaled(dt), variant, np.asarray(dZ, dtype=float) / dt, xi)


def step(ens, model, obs, variant, dZ, dt, rng=None, noise=None, t: float = 0.0) -> FullEnsemble:
    """Forecast from ``t`` to ``t + dt`` then assimilate ``dZ``."""
    return analyze(forecast(ens, model, dt, t), obs, variant, dZ, dt, rng=rng, noise=noise)


def semi_implicit_equivalence_check(ens_f: FullEnsemble, obs: ObservationModel, variant: FilterVariant,
                                    dZ, dt: float, noise=None) -> float:
    """Largest relative gap between the gain form and a dense semi-implicit solve.

    Solves ``(I + dt P H^T Gamma^{-1} H) x_a = x_f + P H^T Gamma^{-1} r_p`` for
    every particle with a dense linear solver. Only meant for small
    instances.
    """
    P = ens_f.particle_count
    d = ens_f.dim
    xi = noise
    if variant.stochastic and xi is None:
        raise ValueError("noise is required for the perturbed-observation variant")
    gain_form = analyze(ens_f, obs, variant, dZ, dt, noise=xi).augmented()

    mean, A = sample_stats(ens_f)
    Paug = A @ A.T / (P - 1)
    Hd = obs.H.toarray() if sp.issparse(obs.H) else obs.H
    Hbar = np.hstack([Hd, np.zeros((obs.k, ens_f.n_params))])
    PHtGi = Paug @ Hbar.T @ np.linalg.inv(obs.Gamma)
    lhs = np.eye(d + ens_f.n_params) + dt * PHtGi @ Hbar
    Xf = ens_f.augmented()
    kappa, eta = variant.kappa, variant.eta
    rhs_innov = np.repeat(np.asarray(dZ, dtype=float)[:, None], P, axis=1)
    if eta:
        rhs_innov = rhs_innov - 0.5 * (1 - kappa) * (Hbar @ (mean[:, None] - Xf)) * dt
        if kappa:
            rhs_innov = rhs_innov - np.linalg.cholesky(obs.Gamma) @ (np.sqrt(dt) * xi)
    implicit = np.linalg.solve(lhs, Xf + PHtGi @ rhs_innov)
    denom = np.linalg.norm(gain_form, axis=0)
    gap = np.linalg.norm(implicit - gain_form, axis=0)
    denom = np.where(denom > 0, denom, 1.0)
    return float(np.max(gap / denom))


def _generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
