"""Twin experiments: truth simulation, synthetic observations, filter runs and reports.

An experiment is described by an :class:`ExperimentConfig` (read from JSON).
:func:`run_filter` simulates the truth with the true parameters, draws the
observation increments, runs one full-order or low-rank filter over the
assimilation window and returns a :class:`RunRecord`. Records can be written
to and read from a run directory, and :func:`compare_runs` aggregates several
of them into an error and timing table.

Randomness is split into independent streams so that every run is
reproducible from ``(config, seed)``: repetition ``r`` uses ``seed ^ r``,
observation noise and analysis noise are drawn per step from
:class:`~dlrenkf.enkf.NoiseStream`, and the prior uses its own stream.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

from .dlr import DlrEnsemble, bug_forecast, dlr_analyze
from .enkf import FilterVariant, FullEnsemble, NoiseStream, ObservationModel, analyze, forecast
from .errors import ConfigError, MismatchedExperiments, NonFinite, NumericalError
from .lowrank import RankPolicy
from .models.base import ForwardModel, LinearModel

__all__ = [
    "ModelSpec",
    "ObservationSpec",
    "FilterSpec",
    "TimeSpec",
    "PriorSpec",
    "OutputSpec",
    "ExperimentConfig",
    "Experiment",
    "Trajectory",
    "Observations",
    "RunRecord",
    "ComparisonTable",
    "PRESETS",
    "preset",
    "load_config",
    "build_experiment",
    "simulate_truth",
    "synthesize_observations",
    "run_filter",
    "run_repetitions",
    "sweep_rank",
    "compare_runs",
    "relative_error",
]

# stream used for the prior draws; 1 and 2 belong to NoiseStream
_PRIOR_STREAM = 3


# ---------------------------------------------------------------------------
# configuration


def _from_mapping(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ModelSpec:
    """Model selector plus model options.

    ``name`` is one of ``fisher-kpp``, ``bloodflow`` or ``linear``; the
    remaining keys are passed to the corresponding builder.
    """

    name: str = "fisher-kpp"
    options: dict = field(default_factory=dict)


@dataclass
class ObservationSpec:
    """Observation operator and noise covariance.

    operator:
        ``full`` (identity), ``partial`` (eight local averages, Fisher-KPP),
        ``midpoints`` (area and velocity at vessel midpoints, blood flow) or
        ``selection`` (every ``stride``-th state entry).
    gamma:
        Scalar or diagonal of the continuous-time covariance. Blood-flow
        midpoints use ``sigma_A`` and ``sigma_u`` instead.
    """

    operator: str = "full"
    gamma: Any = 1e-8
    vessels: list | None = None
    sigma_A: float = 1e-2
    sigma_u: float = 1e-7
    stride: int = 1


@dataclass
class FilterSpec:
    variant: str = "senkf"
    particles: int = 200
    dlr: bool = False
    rank: int = 7
    adaptive: float | None = None
    min_rank: int = 1
    warm_start: int = 0
    hyper: bool = False
    mean_in_basis: bool = True

    def __post_init__(self):
        FilterVariant.from_name(self.variant)
        if self.particles < 2:
            raise ValueError("particles must be >= 2")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.adaptive is not None and not self.adaptive > 0:
            raise ValueError("adaptive threshold must be > 0")
        if self.min_rank < 1 or self.warm_start < 0:
            raise ValueError("min_rank must be >= 1 and warm_start >= 0")

    def policy(self) -> RankPolicy:
        if self.adaptive is None:
            return RankPolicy.fixed(self.rank)
        return RankPolicy.adaptive(self.adaptive, self.min_rank, self.rank, self.warm_start)

    @property
    def label(self) -> str:
        if not self.dlr:
            return "fom"
        tag = f"dlr-adaptive{self.adaptive:g}" if self.adaptive is not None else f"dlr{self.rank}"
        return tag + ("-hyper" if self.hyper else "")


@dataclass
class TimeSpec:
    """Step size, assimilation horizon and warm-up length (all in model time)."""

    dt: float = 4.4e-5
    horizon: float = 0.154
    warmup: float = 0.0
    assimilate_every: int = 1
    steps: int | None = None

    def __post_init__(self):
        if not self.dt > 0 or not self.horizon > 0:
            raise ValueError("dt and horizon must be > 0")
        if self.warmup < 0 or self.assimilate_every < 1:
            raise ValueError("warmup must be >= 0 and assimilate_every >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(self.steps) if self.steps is not None else int(round(self.horizon / self.dt))

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup / self.dt))


@dataclass
class PriorSpec:
    """Prior of the parameter ensemble.

    With ``perturb_mean`` the ensemble is centred on a perturbed value
    ``theta_pert ~ N(theta_true, sigma^2)`` rather than on the truth.
    """

    theta_true: list | None = None
    sigma: Any = 0.05
    perturb_mean: bool = True
    state_sigma: float = 0.0

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma, dtype=float) > 0):
            raise ValueError("sigma entries must be > 0")
        if self.state_sigma < 0:
            raise ValueError("state_sigma must be >= 0")


@dataclass
class OutputSpec:
    probe_every: int = 10
    probes: list | None = None

    def __post_init__(self):
        if self.probe_every < 1:
            raise ValueError("probe_every must be >= 1")


@dataclass
class ExperimentConfig:
    """Complete description of one twin experiment."""

    name: str = "experiment"
    model: ModelSpec = field(default_factory=ModelSpec)
    observation: ObservationSpec = field(default_factory=ObservationSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)
    time: TimeSpec = field(default_factory=TimeSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    seed: int = 0
    repetitions: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a mapping")
        known = {"name", "model", "observation", "filter", "time", "prior", "output", "seed", "repetitions"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        model = data.get("model", {})
        if isinstance(model, dict) and "options" not in model:
            model = {"name": model.get("name", "fisher-kpp"),
                     "options": {k: v for k, v in model.items() if k != "name"}}
        cfg = cls(
            name=str(data.get("name", "experiment")),
            model=_from_mapping(ModelSpec, model, "model"),
            observation=_from_mapping(ObservationSpec, data.get("observation"), "observation"),
            filter=_from_mapping(FilterSpec, data.get("filter"), "filter"),
            time=_from_mapping(TimeSpec, data.get("time"), "time"),
            prior=_from_mapping(PriorSpec, data.get("prior"), "prior"),
            output=_from_mapping(OutputSpec, data.get("output"), "output"),
            seed=data.get("seed", 0),
            repetitions=data.get("repetitions", 1),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ConfigError("repetitions: must be a positive integer")
        if self.model.name not in _MODEL_BUILDERS:
            raise ConfigError(f"model.name: unknown model {self.model.name!r}")
        f = self.filter
        if f.dlr and f.rank > f.particles - 1:
            raise ConfigError("filter.rank: must not exceed particles - 1")
        if f.hyper and not f.dlr:
            raise ConfigError("filter.hyper: only available for the low-rank filter")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Deep copy with dotted-path overrides, e.g. ``{"filter.rank": 2}``."""
        data = copy.deepcopy(self.to_dict())
        for path, value in changes.items():
            node = data
            keys = path.split(".")
            for k in keys[:-1]:
                node = node[k]
            node[keys[-1]] = value
        return ExperimentConfig.from_dict(data)

    def identity(self) -> str:
        """Fingerprint of everything that defines the experiment except the filter."""
        d = self.to_dict()
        ident = {k: d[k] for k in ("model", "observation", "time", "prior")}
        ident["time"] = {k: v for k, v in ident["time"].items() if k != "assimilate_every"}
        return json.dumps(ident, sort_keys=True, default=_json_default)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# presets


def _fisher(name, operator="full", n_r=18, n_alpha=30, horizon=None, particles=200):
    from .models.fisher_kpp import DT, T_FINAL
    return {
        "name": name,
        "model": {"name": "fisher-kpp", "n_r": n_r, "n_alpha": n_alpha},
        "observation": {"operator": operator, "gamma": 1e-8},
        "filter": {"variant": "senkf", "particles": particles, "rank": 7},
        "time": {"dt": DT, "horizon": horizon or T_FINAL},
        "prior": {"sigma": 0.05},
        "output": {"probe_every": 50},
        "seed": 1,
    }


def _blood3():
    from .models.bloodflow import DT
    return {
        "name": "blood-3",
        "model": {"name": "bloodflow", "network": "bifurcation3", "param_vessels": [1]},
        "observation": {"operator": "midpoints", "sigma_A": 1e-2, "sigma_u": 1e-7},
        "filter": {"variant": "senkf", "particles": 50, "rank": 10, "mean_in_basis": False},
        "time": {"dt": DT, "horizon": 2.4, "warmup": 1.6},
        "prior": {"sigma": 1e5},
        "output": {"probe_every": 200, "probes": [1, 13]},
        "seed": 1,
    }


def _blood55():
    from .models.bloodflow import DT
    return {
        "name": "blood-55",
        "model": {"name": "bloodflow", "network": "arteries55", "param_vessels": [1, 13]},
        "observation": {"operator": "midpoints", "vessels": [15, 21, 46], "sigma_A": 1e-2, "sigma_u": 1e-7},
        "filter": {"variant": "senkf", "particles": 100, "rank": 10, "mean_in_basis": False},
        "time": {"dt": DT, "horizon": 4.0, "warmup": 1.6},
        "prior": {"sigma": 1e5},
        "output": {"probe_every": 200, "probes": [1, 13]},
        "seed": 1,
    }


def _linear():
    return {
        "name": "linear",
        "model": {"name": "linear", "dim": 4, "rate": 1.0, "n_params": 1, "coupling": 1.0},
        "observation": {"operator": "full", "gamma": 1e-4},
        "filter": {"variant": "senkf", "particles": 20, "rank": 4},
        "time": {"dt": 1e-2, "horizon": 2.0},
        "prior": {"theta_true": [1.0], "sigma": 0.2, "state_sigma": 0.1},
        "seed": 1,
    }


PRESETS = {
    "fisher-full": lambda: _fisher("fisher-full"),
    "fisher-partial": lambda: _fisher("fisher-partial", operator="partial"),
    "fisher-reduced": lambda: _fisher("fisher-reduced", n_r=10, n_alpha=15, horizon=0.077, particles=100),
    "blood-3": _blood3,
    "blood-55": _blood55,
    "linear": _linear,
}


def preset(name: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(PRESETS[name]())
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# experiment assembly


@dataclass
class Experiment:
    """Model, observation operator and initial data built from a config."""

    config: ExperimentConfig
    model: ForwardModel
    obs: ObservationModel
    x0: np.ndarray
    theta_true: np.ndarray
    probe_fn: Any = None
    probe_labels: tuple = ()
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def blocks(self):
        return self.model.blocks


def _opt(options, key, default):
    return options.get(key, default)


def _build_fisher(spec: ModelSpec):
    from .models import fisher_kpp as fk
    o = dict(spec.options)
    allowed = {"n_r", "n_alpha", "reaction", "a", "b", "c", "n_theta"}
    if set(o) - allowed:
        raise ConfigError(f"model: unknown fisher-kpp options {sorted(set(o) - allowed)}")
    grid = fk.PolarGrid(int(_opt(o, "n_r", 18)), int(_opt(o, "n_alpha", 30)))
    field_ = fk.build_kl_field(grid, _opt(o, "a", 1.0), _opt(o, "b", 1.0), _opt(o, "c", 0.1),
                               int(_opt(o, "n_theta", 6)))
    model = fk.FisherKPP(grid, field_, float(_opt(o, "reaction", fk.REACTION)))
    theta = fk.THETA_TRUE[: field_.n_params]
    return model, fk.initial_condition(grid), theta


def _bifurcation3():
    from .models.bloodflow import load_network
    from importlib import resources
    rows = json.loads(resources.files("dlrenkf.models").joinpath("data/arteries55.json").read_text())
    by_id = {v["id"]: v for v in rows["vessels"]}
    return load_network({
        "vessels": [by_id[1], by_id[13], by_id[2]],
        "junctions": [{"parent": 1, "children": [13, 2]}],
        "inlet": 1,
        "dx": rows.get("dx"),
        "constants": rows.get("constants", {}),
        "inflow": rows.get("inflow", {}),
    })


def _build_blood(spec: ModelSpec, dt: float):
    from .models import bloodflow as bf
    o = dict(spec.options)
    allowed = {"network", "param_vessels", "dx"}
    if set(o) - allowed:
        raise ConfigError(f"model: unknown bloodflow options {sorted(set(o) - allowed)}")
    net_name = _opt(o, "network", "bifurcation3")
    if net_name == "bifurcation3":
        net = _bifurcation3()
    elif net_name == "arteries55":
        net = bf.arteries55(o.get("dx"))
    else:
        net = bf.load_network(net_name, o.get("dx"))
    model = bf.BloodFlowModel(net, _opt(o, "param_vessels", [net.inlet]), dt=dt)
    theta = np.array([net.vessel(v).beta for v in model.param_vessels])
    return model, model.rest_state(), theta


def _build_linear(spec: ModelSpec):
    o = dict(spec.options)
    allowed = {"dim", "rate", "n_params", "coupling", "x0"}
    if set(o) - allowed:
        raise ConfigError(f"model: unknown linear options {sorted(set(o) - allowed)}")
    d = int(_opt(o, "dim", 4))
    n_theta = int(_opt(o, "n_params", 0))
    if d < 1 or n_theta < 0:
        raise ConfigError("model: dim must be >= 1 and n_params >= 0")
    A = -float(_opt(o, "rate", 1.0)) * np.eye(d)
    i, j = np.meshgrid(np.arange(d), np.arange(n_theta), indexing="ij")
    B = float(_opt(o, "coupling", 1.0)) * np.cos(np.pi * (i + 0.5) * (j + 1) / d)
    x0 = np.broadcast_to(np.asarray(_opt(o, "x0", 1.0), dtype=float), (d,)).copy()
    return LinearModel(A, B if n_theta else None), x0, np.zeros(n_theta)


_MODEL_BUILDERS = {"fisher-kpp", "bloodflow", "linear"}


def _diag_gamma(gamma, k):
    g = np.asarray(gamma, dtype=float)
    g = np.full(k, float(g)) if g.ndim == 0 else g
    if g.shape != (k,):
        raise ConfigError(f"observation.gamma: expected a scalar or {k} entries")
    if not np.all(g > 0):
        raise ConfigError("observation.gamma: entries must be > 0")
    return np.diag(g)


def _build_observation(spec: ObservationSpec, model, name):
    d = model.dim
    op = spec.operator
    if op == "full":
        H = sp.identity(d, format="csr")
    elif op == "selection":
        if spec.stride < 1:
            raise ConfigError("observation.stride: must be >= 1")
        rows = np.arange(0, d, spec.stride)
        H = sp.csr_matrix((np.ones(rows.size), (np.arange(rows.size), rows)), shape=(rows.size, d))
    elif op == "partial":
        if name != "fisher-kpp":
            raise ConfigError("observation.operator: 'partial' is only defined for fisher-kpp")
        from .models.fisher_kpp import partial_observation_matrix
        H = partial_observation_matrix(model.grid)
    elif op == "midpoints":
        if name != "bloodflow":
            raise ConfigError("observation.operator: 'midpoints' is only defined for bloodflow")
        vessels = spec.vessels or [v.id for v in model.network.vessels]
        try:
            mids = np.array([model.midpoint_index(v) for v in vessels])
        except KeyError as exc:
            raise ConfigError(f"observation.vessels: unknown vessel {exc}") from None
        cols = np.concatenate([mids, mids + model.n_cells])
        H = sp.csr_matrix((np.ones(cols.size), (np.arange(cols.size), cols)), shape=(cols.size, d))
        if not (spec.sigma_A > 0 and spec.sigma_u > 0):
            raise ConfigError("observation.sigma_A and sigma_u must be > 0")
        Gamma = np.diag(np.concatenate([np.full(mids.size, spec.sigma_A), np.full(mids.size, spec.sigma_u)]))
        return ObservationModel(H, Gamma)
    else:
        raise ConfigError(f"observation.operator: unknown operator {op!r}")
    return ObservationModel(H, _diag_gamma(spec.gamma, H.shape[0]))


def _fisher_probes(model, probes):
    grid = model.grid
    pts = probes or [[1.25, float(np.pi / 2)], [1.25, float(np.pi / 4)]]
    rr, aa = grid.polar()
    idx, labels = [], []
    for r, a in pts:
        idx.append(int(np.argmin((rr - r) ** 2 + (aa - a) ** 2)))
        labels.append(f"u_r{r:g}_a{a:.4g}")

    def fn(x, theta):
        return x[np.array(idx)]
    return fn, tuple(labels)


def _blood_probes(model, probes):
    vessels = probes or list(model.param_vessels)
    try:
        mids = np.array([model.midpoint_index(v) for v in vessels])
    except KeyError as exc:
        raise ConfigError(f"output.probes: unknown vessel {exc}") from None
    labels = tuple([f"Q{v}" for v in vessels] + [f"p{v}" for v in vessels])

    def fn(x, theta):
        Q = model.flow(x)[mids, 0]
        p = model.pressure(x, theta)[mids, 0]
        return np.concatenate([Q, p])
    return fn, labels


def _linear_probes(model, probes):
    idx = np.asarray(probes or [0], dtype=int)
    return (lambda x, theta: x[idx]), tuple(f"x{i}" for i in idx)


def build_experiment(config: ExperimentConfig) -> Experiment:
    """Instantiate model, observation operator and truth data for ``config``."""
    name = config.model.name
    if name == "fisher-kpp":
        model, x0, theta = _build_fisher(config.model)
        probe_fn, labels = _fisher_probes(model, config.output.probes)
    elif name == "bloodflow":
        model, x0, theta = _build_blood(config.model, config.time.dt)
        probe_fn, labels = _blood_probes(model, config.output.probes)
    elif name == "linear":
        model, x0, theta = _build_linear(config.model)
        probe_fn, labels = _linear_probes(model, config.output.probes)
    else:
        raise ConfigError(f"model.name: unknown model {name!r}")
    if config.prior.theta_true is not None:
        theta = np.asarray(config.prior.theta_true, dtype=float)
        if theta.shape != (model.n_params,):
            raise ConfigError(f"prior.theta_true: expected {model.n_params} entries")
    sigma = np.asarray(config.prior.sigma, dtype=float)
    if sigma.ndim and sigma.shape != (model.n_params,):
        raise ConfigError(f"prior.sigma: expected a scalar or {model.n_params} entries")
    obs = _build_observation(config.observation, model, name)
    if config.filter.dlr and config.filter.hyper:
        r = config.filter.rank * len(model.blocks) + 1
        if 2 * r > config.filter.particles:
            raise ConfigError("filter.hyper: needs 2 * (total rank + 1) <= particles")
    return Experiment(config, model, obs, x0, theta, probe_fn, labels)


# ---------------------------------------------------------------------------
# truth and observations


@dataclass
class Trajectory:
    """Truth states at ``times`` (every ``keep_every`` steps) and, optionally,
    the noiseless observations ``H x`` at the end of every step."""

    times: np.ndarray
    states: np.ndarray
    observed: np.ndarray | None
    final: np.ndarray
    dt: float


def simulate_truth(model: ForwardModel, theta, x0, dt: float, n_steps: int, t0: float = 0.0,
                   H=None, keep_every: int = 1) -> Trajectory:
    """Explicit Euler trajectory of the true system.

    Parameters
    ----------
    model : ForwardModel
    theta : array_like
        True parameters.
    x0 : ndarray, shape (d,)
    dt : float
    n_steps : int
    t0 : float
        Model time of ``x0``.
    H : array or sparse matrix, optional
        When given, ``H x`` is recorded after every step.
    keep_every : int
        Stride of the stored states. ``0`` keeps only the final state.

    Returns
    -------
    Trajectory
        ``states[i]`` is the state at ``times[i]``; the initial state is
        always included.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    theta = np.asarray(theta, dtype=float).reshape(-1, 1)
    x = np.asarray(x0, dtype=float).copy()
    times, states = [t0], [x.copy()]
    observed = [] if H is not None else None
    for k in range(n_steps):
        t = t0 + k * dt
        f = model.drift(x[:, None], theta, t)[:, 0]
        x = x + dt * f
        if not np.all(np.isfinite(x)):
            raise NonFinite("truth became non-finite", k)
        if observed is not None:
            observed.append(np.asarray(H @ x).ravel())
        if keep_every and (k + 1) % keep_every == 0:
            times.append(t + dt)
            states.append(x.copy())
    obs_arr = np.array(observed) if observed is not None else None
    return Trajectory(np.array(times), np.array(states), obs_arr, x, dt)


@dataclass
class Observations:
    """Observation increments ``dZ`` (``n_steps x k``) and both noise views."""

    dZ: np.ndarray
    dt: float
    Gamma: np.ndarray

    @property
    def y(self) -> np.ndarray:
        """Discrete observations ``dZ / dt``."""
        return self.dZ / self.dt

    @property
    def Gamma_tilde(self) -> np.ndarray:
        return self.Gamma / self.dt

    def __len__(self):
        return self.dZ.shape[0]


def _noise_sqrt(Gamma):
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    off = Gamma - np.diag(np.diag(Gamma))
    if not np.any(off):
        if np.any(np.diag(Gamma) < 0):
            raise ValueError("Gamma must be positive semidefinite")
        return np.diag(np.sqrt(np.diag(Gamma)))
    w, V = np.linalg.eigh(Gamma)
    if w.min() < -1e-12 * max(w.max(), 1.0):
        raise ValueError("Gamma must be positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def synthesize_observations(observed, Gamma, dt: float, seed: int) -> Observations:
    """Draw ``dZ_k = H x_k dt + Gamma^{1/2} dV_k`` with ``dV_k ~ N(0, dt I)``.

    ``observed`` is either a :class:`Trajectory` carrying ``H x`` per step or
    the ``n_steps x k`` array itself. A zero ``Gamma`` is allowed and gives
    noiseless increments.
    """
    Hx = observed.observed if isinstance(observed, Trajectory) else np.asarray(observed, dtype=float)
    if Hx is None:
        raise ValueError("trajectory carries no observations; pass H to simulate_truth")
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    L = _noise_sqrt(Gamma)
    stream = NoiseStream(seed)
    n, k = Hx.shape
    dZ = np.empty((n, k))
    for s in range(n):
        xi = stream.normal(NoiseStream.OBSERVATION, s, k)
        dZ[s] = Hx[s] * dt + np.sqrt(dt) * (L @ xi)
    return Observations(dZ, dt, Gamma)


# ---------------------------------------------------------------------------
# filter runs


def relative_error(estimate, truth) -> float:
    """``|estimate - truth| / |truth|``; the absolute error if ``truth`` is zero."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    num = float(np.linalg.norm(estimate - truth))
    den = float(np.linalg.norm(truth))
    return num / den if den > 0 else num


@dataclass
class RunRecord:
    """Outcome of one filter run."""

    config: dict
    repetition: int
    seed: int
    label: str
    variant: str
    theta_true: np.ndarray
    steps: np.ndarray
    param_mean: np.ndarray
    param_std: np.ndarray
    final_error: float
    block_names: tuple = ()
    ranks: np.ndarray | None = None
    discarded: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    probe_labels: tuple = ()
    probe_times: np.ndarray | None = None
    probe_estimate: np.ndarray | None = None
    probe_truth: np.ndarray | None = None

    def __post_init__(self):
        if not (np.isfinite(self.final_error) and self.final_error >= 0):
            raise ValueError("final error must be finite and nonnegative")

    @property
    def experiment(self) -> str:
        return ExperimentConfig.from_dict(self.config).identity()

    @property
    def wall_clock(self) -> float:
        """Time spent in the assimilation loop."""
        return float(self.timings.get("forecast", 0.0) + self.timings.get("analysis", 0.0))

    # -- persistence -------------------------------------------------------
    def to_dir(self, path) -> Path:
        """Write ``config.json``, ``metrics.json`` and the CSV traces to ``path``."""
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.config, indent=2, default=_json_default))
        metrics = {
            "label": self.label,
            "variant": self.variant,
            "repetition": self.repetition,
            "seed": self.seed,
            "final_error": self.final_error,
            "theta_true": self.theta_true.tolist(),
            "theta_final_mean": self.param_mean[-1].tolist() if len(self.steps) else [],
            "theta_final_std": self.param_std[-1].tolist() if len(self.steps) else [],
            "timings": self.timings,
            "block_names": list(self.block_names),
            "probe_labels": list(self.probe_labels),
        }
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
        n_theta = self.param_mean.shape[1]
        with open(out / "params.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"mean_{i}" for i in range(n_theta)] + [f"std_{i}" for i in range(n_theta)])
            for s, m, sd in zip(self.steps, self.param_mean, self.param_std):
                w.writerow([int(s)] + [repr(float(v)) for v in m] + [repr(float(v)) for v in sd])
        with open(out / "ranks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"rank_{b}" for b in self.block_names] + [f"discarded_{b}" for b in self.block_names])
            if self.ranks is not None:
                for s, r, e in zip(self.steps, self.ranks, self.discarded):
                    w.writerow([int(s)] + [int(v) for v in r] + [repr(float(v)) for v in e])
        with open(out / "probes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{lab}_est" for lab in self.probe_labels] + [f"{lab}_true" for lab in self.probe_labels])
            if self.probe_times is not None:
                for t, e, tr in zip(self.probe_times, self.probe_estimate, self.probe_truth):
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in e] + [repr(float(v)) for v in tr])
        return out

    @classmethod
    def from_dir(cls, path) -> "RunRecord":
        src = Path(path)
        try:
            config = json.loads((src / "config.json").read_text())
            metrics = json.loads((src / "metrics.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{src}: not a run directory ({exc})") from None
        params = _read_csv(src / "params.csv")
        n_theta = len(metrics["theta_true"])
        ranks = _read_csv(src / "ranks.csv")
        nb = len(metrics["block_names"])
        probes = _read_csv(src / "probes.csv")
        npr = len(metrics["probe_labels"])
        has_ranks = ranks.shape[0] > 0 and nb > 0
        has_probes = probes.shape[0] > 0
        return cls(
            config=config,
            repetition=int(metrics["repetition"]),
            seed=int(metrics["seed"]),
            label=metrics["label"],
            variant=metrics["variant"],
            theta_true=np.asarray(metrics["theta_true"], dtype=float),
            steps=params[:, 0].astype(int) if params.size else np.zeros(0, int),
            param_mean=params[:, 1:1 + n_theta] if params.size else np.zeros((0, n_theta)),
            param_std=params[:, 1 + n_theta:] if params.size else np.zeros((0, n_theta)),
            final_error=float(metrics["final_error"]),
            block_names=tuple(metrics["block_names"]),
            ranks=ranks[:, 1:1 + nb].astype(int) if has_ranks else None,
            discarded=ranks[:, 1 + nb:] if has_ranks else None,
            timings=metrics["timings"],
            probe_labels=tuple(metrics["probe_labels"]),
            probe_times=probes[:, 0] if has_probes else None,
            probe_estimate=probes[:, 1:1 + npr] if has_probes else None,
            probe_truth=probes[:, 1 + npr:] if has_probes else None,
        )


def _read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        return np.zeros((0, 0))
    return np.array([[float(v) for v in r] for r in rows])


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _warm_up(model, x0, theta, dt, n_steps):
    if n_steps == 0:
        return np.asarray(x0, dtype=float).copy()
    return simulate_truth(model, theta, x0, dt, n_steps, keep_every=0).final


def _prior(exp: Experiment, cfg: ExperimentConfig, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_PRIOR_STREAM,)))
    n_theta = exp.model.n_params
    P = cfg.filter.particles
    sigma = np.broadcast_to(np.asarray(cfg.prior.sigma, dtype=float), (n_theta,))
    center = exp.theta_true.copy()
    if cfg.prior.perturb_mean:
        center = rng.normal(center, sigma)
    params = rng.normal(center[:, None], sigma[:, None], (n_theta, P))
    state_noise = rng.standard_normal((exp.model.dim, P)) if cfg.prior.state_sigma > 0 else None
    return center, params, state_noise


def _annotate(exc: Exception, step: int, t: float):
    exc.step = step
    msg = exc.args[0] if exc.args else type(exc).__name__
    exc.args = (f"step {step} (t={t:.6g}): {msg}",) + tuple(exc.args[1:])
    return exc


def run_filter(config: ExperimentConfig, repetition: int = 0, experiment: Experiment | None = None,
               progress=None) -> RunRecord:
    """Run one twin experiment and return its record.

    Parameters
    ----------
    config : ExperimentConfig
    repetition : int
        Repetition index ``r``; all random streams use ``config.seed ^ r``.
    experiment : Experiment, optional
        Prebuilt model and operators (saves rebuilding for sweeps).
    progress : callable, optional
        Called as ``progress(step, n_steps, param_mean)`` every 100 steps.

    Raises
    ------
    NumericalError
        Any numerical failure, with the step index prepended to the message
        and stored as ``exc.step``.
    """
    exp = experiment or build_experiment(config)
    model, obs = exp.model, exp.obs
    f, tcfg = config.filter, config.time
    seed = int(config.seed) ^ int(repetition)
    variant = FilterVariant.from_name(f.variant)
    dt, n_steps, n_warm = tcfg.dt, tcfg.n_steps, tcfg.warmup_steps
    t0 = n_warm * dt
    timings: dict[str, float] = {}

    tic = time.perf_counter()
    theta_pert, params, state_noise = _prior(exp, config, seed)
    x_filter0 = _warm_up(model, exp.x0, theta_pert, dt, n_warm)
    timings["warmup"] = time.perf_counter() - tic

    # the truth does not depend on the seed, so sweeps share it
    tic = time.perf_counter()
    keep = config.output.probe_every
    truth_key = ("truth", n_warm, n_steps, keep, dt)
    if truth_key not in exp.cache:
        x_truth0 = _warm_up(model, exp.x0, exp.theta_true, dt, n_warm)
        exp.cache[truth_key] = simulate_truth(model, exp.theta_true, x_truth0, dt, n_steps, t0=t0,
                                              H=obs.H, keep_every=keep)
    truth = exp.cache[truth_key]
    data = synthesize_observations(truth, obs.Gamma, dt, seed)
    timings["truth"] = time.perf_counter() - tic

    P = f.particles
    X = np.repeat(x_filter0[:, None], P, axis=1)
    if state_noise is not None:
        X = X + config.prior.state_sigma * state_noise
    ens = FullEnsemble(X, params)
    blocks = list(model.blocks)
    policy = f.policy() if f.dlr else None
    if f.dlr:
        ens = DlrEnsemble.from_full(ens, f.rank, blocks)

    noise = NoiseStream(seed)
    every = tcfg.assimilate_every
    n_theta = model.n_params
    means = np.empty((n_steps, n_theta))
    stds = np.empty((n_steps, n_theta))
    ranks = np.empty((n_steps, len(blocks)), dtype=int) if f.dlr else None
    discarded = np.zeros((n_steps, len(blocks))) if f.dlr else None
    probe_t, probe_est = [], []
    t_fc = t_an = 0.0
    dZ_acc = np.zeros(obs.k)

    def probe(ens_now, t):
        mean = ens_now.mean if f.dlr else ens_now.states.mean(axis=1)
        theta_m = ens_now.params.mean(axis=1)
        probe_t.append(t)
        probe_est.append(np.ravel(exp.probe_fn(mean[:, None], theta_m[:, None])))

    probe(ens, t0)
    for k in range(n_steps):
        t = t0 + k * dt
        try:
            tic = time.perf_counter()
            if f.dlr:
                report: list = []
                ens = bug_forecast(ens, model, dt, policy, hyper=f.hyper, t=t, step=k,
                                   mean_in_basis=f.mean_in_basis, report=report)
                for b, rec in enumerate(report):
                    discarded[k, b] = rec.discarded
            else:
                ens = forecast(ens, model, dt, t)
            t_fc += time.perf_counter() - tic

            tic = time.perf_counter()
            dZ_acc += data.dZ[k]
            if (k + 1) % every == 0:
                xi = None
                if variant.stochastic:
                    xi = noise.normal(NoiseStream.ANALYSIS, k, (obs.k, P))
                if f.dlr:
                    ens = dlr_analyze(ens, obs, variant, dZ_acc, every * dt, noise=xi)
                else:
                    ens = analyze(ens, obs, variant, dZ_acc, every * dt, noise=xi)
                dZ_acc = np.zeros(obs.k)
            t_an += time.perf_counter() - tic
        except NumericalError as exc:
            raise _annotate(exc, k, t)
        params_now = ens.params
        if not np.all(np.isfinite(params_now)):
            raise NonFinite(f"step {k} (t={t:.6g}): parameter estimate became non-finite", k)
        means[k] = params_now.mean(axis=1)
        stds[k] = params_now.std(axis=1, ddof=1)
        if f.dlr:
            ranks[k] = [b.rank for b in ens.block_layout]
        if (k + 1) % keep == 0:
            probe(ens, t + dt)
        if progress is not None and (k + 1) % 100 == 0:
            progress(k + 1, n_steps, means[k])
    timings["forecast"] = t_fc
    timings["analysis"] = t_an

    theta_hat = means[-1] if n_steps else ens.params.mean(axis=1)
    truth_probe = np.array([np.ravel(exp.probe_fn(x[:, None], exp.theta_true[:, None]))
                            for x in truth.states])
    return RunRecord(
        config=config.to_dict(),
        repetition=int(repetition),
        seed=seed,
        label=f.label,
        variant=variant.name,
        theta_true=exp.theta_true.copy(),
        steps=np.arange(1, n_steps + 1),
        param_mean=means,
        param_std=stds,
        final_error=relative_error(theta_hat, exp.theta_true),
        block_names=tuple(name for name, _ in blocks) if f.dlr else (),
        ranks=ranks,
        discarded=discarded,
        timings=timings,
        probe_labels=exp.probe_labels,
        probe_times=np.asarray(probe_t),
        probe_estimate=np.asarray(probe_est),
        probe_truth=truth_probe[: len(probe_t)],
    )


def run_repetitions(config: ExperimentConfig, progress=None, experiment: Experiment | None = None) -> list[RunRecord]:
    """``config.repetitions`` runs with seeds ``seed ^ 0, seed ^ 1, ...``."""
    exp = experiment or build_experiment(config)
    return [run_filter(config, r, exp, progress) for r in range(config.repetitions)]


def sweep_rank(config: ExperimentConfig, ranks, include_fom: bool = True, progress=None) -> list[RunRecord]:
    """Full-order run plus low-rank runs at every rank in ``ranks``."""
    configs = []
    if include_fom:
        configs.append(config.replace(**{"filter.dlr": False, "filter.hyper": False}))
    for r in ranks:
        configs.append(config.replace(**{"filter.dlr": True, "filter.rank": int(r), "filter.adaptive": None}))
    exp = build_experiment(configs[-1] if configs else config)
    records = []
    for cfg in configs:
        records.extend(run_repetitions(cfg, progress, exp))
    return records


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonTable:
    """One row per (variant, method): error statistics and timings."""

    rows: list[dict]

    COLUMNS = ("variant", "method", "runs", "mean_error", "std_error", "min_error", "max_error",
               "mean_wall_clock", "speedup")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row[k] for k in self.COLUMNS})
        return path

    def lookup(self, variant: str, method: str) -> dict:
        for row in self.rows:
            if row["variant"] == variant and row["method"] == method:
                return row
        raise KeyError((variant, method))

    def __str__(self):
        head = f"{'variant':<8} {'method':<22} {'runs':>4} {'mean err':>10} {'std err':>10} {'wall [s]':>9} {'speedup':>8}"
        lines = [head]
        for r in self.rows:
            lines.append(f"{r['variant']:<8} {r['method']:<22} {r['runs']:>4d} {r['mean_error']:>10.4g} "
                         f"{r['std_error']:>10.3g} {r['mean_wall_clock']:>9.3g} {r['speedup']:>8.3g}")
        return "\n".join(lines)


def _method_key(label: str):
    if label == "fom":
        return (0, 0, label)
    digits = "".join(ch for ch in label.split("-")[0] if ch.isdigit())
    return (1, int(digits) if digits else 10**6, label)


def compare_runs(records) -> ComparisonTable:
    """Aggregate records of one experiment into a per-method error table.

    The standard deviation uses ``ddof=1`` (zero for a single run). The
    speedup is the mean wall clock of the full-order run of the same
    variant divided by the method's mean wall clock; it is NaN without a
    full-order reference.

    Raises
    ------
    MismatchedExperiments
        If the records come from different experiments.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to compare")
    idents = {r.experiment for r in records}
    if len(idents) > 1:
        raise MismatchedExperiments("records do not share model, observation, time and prior settings")
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.variant, r.label), []).append(r)
    fom_time = {}
    for (variant, label), recs in groups.items():
        if label == "fom":
            fom_time[variant] = float(np.mean([r.wall_clock for r in recs]))
    rows = []
    for (variant, label) in sorted(groups, key=lambda k: (k[0], _method_key(k[1]))):
        recs = sorted(groups[(variant, label)], key=lambda r: r.repetition)
        err = np.array([r.final_error for r in recs])
        wall = float(np.mean([r.wall_clock for r in recs]))
        ref = fom_time.get(variant)
        rows.append({
            "variant": variant,
            "method": label,
            "runs": len(recs),
            "mean_error": float(err.mean()),
            "std_error": float(err.std(ddof=1)) if err.size > 1 else 0.0,
            "min_error": float(err.min()),
            "max_error": float(err.max()),
            "mean_wall_clock": wall,
            "speedup": ref / wall if ref is not None and wall > 0 else float("nan"),
        })
    return ComparisonTable(rows)
