"""One-dimensional blood flow in a tree of elastic vessels.

Each vessel carries the area ``A`` and mean velocity ``u`` and obeys

    dA/dt + d(A u)/dx = 0,
    du/dt + d(u^2 / 2 + p / rho)/dx = -nu u / A,

with the elastic wall law ``p = p_ext + beta (sqrt(A) - sqrt(A0))``. The
characteristic variables are ``W1,2 = u +- 4c`` with wave speed
``c = sqrt(beta / (2 rho)) A^(1/4)``.

Space is discretised per vessel with a cell-centred finite-volume scheme:
minmod-limited MUSCL reconstruction of ``(A, u)`` and a local Lax-Friedrichs
flux at interior faces. At a vessel end the boundary state ``U_b`` is
obtained from the boundary or junction condition together with the
outgoing characteristic, and the face flux is ``F(U_b)``. The same state is
used as ghost value for the slope limiter.

Boundary conditions:

* inlet: prescribed periodic area ``A(t)``; ``u`` from the outgoing ``W2``;
* outlets: non-reflecting, ``W1`` extrapolated and ``W2`` advanced by its
  source term over one step;
* junctions (one parent, two children): mass conservation and continuity of
  total pressure, closed by the three outgoing characteristics.

All vessels and all particles are evaluated together with index arrays, so
:meth:`BloodFlowModel.drift` takes the full ``d x P`` state matrix.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import CflViolation, ConfigError, NewtonDivergence, NonPhysical
from .base import ForwardModel

__all__ = [
    "RHO",
    "VISCOSITY",
    "P_EXT",
    "DT",
    "DX",
    "Vessel",
    "Junction",
    "InflowSeries",
    "Network",
    "BloodFlowModel",
    "physical_flux",
    "characteristics",
    "from_characteristics",
    "pressure",
    "wave_speed",
    "inlet_bc",
    "outlet_bc",
    "bifurcation_solve",
    "bifurcation_residuals",
    "muscl_llf_rhs",
    "step_network",
    "load_network",
    "arteries55",
]

RHO = 1050.0
VISCOSITY = 9e-6
P_EXT = 11465.692
DT = 5e-5
DX = 2e-3

_NEWTON_TOL = 1e-12
_NEWTON_MAXIT = 50


# ---------------------------------------------------------------------------
# pointwise relations


def wave_speed(A, beta, rho=RHO):
    return np.sqrt(beta / (2.0 * rho)) * np.asarray(A) ** 0.25


def pressure(A, beta, A0, p_ext=P_EXT):
    return p_ext + beta * (np.sqrt(A) - np.sqrt(A0))


def physical_flux(A, u, beta, A0, rho=RHO, p_ext=P_EXT):
    """Flux ``(A u, u^2/2 + p/rho)``."""
    A = np.asarray(A, dtype=float)
    if np.any(A <= 0):
        raise NonPhysical("non-positive area in flux evaluation")
    return A * u, 0.5 * u * u + pressure(A, beta, A0, p_ext) / rho


def characteristics(A, u, beta, rho=RHO):
    """Return ``(c, lambda1, lambda2, W1, W2)``."""
    c = wave_speed(A, beta, rho)
    return c, u + c, u - c, u + 4.0 * c, u - 4.0 * c


def from_characteristics(W1, W2, beta, rho=RHO):
    """Invert ``W1,2 = u +- 4c`` for ``(A, u)``."""
    A = ((W1 - W2) / 8.0) ** 4 * (2.0 * rho / beta) ** 2
    return A, 0.5 * (W1 + W2)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Vessel:
    id: int
    length: float
    A0: float
    beta: float
    n_cells: int
    name: str = ""

    @property
    def dx(self) -> float:
        return self.length / self.n_cells

    def midpoint_cell(self) -> int:
        """Cell whose centre is nearest to ``length / 2`` (lowest index on ties)."""
        centres = (np.arange(self.n_cells) + 0.5) * self.dx
        return int(np.argmin(np.abs(centres - 0.5 * self.length)))


@dataclass(frozen=True)
class Junction:
    parent: int
    children: tuple[int, int]


@dataclass(frozen=True)
class InflowSeries:
    """Periodic inlet area ``a0 + sum_k a_k cos(k w t) + b_k sin(k w t)``."""

    a: tuple = (7.441e-4, -2.809e-5, -3.094e-5, -5.753e-6, 1.557e-6)
    b: tuple = (4.699e-5, 3.497e-6, -1.405e-5, -2.932e-6)
    period: float = 0.8

    def __post_init__(self):
        if len(self.a) != len(self.b) + 1:
            raise ConfigError("inflow: need one more cosine than sine coefficient")
        ts = np.linspace(0.0, self.period, 2001)
        if np.min(self.area(ts)) <= 0:
            raise ConfigError("inflow: prescribed area must stay positive")

    def area(self, t):
        t = np.asarray(t, dtype=float)
        w = 2.0 * np.pi / self.period
        out = np.full(t.shape, float(self.a[0]))
        for k in range(1, len(self.a)):
            out = out + self.a[k] * np.cos(k * w * t) + self.b[k - 1] * np.sin(k * w * t)
        return out

    __call__ = area


@dataclass
class Network:
    """Tree of vessels with a single inlet; every leaf vessel is an outlet.

    ``inflow=None`` holds the inlet area at the inlet vessel's ``A0``.
    """

    vessels: list[Vessel]
    junctions: list[Junction]
    inlet: int
    inflow: InflowSeries | None = field(default_factory=InflowSeries)
    rho: float = RHO
    viscosity: float = VISCOSITY
    p_ext: float = P_EXT

    def __post_init__(self):
        self._validate()

    def _validate(self):
        ids = [v.id for v in self.vessels]
        if len(set(ids)) != len(ids):
            raise ConfigError("vessels: duplicate id")
        known = set(ids)
        if self.inlet not in known:
            raise ConfigError(f"inlet: unknown vessel {self.inlet}")
        parent_of: dict[int, int] = {}
        split = set()
        for j in self.junctions:
            if j.parent in split:
                raise ConfigError(f"junctions: vessel {j.parent} splits twice")
            split.add(j.parent)
            if len(j.children) != 2 or j.children[0] == j.children[1]:
                raise ConfigError(f"junctions: vessel {j.parent} needs two distinct children")
            for c in (j.parent, *j.children):
                if c not in known:
                    raise ConfigError(f"junctions: unknown vessel {c}")
            for c in j.children:
                if c in parent_of:
                    raise ConfigError(f"junctions: vessel {c} has two parents")
                if c == self.inlet:
                    raise ConfigError("junctions: the inlet vessel cannot be a child")
                parent_of[c] = j.parent
        # every vessel must be reachable from the inlet without revisiting
        children = {j.parent: j.children for j in self.junctions}
        seen, stack = set(), [self.inlet]
        while stack:
            v = stack.pop()
            if v in seen:
                raise ConfigError("junctions: graph contains a cycle")
            seen.add(v)
            stack.extend(children.get(v, ()))
        if seen != known:
            missing = sorted(known - seen)
            raise ConfigError(f"junctions: vessels {missing} are not connected to the inlet (or form a cycle)")
        for v in self.vessels:
            if v.n_cells < 1 or v.length <= 0 or v.A0 <= 0 or v.beta <= 0:
                raise ConfigError(f"vessels[{v.id}]: length, A0, beta and cell count must be positive")

    @property
    def outlets(self) -> list[int]:
        split = {j.parent for j in self.junctions}
        return [v.id for v in self.vessels if v.id not in split]

    @property
    def n_cells(self) -> int:
        return sum(v.n_cells for v in self.vessels)

    @property
    def dim(self) -> int:
        return 2 * self.n_cells

    def vessel(self, vid: int) -> Vessel:
        for v in self.vessels:
            if v.id == vid:
                return v
        raise KeyError(vid)

    def inlet_area(self, t):
        if self.inflow is None:
            return self.vessel(self.inlet).A0
        return self.inflow.area(t)


def load_network(config, dx: float | None = None) -> Network:
    """Build a :class:`Network` from a dict or a JSON file.

    Parameters
    ----------
    config : dict, str or Path
        Keys: ``vessels`` (``id``, ``length``, ``A0``, ``beta``, optional
        ``name``), ``junctions`` (``parent``, ``children``), ``inlet``,
        optional ``dx``, ``constants`` (``rho``, ``viscosity``, ``p_ext``) and
        ``inflow`` (``a``, ``b``, ``period``; ``null`` for a constant inlet).
    dx : float, optional
        Overrides the target cell width.
    """
    if isinstance(config, (str, Path)):
        try:
            config = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read network file: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("network config must be a mapping")
    for key in ("vessels", "inlet"):
        if key not in config:
            raise ConfigError(f"{key}: missing")
    dx = float(dx or config.get("dx", DX))
    vessels = []
    for i, v in enumerate(config["vessels"]):
        try:
            length, A0, beta = float(v["length"]), float(v["A0"]), float(v["beta"])
            vid = int(v["id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"vessels[{i}]: bad or missing field {exc}") from None
        n = int(round(length / dx))
        if n < 1:
            raise ConfigError(f"vessels[{i}]: length {length} shorter than half a cell")
        vessels.append(Vessel(vid, length, A0, beta, n, v.get("name", "")))
    junctions = []
    for i, j in enumerate(config.get("junctions", [])):
        try:
            junctions.append(Junction(int(j["parent"]), tuple(int(c) for c in j["children"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"junctions[{i}]: bad or missing field {exc}") from None
    consts = config.get("constants", {})
    inflow_cfg = config.get("inflow", {})
    if inflow_cfg is None:
        inflow = None
    else:
        defaults = InflowSeries()
        inflow = InflowSeries(tuple(inflow_cfg.get("a", defaults.a)), tuple(inflow_cfg.get("b", defaults.b)),
                              float(inflow_cfg.get("period", defaults.period)))
    return Network(vessels, junctions, int(config["inlet"]), inflow,
                   float(consts.get("rho", RHO)), float(consts.get("viscosity", VISCOSITY)),
                   float(consts.get("p_ext", P_EXT)))


def arteries55(dx: float | None = None) -> Network:
    """The 55-artery tree shipped with the package."""
    text = resources.files("dlrenkf.models").joinpath("data/arteries55.json").read_text()
    return load_network(json.loads(text), dx=dx)


# ---------------------------------------------------------------------------
# boundary and junction conditions


def inlet_bc(t, A_first, u_first, beta, inflow, rho=RHO):
    """Inlet boundary state from the prescribed area and the outgoing ``W2``.

    With ``A_b = A(t)`` fixed, the compatibility relation
    ``u_b - 4 c(A_b) = u_1 - 4 c(A_1)`` is linear in ``u_b`` and is solved in
    closed form.
    """
    A_b = inflow(t) if callable(inflow) else inflow
    W2 = u_first - 4.0 * wave_speed(A_first, beta, rho)
    u_b = W2 + 4.0 * wave_speed(A_b, beta, rho)
    return np.broadcast_to(A_b, np.shape(u_b)).astype(float), u_b


def outlet_bc(A_last, u_last, beta, dt, viscosity=VISCOSITY, rho=RHO):
    """Non-reflecting outlet state.

    ``W1`` leaves the domain and is extrapolated; the incoming ``W2`` follows
    ``dW2/dt = -nu u / A`` and is advanced by one step from the interior value.
    """
    c = wave_speed(A_last, beta, rho)
    W1 = u_last + 4.0 * c
    W2 = u_last - 4.0 * c - dt * viscosity * u_last / A_last
    return from_characteristics(W1, W2, beta, rho)


def bifurcation_residuals(states, params, rho=RHO):
    """Scaled residuals of the six junction equations.

    ``states`` is ``(A_p, u_p, A_1, u_1, A_2, u_2)`` and ``params`` holds
    ``(beta, A0, W)`` for parent and children, where ``W`` is the outgoing
    characteristic (``W1`` for the parent, ``W2`` for the children).
    """
    Ap, up, A1, u1, A2, u2 = states
    (bp, A0p, Wp), (b1, A01, W1), (b2, A02, W2) = params
    cp = wave_speed(Ap, bp, rho)
    c1 = wave_speed(A1, b1, rho)
    c2 = wave_speed(A2, b2, rho)
    scale_q = A0p * wave_speed(A0p, bp, rho)
    scale_p = rho * wave_speed(A0p, bp, rho) ** 2
    tp = 0.5 * rho * up**2 + bp * (np.sqrt(Ap) - np.sqrt(A0p))
    t1 = 0.5 * rho * u1**2 + b1 * (np.sqrt(A1) - np.sqrt(A01))
    t2 = 0.5 * rho * u2**2 + b2 * (np.sqrt(A2) - np.sqrt(A02))
    cref = wave_speed(A0p, bp, rho)
    return np.stack([
        (Ap * up - A1 * u1 - A2 * u2) / scale_q,
        (tp - t1) / scale_p,
        (tp - t2) / scale_p,
        (up + 4 * cp - Wp) / cref,
        (u1 - 4 * c1 - W1) / cref,
        (u2 - 4 * c2 - W2) / cref,
    ])


def bifurcation_solve(parent, child1, child2, rho=RHO):
    """Boundary states at a junction by Newton's method.

    Parameters
    ----------
    parent, child1, child2 : tuple
        ``(A, u, beta, A0)`` of the parent's last cell and each child's first
        cell. Entries may be arrays of any common shape (junctions x
        particles), which are solved independently.

    Returns
    -------
    tuple of three ``(A, u)`` pairs for parent end, child 1 and child 2.

    Notes
    -----
    The three compatibility relations give ``u`` explicitly in terms of
    ``A`` at each end, so the six equations reduce exactly to three
    (mass and two total-pressure equations) in the three areas.
    """
    Ap0, up0, bp, A0p = (np.asarray(x, dtype=float) for x in parent)
    A10, u10, b1, A01 = (np.asarray(x, dtype=float) for x in child1)
    A20, u20, b2, A02 = (np.asarray(x, dtype=float) for x in child2)
    shape = np.broadcast_shapes(Ap0.shape, A10.shape, A20.shape, bp.shape, b1.shape, b2.shape)
    Wp = up0 + 4 * wave_speed(Ap0, bp, rho)
    W1 = u10 - 4 * wave_speed(A10, b1, rho)
    W2 = u20 - 4 * wave_speed(A20, b2, rho)
    x = np.stack([np.broadcast_to(a, shape) for a in (Ap0, A10, A20)], axis=-1).astype(float)
    kp, k1, k2 = (np.sqrt(b / (2 * rho)) for b in (bp, b1, b2))
    scale_q = A0p * kp * A0p**0.25
    scale_p = rho * (kp * A0p**0.25) ** 2
    for _ in range(_NEWTON_MAXIT):
        Ap, A1, A2 = x[..., 0], x[..., 1], x[..., 2]
        if np.any(x <= 0):
            raise NewtonDivergence("junction Newton iterate left the physical region")
        cp, c1, c2 = kp * Ap**0.25, k1 * A1**0.25, k2 * A2**0.25
        up, u1, u2 = Wp - 4 * cp, W1 + 4 * c1, W2 + 4 * c2
        tp = 0.5 * rho * up**2 + bp * (np.sqrt(Ap) - np.sqrt(A0p))
        t1 = 0.5 * rho * u1**2 + b1 * (np.sqrt(A1) - np.sqrt(A01))
        t2 = 0.5 * rho * u2**2 + b2 * (np.sqrt(A2) - np.sqrt(A02))
        F = np.stack([(Ap * up - A1 * u1 - A2 * u2) / scale_q,
                      (tp - t1) / scale_p,
                      (tp - t2) / scale_p], axis=-1)
        if np.max(np.abs(F)) < _NEWTON_TOL:
            break
        dtp = (-rho * up * cp / Ap + 0.5 * bp / np.sqrt(Ap)) / scale_p
        dt1 = (-rho * u1 * c1 / A1 - 0.5 * b1 / np.sqrt(A1)) / scale_p
        dt2 = (-rho * u2 * c2 / A2 - 0.5 * b2 / np.sqrt(A2)) / scale_p
        zero = np.zeros(shape)
        J = np.stack([
            np.stack([(up - cp) / scale_q, -(u1 + c1) / scale_q, -(u2 + c2) / scale_q], axis=-1),
            np.stack([dtp, dt1, zero], axis=-1),
            np.stack([dtp, zero, dt2], axis=-1),
        ], axis=-2)
        step = np.linalg.solve(J, F[..., None])[..., 0]
        # damp so that no area shrinks by more than half in one iteration
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(step > 0, 0.5 * x / step, np.inf)
        x = x - np.minimum(1.0, room.min(axis=-1, keepdims=True)) * step
    else:
        raise NewtonDivergence(f"junction Newton did not converge in {_NEWTON_MAXIT} iterations")
    Ap, A1, A2 = x[..., 0], x[..., 1], x[..., 2]
    up = Wp - 4 * kp * Ap**0.25
    u1 = W1 + 4 * k1 * A1**0.25
    u2 = W2 + 4 * k2 * A2**0.25
    return (Ap, up), (A1, u1), (A2, u2)


# ---------------------------------------------------------------------------
# finite-volume right-hand side


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def muscl_llf_rhs(A, u, beta, A0, dx, left_state, right_state, viscosity=VISCOSITY,
                  rho=RHO, p_ext=P_EXT):
    """Semi-discrete right-hand side of a single vessel.

    ``A`` and ``u`` hold the cell values (first axis cells, optional trailing
    particle axis). ``left_state`` and ``right_state`` are the boundary
    states ``(A_b, u_b)`` at the two ends.
    """
    A = np.asarray(A, dtype=float)
    u = np.asarray(u, dtype=float)
    lA, lu = (np.asarray(x, dtype=float)[None] for x in left_state)
    rA, ru = (np.asarray(x, dtype=float)[None] for x in right_state)
    Ap = np.concatenate([lA, lA, A, rA, rA])
    up = np.concatenate([lu, lu, u, ru, ru])
    return _rhs_padded(Ap, up, beta, A0, dx, viscosity, rho, p_ext)


def _rhs_padded(Ap, up, beta, A0, dx, viscosity, rho, p_ext):
    sA = _minmod(Ap[1:-1] - Ap[:-2], Ap[2:] - Ap[1:-1])
    su = _minmod(up[1:-1] - up[:-2], up[2:] - up[1:-1])
    # interior cells are Ap[2:-2]; sA[k] belongs to Ap[k+1]
    Ac, uc = Ap[2:-2], up[2:-2]
    sAc, suc = sA[1:-1], su[1:-1]
    AL, uL = Ac[:-1] + 0.5 * sAc[:-1], uc[:-1] + 0.5 * suc[:-1]
    AR, uR = Ac[1:] - 0.5 * sAc[1:], uc[1:] - 0.5 * suc[1:]
    if np.any(AL <= 0) or np.any(AR <= 0):
        raise NonPhysical("non-positive reconstructed area")
    f1L, f2L = physical_flux(AL, uL, beta, A0, rho, p_ext)
    f1R, f2R = physical_flux(AR, uR, beta, A0, rho, p_ext)
    a = np.maximum(np.abs(uL) + wave_speed(AL, beta, rho), np.abs(uR) + wave_speed(AR, beta, rho))
    g1 = 0.5 * (f1L + f1R) - 0.5 * a * (AR - AL)
    g2 = 0.5 * (f2L + f2R) - 0.5 * a * (uR - uL)
    b1l, b2l = physical_flux(Ap[0:1], up[0:1], beta, A0, rho, p_ext)
    b1r, b2r = physical_flux(Ap[-1:], up[-1:], beta, A0, rho, p_ext)
    G1 = np.concatenate([b1l, g1, b1r])
    G2 = np.concatenate([b2l, g2, b2r])
    dA = -(G1[1:] - G1[:-1]) / dx
    du = -(G2[1:] - G2[:-1]) / dx - viscosity * uc / Ac
    return dA, du


class BloodFlowModel(ForwardModel):
    """Drift of the whole network for a batch of particles.

    State layout: ``[A of every cell; u of every cell]`` with vessels in the
    order of ``network.vessels``. Parameters replace the ``beta`` of the
    vessels listed in ``param_vessels`` (one parameter per vessel).

    Parameters
    ----------
    network : Network
    param_vessels : sequence of int
    dt : float
        Step used by the outlet condition to advance the incoming
        characteristic.
    """

    def __init__(self, network: Network, param_vessels=(), dt: float = DT):
        self.network = network
        self.param_vessels = tuple(int(v) for v in param_vessels)
        self.dt = dt
        self.n_params = len(self.param_vessels)
        vs = network.vessels
        self.n_cells = network.n_cells
        self.dim = 2 * self.n_cells
        self._vid = {v.id: i for i, v in enumerate(vs)}
        for pv in self.param_vessels:
            if pv not in self._vid:
                raise ConfigError(f"param_vessels: unknown vessel {pv}")
        n = np.array([v.n_cells for v in vs])
        self.cell_start = np.concatenate([[0], np.cumsum(n)[:-1]])
        self.cell_end = self.cell_start + n
        pad_start = np.concatenate([[0], np.cumsum(n + 4)[:-1]])
        self.n_pad = int(np.sum(n + 4))
        self._cell_pos = np.concatenate([pad_start[i] + 2 + np.arange(n[i]) for i in range(len(vs))])
        self._lghost = np.concatenate([[pad_start[i], pad_start[i] + 1] for i in range(len(vs))])
        self._rghost = np.concatenate([[pad_start[i] + n[i] + 2, pad_start[i] + n[i] + 3] for i in range(len(vs))])
        self._vessel_of_cell = np.repeat(np.arange(len(vs)), n)
        self._vessel_of_pad = np.repeat(np.arange(len(vs)), n + 4)
        self.beta0 = np.array([v.beta for v in vs])
        self.A0 = np.array([v.A0 for v in vs])
        self.dx = np.array([v.dx for v in vs])
        # interior faces: left cell position of each (cell i, cell i+1) pair
        self._iface_left = np.concatenate([pad_start[i] + 2 + np.arange(n[i] - 1) for i in range(len(vs))])
        # face numbering: vessel i owns faces face_start[i] .. face_start[i] + n[i]
        self.face_start = np.concatenate([[0], np.cumsum(n + 1)[:-1]])
        self.n_faces = int(np.sum(n + 1))
        self._iface_id = np.concatenate([self.face_start[i] + 1 + np.arange(n[i] - 1) for i in range(len(vs))])
        cell_local = np.arange(self.n_cells) - self.cell_start[self._vessel_of_cell]
        self._cell_lface = self.face_start[self._vessel_of_cell] + cell_local
        self._cell_rface = self._cell_lface + 1
        self._dx_cell = self.dx[self._vessel_of_cell]
        self._inlet = self._vid[network.inlet]
        self._outlets = np.array([self._vid[o] for o in network.outlets], dtype=int)
        self._jp = np.array([self._vid[j.parent] for j in network.junctions], dtype=int)
        self._jc1 = np.array([self._vid[j.children[0]] for j in network.junctions], dtype=int)
        self._jc2 = np.array([self._vid[j.children[1]] for j in network.junctions], dtype=int)
        self._param_idx = np.array([self._vid[v] for v in self.param_vessels], dtype=int)

    # -- layout helpers ---------------------------------------------------
    @property
    def blocks(self):
        return [("A", slice(0, self.n_cells)), ("u", slice(self.n_cells, self.dim))]

    def cells_of(self, vid: int) -> slice:
        i = self._vid[vid]
        return slice(int(self.cell_start[i]), int(self.cell_end[i]))

    def midpoint_index(self, vid: int) -> int:
        i = self._vid[vid]
        return int(self.cell_start[i]) + self.network.vessels[i].midpoint_cell()

    def rest_state(self) -> np.ndarray:
        return np.concatenate([self.A0[self._vessel_of_cell], np.zeros(self.n_cells)])

    def vessel_betas(self, theta) -> np.ndarray:
        """``beta`` per vessel and particle, shape ``(n_vessels, P)``."""
        theta = np.asarray(theta, dtype=float).reshape(self.n_params, -1)
        B = np.repeat(self.beta0[:, None], theta.shape[1], axis=1)
        if self.n_params:
            B[self._param_idx] = theta
        return B

    def pressure(self, X, theta=None):
        X = np.asarray(X, dtype=float).reshape(self.dim, -1)
        P = X.shape[1]
        if self.n_params and theta is not None:
            Bv = self.vessel_betas(theta)
        else:
            Bv = np.repeat(self.beta0[:, None], P, 1)
        A = X[: self.n_cells]
        return pressure(A, Bv[self._vessel_of_cell], self.A0[self._vessel_of_cell][:, None], self.network.p_ext)

    def flow(self, X):
        X = np.asarray(X, dtype=float).reshape(self.dim, -1)
        return X[: self.n_cells] * X[self.n_cells:]

    # -- boundary states --------------------------------------------------
    def boundary_states(self, A, u, Bv, t):
        """Left and right boundary states of every vessel, each ``(n_vessels, P)``."""
        net = self.network
        nv = len(net.vessels)
        P = A.shape[1]
        LA, Lu = np.empty((nv, P)), np.empty((nv, P))
        RA, Ru = np.empty((nv, P)), np.empty((nv, P))
        first, last = self.cell_start, self.cell_end - 1
        i = self._inlet
        LA[i], Lu[i] = inlet_bc(t, A[first[i]], u[first[i]], Bv[i], net.inlet_area, net.rho)
        o = self._outlets
        if o.size:
            RA[o], Ru[o] = outlet_bc(A[last[o]], u[last[o]], Bv[o], self.dt, net.viscosity, net.rho)
        if self._jp.size:
            jp, j1, j2 = self._jp, self._jc1, self._jc2
            A0 = self.A0[:, None]
            (pa, pu), (a1, v1), (a2, v2) = bifurcation_solve(
                (A[last[jp]], u[last[jp]], Bv[jp], A0[jp]),
                (A[first[j1]], u[first[j1]], Bv[j1], A0[j1]),
                (A[first[j2]], u[first[j2]], Bv[j2], A0[j2]), net.rho)
            RA[jp], Ru[jp] = pa, pu
            LA[j1], Lu[j1] = a1, v1
            LA[j2], Lu[j2] = a2, v2
        return (LA, Lu), (RA, Ru)

    # -- drift --------------------------------------------------------------
    def drift(self, X, theta=None, t=0.0):
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        P = X.shape[1]
        net = self.network
        N = self.n_cells
        A, u = X[:N], X[N:]
        if not np.all(A > 0):
            raise NonPhysical("non-positive area in state")
        if self.n_params:
            theta = np.asarray(theta, dtype=float).reshape(self.n_params, -1)
            if theta.shape[1] == 1 and P > 1:
                theta = np.repeat(theta, P, axis=1)
            Bv = self.vessel_betas(theta)
        else:
            Bv = np.repeat(self.beta0[:, None], P, axis=1)
        (LA, Lu), (RA, Ru) = self.boundary_states(A, u, Bv, t)

        Ap = np.empty((self.n_pad, P))
        up = np.empty((self.n_pad, P))
        Ap[self._cell_pos], up[self._cell_pos] = A, u
        Ap[self._lghost], up[self._lghost] = np.repeat(LA, 2, axis=0), np.repeat(Lu, 2, axis=0)
        Ap[self._rghost], up[self._rghost] = np.repeat(RA, 2, axis=0), np.repeat(Ru, 2, axis=0)

        sA = np.zeros_like(Ap)
        su = np.zeros_like(up)
        sA[1:-1] = _minmod(Ap[1:-1] - Ap[:-2], Ap[2:] - Ap[1:-1])
        su[1:-1] = _minmod(up[1:-1] - up[:-2], up[2:] - up[1:-1])

        q = self._iface_left
        vq = self._vessel_of_pad[q]
        bf = Bv[vq]
        a0f = self.A0[vq][:, None]
        AL, uL = Ap[q] + 0.5 * sA[q], up[q] + 0.5 * su[q]
        AR, uR = Ap[q + 1] - 0.5 * sA[q + 1], up[q + 1] - 0.5 * su[q + 1]
        if np.any(AL <= 0) or np.any(AR <= 0):
            raise NonPhysical("non-positive reconstructed area")
        f1L, f2L = physical_flux(AL, uL, bf, a0f, net.rho, net.p_ext)
        f1R, f2R = physical_flux(AR, uR, bf, a0f, net.rho, net.p_ext)
        speed = np.maximum(np.abs(uL) + wave_speed(AL, bf, net.rho), np.abs(uR) + wave_speed(AR, bf, net.rho))

        G1 = np.empty((self.n_faces, P))
        G2 = np.empty((self.n_faces, P))
        G1[self._iface_id] = 0.5 * (f1L + f1R) - 0.5 * speed * (AR - AL)
        G2[self._iface_id] = 0.5 * (f2L + f2R) - 0.5 * speed * (uR - uL)
        A0v = self.A0[:, None]
        G1[self.face_start], G2[self.face_start] = physical_flux(LA, Lu, Bv, A0v, net.rho, net.p_ext)
        rf = self.face_start + np.array([v.n_cells for v in net.vessels])
        G1[rf], G2[rf] = physical_flux(RA, Ru, Bv, A0v, net.rho, net.p_ext)

        dx = self._dx_cell[:, None]
        dA = -(G1[self._cell_rface] - G1[self._cell_lface]) / dx
        du = -(G2[self._cell_rface] - G2[self._cell_lface]) / dx - net.viscosity * u / A
        F = np.vstack([dA, du])
        return F[:, 0] if squeeze else F

    # -- row locality -------------------------------------------------------
    def row_support(self, rows):
        """Cells within the limiter stencil of ``rows``, plus the cells feeding
        the boundary or junction state when a row is next to a vessel end."""
        rows = np.asarray(rows, dtype=int)
        N = self.n_cells
        cells = np.unique(rows % N)
        out = set()
        first, last = self.cell_start, self.cell_end - 1
        parent_of = {}
        for k, jp in enumerate(self._jp):
            parent_of[self._jc1[k]] = (jp, self._jc2[k])
            parent_of[self._jc2[k]] = (jp, self._jc1[k])
        child_of = {jp: (self._jc1[k], self._jc2[k]) for k, jp in enumerate(self._jp)}
        for c in cells:
            v = self._vessel_of_cell[c]
            lo, hi = max(first[v], c - 2), min(last[v], c + 2)
            out.update(range(lo, hi + 1))
            if c - 2 < first[v] and v in parent_of:
                jp, sib = parent_of[v]
                out.update([last[jp], first[sib], first[v]])
            if c + 2 > last[v] and v in child_of:
                c1, c2 = child_of[v]
                out.update([first[c1], first[c2], last[v]])
        cells_sup = np.array(sorted(out), dtype=int)
        return np.concatenate([cells_sup, cells_sup + N])

    def drift_rows(self, rows, X_support, support, theta, t=0.0):
        """Rows of the drift; cells outside ``support`` are set to rest.

        This reuses the vectorised full evaluation, so it is exact but saves
        no work.
        """
        X = np.repeat(self.rest_state()[:, None], X_support.shape[1], axis=1)
        X[support] = X_support
        return self.drift(X, theta, t)[np.asarray(rows, dtype=int)]

    def cfl(self, X, theta=None, dt=None) -> float:
        X = np.asarray(X, dtype=float).reshape(self.dim, -1)
        P = X.shape[1]
        if self.n_params and theta is not None:
            Bv = self.vessel_betas(theta)
        else:
            Bv = np.repeat(self.beta0[:, None], P, 1)
        A, u = X[: self.n_cells], X[self.n_cells:]
        speed = np.abs(u) + wave_speed(A, Bv[self._vessel_of_cell], self.network.rho)
        return float(np.max(speed / self._dx_cell[:, None]) * (dt or self.dt))


def step_network(model: BloodFlowModel, X, t: float, dt: float | None = None, theta=None,
                 check_cfl: bool = True):
    """One forward Euler step of the network state ``X`` (``d`` or ``d x P``)."""
    dt = model.dt if dt is None else dt
    if check_cfl:
        nu_cfl = model.cfl(X, theta, dt)
        if nu_cfl >= 1.0:
            warnings.warn(f"CFL number {nu_cfl:.3f} >= 1", CflViolation, stacklevel=2)
    X_new = X + dt * model.drift(X, theta, t)
    if not np.all(np.isfinite(X_new)):
        raise NonPhysical("non-finite state after network step")
    return X_new
