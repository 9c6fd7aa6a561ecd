# solver.py
"""Time integration and stationary states of the truncated hierarchy.

    d f_n / dt = A_n f_n + (Q f)_n,    n = 0 .. Nmax

A_n is the level transport generator, Q the assembled couplings.  The
truncation is closed: coupling channels that would leave the layout are not
applied, and the flux they would carry is accumulated as leakage.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.sparse.linalg import splu

from coupling import ExchangeModel, ReactionSpec, assemble_coupling
from errors import DimensionMismatch, NonUniqueStationaryState, SolverError, StabilityError, StateSpaceTooLarge
from fockspace import MAX_ENTRIES, BlockLayout, FockDensity, check_state_size, level_keys
from transport import MODES, TransportSpec, transport_jumps

logger = logging.getLogger(__name__)

SCHEMES = ("rk4", "implicit-euler")
SAFETY = 0.9
NEGATIVE_WARN = -1e-10
LEAKAGE_WARN = 1e-8

# Named special cases of the general equation: transport mode plus the
# coupling kinds they allow.
RECOVERY_MAP = {
    "open-liouville": {"mode": "liouville", "exchange": ("boundary-flux",), "reactions": False},
    "bergman-lebowitz": {"mode": "liouville", "exchange": ("bl-kernel",), "reactions": False},
    "cdme": {"mode": "diffusion", "exchange": ("bl-kernel",), "reactions": True},
    "langevin-cdme": {"mode": "klein-kramers", "exchange": ("bl-kernel",), "reactions": True},
}


def recovery_map(name):
    try:
        return RECOVERY_MAP[name]
    except KeyError:
        raise SolverError(f"unknown model {name!r}; expected one of {sorted(RECOVERY_MAP)}") from None


def check_model(name, mode, couplings):
    """Raise when the transport mode or coupling kinds fall outside a named model."""
    preset = recovery_map(name)
    if mode != preset["mode"]:
        raise SolverError(f"model {name} uses {preset['mode']} transport, got {mode}")
    for c in couplings:
        if isinstance(c, ReactionSpec) and not preset["reactions"]:
            raise SolverError(f"model {name} has no reactions")
        if isinstance(c, ExchangeModel) and c.kind not in preset["exchange"]:
            raise SolverError(f"model {name} does not allow {c.kind} exchange")


@dataclass(frozen=True)
class HierarchyProblem:
    grid: object
    transport: TransportSpec
    initial: FockDensity
    nmax: object
    t_final: float
    dt: float
    mode: str = "diffusion"
    couplings: tuple = ()
    scheme: str = "rk4"
    species: tuple = ("A",)
    record_every: int = 1
    threads: int = 1
    cap: int = MAX_ENTRIES

    def __post_init__(self):
        object.__setattr__(self, "couplings", tuple(self.couplings))
        object.__setattr__(self, "species", tuple(self.species))
        if self.mode not in MODES:
            raise SolverError(f"unknown transport mode {self.mode!r}")
        if self.scheme not in SCHEMES:
            raise SolverError(f"unknown scheme {self.scheme!r}")
        if not self.dt > 0:
            raise StabilityError(f"dt must be positive, got {self.dt}")
        if self.t_final < 0:
            raise SolverError(f"t_final must be >= 0, got {self.t_final}")
        if tuple(self.initial.species) != self.species:
            raise DimensionMismatch(f"initial species {self.initial.species} != problem species {self.species}")
        missing = [k for k in self.initial.keys if k not in self.layout]
        if missing:
            raise DimensionMismatch(f"initial levels {missing} lie outside the truncation")
        check_state_size(self.grid, self.layout.keys, self.cap)

    @property
    def caps(self):
        return (int(self.nmax),) * len(self.species) if np.isscalar(self.nmax) else tuple(self.nmax)

    @property
    def layout(self):
        return BlockLayout(tuple(level_keys(self.caps)), self.grid.points, self.species)


@dataclass
class SolveReport:
    times: list = field(default_factory=list)
    marginals: list = field(default_factory=list)
    mass_residual: list = field(default_factory=list)
    leakage: list = field(default_factory=list)
    min_entry: list = field(default_factory=list)
    keys: tuple = ()

    def record(self, t, marginal, residual, leakage, min_entry):
        self.times.append(float(t))
        self.marginals.append(np.asarray(marginal, dtype=float))
        self.mass_residual.append(float(residual))
        self.leakage.append(float(leakage))
        self.min_entry.append(float(min_entry))

    def rows(self):
        for i, t in enumerate(self.times):
            yield [t, *self.marginals[i].tolist(), self.mass_residual[i], self.leakage[i], self.min_entry[i]]

    def header(self):
        if all(len(k) == 1 for k in self.keys):
            names = [f"p_{k[0]}" for k in self.keys]
        else:
            names = ["p_" + "_".join(str(c) for c in k) for k in self.keys]
        return ["time", *names, "mass_residual", "leakage", "min_entry"]


class HierarchyOperator:
    """Transport and coupling of one problem, evaluated level by level."""

    def __init__(self, prob):
        self.prob = prob
        self.grid = prob.grid
        self.layout = prob.layout
        self.jumps = {}
        for key in self.layout.keys:
            slots = tuple(s for s, k in zip(prob.species, key) for _ in range(k))
            self.jumps[key] = transport_jumps(prob.grid, prob.transport, sum(key), prob.mode, slots)
        self.coupling = assemble_coupling(prob.couplings, prob.grid, self.layout)
        self.weights = np.concatenate([np.full(self.layout.size(k), self.grid.cell_volume ** sum(k))
                                       for k in self.layout.keys])

    def level_rhs(self, vec, key):
        f_n = vec[self.layout.slice(key)]
        out = self.jumps[key].apply(f_n)
        return out + self.coupling.apply_level(vec, key).ravel()

    def rhs(self, vec):
        keys = self.layout.keys
        threads = max(1, int(self.prob.threads))
        if threads == 1 or len(keys) == 1:
            parts = [self.level_rhs(vec, k) for k in keys]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda k: self.level_rhs(vec, k), keys))
        return np.concatenate(parts)

    def max_exit_rate(self):
        rate = 0.0
        for key in self.layout.keys:
            total = self.jumps[key].exit_rates() + self.coupling.exit_rates(key).ravel()
            if total.size:
                rate = max(rate, float(total.max()))
        return rate

    def mass(self, vec):
        return float(self.weights @ vec)

    def marginal(self, vec):
        return np.array([vec[self.layout.slice(k)].sum() * self.grid.cell_volume ** sum(k) for k in self.layout.keys])

    def matrix(self):
        if self.layout.total > self.prob.cap:
            raise StateSpaceTooLarge(f"generator has {self.layout.total} rows, cap is {self.prob.cap}")
        transport = sparse.block_diag([self.jumps[k].matrix() for k in self.layout.keys], format="csr")
        return (transport + self.coupling.matrix()).tocsr()


def stability_bound(prob, op=None):
    """Largest rk4 step: SAFETY / max total exit rate.

    For one particle under pure diffusion this is SAFETY * dx^2 / (2 d D_max).
    """
    op = HierarchyOperator(prob) if op is None else op
    rate = op.max_exit_rate()
    return math.inf if rate == 0.0 else SAFETY / rate


def _check_finite(vec):
    if not np.all(np.isfinite(vec)):
        raise SolverError("NaN or Inf in the state vector")


def _rk4(op, vec, dt):
    k1 = op.rhs(vec)
    k2 = op.rhs(vec + 0.5 * dt * k1)
    k3 = op.rhs(vec + 0.5 * dt * k2)
    k4 = op.rhs(vec + dt * k3)
    return vec + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class _ImplicitEuler:
    def __init__(self, op, dt):
        Q = op.matrix()
        self.lu = splu((sparse.identity(Q.shape[0], format="csc") - dt * Q).tocsc())

    def __call__(self, vec):
        return self.lu.solve(vec)


def step(f, prob, dt, op=None):
    if dt == 0:
        return f
    if dt < 0:
        raise StabilityError(f"dt must be >= 0, got {dt}")
    op = HierarchyOperator(prob) if op is None else op
    vec = op.layout.pack(f)
    if prob.scheme == "rk4":
        bound = stability_bound(prob, op)
        if dt > bound * (1.0 + 1e-12):
            raise StabilityError(f"dt={dt:g} exceeds the rk4 stability bound {bound:g}")
        out = _rk4(op, vec, dt)
    else:
        out = _ImplicitEuler(op, dt)(vec)
    _check_finite(out)
    return op.layout.unpack(out)


def leakage_monitor(f, prob, op=None):
    """Instantaneous coupling flux that would leave the top of the truncation."""
    op = HierarchyOperator(prob) if op is None else op
    return op.coupling.leakage_rate(op.layout.pack(f))


def integrate(prob):
    op = HierarchyOperator(prob)
    vec = op.layout.pack(prob.initial)
    report = SolveReport(keys=op.layout.keys)
    if not op.coupling.closed:
        logger.info("open coupling in problem: total mass is not conserved")

    steps = int(math.ceil(prob.t_final / prob.dt - 1e-12)) if prob.t_final > 0 else 0
    dt = prob.t_final / steps if steps else 0.0
    if steps and prob.scheme == "rk4":
        bound = stability_bound(prob, op)
        if dt > bound * (1.0 + 1e-12):
            raise StabilityError(f"dt={prob.dt:g} exceeds the rk4 stability bound {bound:g}")
    advance = _ImplicitEuler(op, dt) if steps and prob.scheme == "implicit-euler" else (lambda v: _rk4(op, v, dt))

    residual, leaked = 0.0, 0.0
    lowest = min(0.0, float(vec.min()))
    rate = op.coupling.leakage_rate(vec)
    report.record(0.0, op.marginal(vec), residual, leaked, lowest)
    warned = False
    for i in range(1, steps + 1):
        vec = advance(vec)
        _check_finite(vec)
        new_rate = op.coupling.leakage_rate(vec)
        leaked += 0.5 * dt * (rate + new_rate)
        rate = new_rate
        residual = max(residual, abs(1.0 - op.mass(vec)))
        lowest = min(lowest, float(vec.min()))
        if not warned and (lowest < NEGATIVE_WARN or leaked > LEAKAGE_WARN):
            logger.warning("t=%.6g min entry %.3e leakage %.3e", i * dt, lowest, leaked)
            warned = True
        if i % prob.record_every == 0 or i == steps:
            t = prob.t_final if i == steps else i * dt
            report.record(t, op.marginal(vec), residual, leaked, lowest)
            logger.info("t=%.6g mass residual %.3e leakage %.3e min entry %.3e", t, residual, leaked, lowest)
    return op.layout.unpack(vec), report


def _reachable(Q, start):
    """Indices reachable from the start set along nonzero generator entries."""
    n = Q.shape[0]
    edges = sparse.coo_matrix(Q.T)
    keep = (edges.row != edges.col) & (edges.data != 0)
    rows = np.concatenate([edges.row[keep], np.full(len(start), n)])
    cols = np.concatenate([edges.col[keep], start])
    graph = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + 1, n + 1))
    order = breadth_first_order(graph, n, directed=True, return_predecessors=False)
    return np.sort(order[order != n])


def closed_classes(Q):
    """Number of closed communicating classes of a generator (edges j -> i where Q[i, j] > 0)."""
    edges = sparse.coo_matrix(Q.T)
    keep = (edges.row != edges.col) & (edges.data != 0)
    graph = sparse.csr_matrix((np.ones(keep.sum()), (edges.row[keep], edges.col[keep])), shape=Q.shape)
    count, labels = connected_components(graph, directed=True, connection="strong")
    leaves = np.ones(count, dtype=bool)
    src, dst = labels[edges.row[keep]], labels[edges.col[keep]]
    leaves[src[src != dst]] = False
    return int(leaves.sum())


def stationary(prob):
    """Stationary density reachable from the initial state, normalized to unit mass."""
    op = HierarchyOperator(prob)
    Q = op.matrix()
    start = np.nonzero(op.layout.pack(prob.initial))[0]
    if not len(start):
        raise SolverError("initial state has no support")
    reach = _reachable(Q, start)
    Qr = Q[reach][:, reach].tocsr()
    classes = closed_classes(Qr)
    if classes != 1:
        raise NonUniqueStationaryState(f"{classes} closed classes reachable from the initial state")
    A = Qr.tolil()
    A[0, :] = op.weights[reach]
    b = np.zeros(len(reach))
    b[0] = 1.0
    try:
        p = splu(A.tocsc()).solve(b)
    except RuntimeError as exc:
        raise SolverError(f"stationary solve failed: {exc}") from exc
    _check_finite(p)
    vec = np.zeros(op.layout.total)
    vec[reach] = p
    return op.layout.unpack(vec)


def split_generator(f, prob):
    """Liouville, heat-exchange and material-exchange parts of the right-hand side.

    The three increments sum to the full Klein-Kramers right-hand side.
    """
    if prob.mode != "klein-kramers":
        raise SolverError("the heat/material split needs klein-kramers transport")
    op = HierarchyOperator(prob)
    vec = op.layout.pack(f)
    free = HierarchyOperator(replace(prob, mode="liouville", couplings=()))
    full = HierarchyOperator(replace(prob, couplings=()))
    liouville = free.rhs(vec)
    heat = full.rhs(vec) - liouville
    material = op.coupling.apply_vec(vec)
    unpack = op.layout.unpack
    return {"liouville": unpack(liouville), "heat": unpack(heat), "material": unpack(material)}
