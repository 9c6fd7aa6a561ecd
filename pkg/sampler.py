# sampler.py
"""Particle simulation of the same process the hierarchy solver integrates.

One step is transport over dt followed by the event pass (Lie splitting).
Events are thinned Poisson clocks: every eligible pair, particle or source
fires with probability 1 - exp(-rate dt).  A particle touched by several
firing events keeps one of them uniformly at random and the rest are canceled.

Particles are put in a canonical order (species, then coordinates) before any
random draw, so the draws never depend on labels; ids only show up in the
event log.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from coupling import ExchangeModel, ReactionSpec
from errors import SamplerError, TemplateMismatch
from fockspace import FockDensity, ParticleConfiguration, level_keys
from reduction import trajectory_rng

logger = logging.getLogger(__name__)

DYNAMICS = ("brownian", "langevin", "ballistic")


@dataclass(frozen=True)
class SamplerRun:
    grid: object
    transport: object
    dynamics: str
    dt: float
    t_final: float
    initial: object
    couplings: tuple = ()
    seed: int = 0
    n_trajectories: int = 1
    species: tuple = ("A",)
    nmax: object = 10
    record_every: int = 1
    threads: int = 1
    keep_logs: bool = True

    def __post_init__(self):
        object.__setattr__(self, "couplings", tuple(self.couplings))
        object.__setattr__(self, "species", tuple(self.species))
        if self.dynamics not in DYNAMICS:
            raise SamplerError(f"unknown dynamics {self.dynamics!r}")
        if not self.dt > 0:
            raise SamplerError(f"dt must be positive, got {self.dt}")
        if self.t_final < 0 or self.n_trajectories < 0:
            raise SamplerError("t_final and n_trajectories must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise SamplerError("seed must fit in 64 bits")
        for c in self.couplings:
            if isinstance(c, ExchangeModel) and c.kind != "bl-kernel":
                raise SamplerError("the particle sampler realizes bl-kernel exchange only")
        check_couplings(self.couplings, self.species)

    @property
    def steps(self):
        return int(math.ceil(self.t_final / self.dt - 1e-12)) if self.t_final > 0 else 0

    @property
    def caps(self):
        return (int(self.nmax),) * len(self.species) if np.isscalar(self.nmax) else tuple(self.nmax)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    reactants: tuple
    products: tuple


@dataclass
class EnsembleReport:
    times: np.ndarray
    keys: tuple
    probabilities: np.ndarray
    stderr: np.ndarray
    overflow: np.ndarray
    density: dict = field(default_factory=dict)
    event_counts: dict = field(default_factory=dict)
    logs: list = field(default_factory=list)
    n_trajectories: int = 0

    def rows(self):
        for i, t in enumerate(self.times):
            yield [float(t), *self.probabilities[i].tolist(), *self.stderr[i].tolist()]

    def header(self):
        if all(len(k) == 1 for k in self.keys):
            names = [str(k[0]) for k in self.keys]
        else:
            names = ["_".join(str(c) for c in k) for k in self.keys]
        return ["time", *[f"p_{n}" for n in names], *[f"se_{n}" for n in names]]


# ---------------- Configuration helpers ----------------

def canonical(cfg):
    """Reorder particles by species, then position, then velocity."""
    if len(cfg) < 2:
        return cfg
    cols = [cfg.species]
    cols += [cfg.positions[:, d] for d in range(cfg.positions.shape[1])]
    if cfg.velocities is not None:
        cols += [cfg.velocities[:, d] for d in range(cfg.velocities.shape[1])]
    order = np.lexsort(cols[::-1])
    return _take(cfg, order)


def _take(cfg, idx):
    return ParticleConfiguration(cfg.species[idx], cfg.positions[idx],
                                 None if cfg.velocities is None else cfg.velocities[idx],
                                 cfg.ids[idx], cfg.time)


def sample_configuration(f, grid, rng):
    """Draw particles from a FockDensity: a level by its mass, then cells, then uniform offsets."""
    keys = f.keys
    masses = np.array([arr.sum() * grid.cell_volume ** arr.ndim for arr in f.levels.values()])
    if np.any(masses < -1e-12):
        raise SamplerError("cannot sample from a density with negative level mass")
    masses = np.clip(masses, 0.0, None)
    key = keys[int(rng.choice(len(keys), p=masses / masses.sum()))]
    n = sum(key)
    species = np.array([s for s, k in zip(f.species, key) for _ in range(k)], dtype="<U8")
    dim = grid.dim
    if n == 0:
        vel = np.zeros((0, dim)) if grid.has_velocities else None
        return ParticleConfiguration(species, np.zeros((0, dim)), vel)
    weights = np.clip(np.asarray(f[key], dtype=float).ravel(), 0.0, None)
    flat = int(rng.choice(weights.size, p=weights / weights.sum()))
    cells = np.unravel_index(flat, (grid.points,) * n)
    positions = np.zeros((n, dim))
    velocities = np.zeros((n, dim)) if grid.has_velocities else None
    for i, c in enumerate(cells):
        idx = np.unravel_index(int(c), grid.one_particle_shape)
        positions[i] = (np.array(idx[:dim]) + rng.random(dim)) * grid.cell_width
        if velocities is not None:
            lower = np.array(idx[dim:]) * grid.velocity_width - grid.velocity_cutoff
            velocities[i] = lower + rng.random(dim) * grid.velocity_width
    return ParticleConfiguration(species, positions, velocities)


def _reflect(x, length):
    """Fold coordinates into [0, length]; returns positions and a velocity sign."""
    k = np.floor(x / length)
    y = np.mod(x, 2.0 * length)
    y = np.where(y > length, 2.0 * length - y, y)
    sign = np.where(np.mod(k, 2.0) == 1.0, -1.0, 1.0)
    return y, sign


# ---------------- Transport ----------------

def _forces(cfg, spec, grid):
    x = cfg.positions
    F = np.zeros_like(x)
    if not len(cfg):
        return F
    if isinstance(spec.potential, str):
        if spec.potential == "harmonic":
            center = grid.domain_length / 2.0 if spec.center is None else float(spec.center)
            F -= spec.stiffness * (x - center)
    else:
        U = spec.one_body_potential(grid)
        cells = tuple(grid.cell_of(x).T)
        for d in range(grid.dim):
            F[:, d] -= np.gradient(U, grid.cell_width, axis=d)[cells]
    extra = spec.force_field(grid)
    if extra is not None:
        F += extra[tuple(grid.cell_of(x).T)]
    if spec.pair.active and len(cfg) > 1:
        diff = x[:, None, :] - x[None, :, :]
        r = np.sqrt((diff**2).sum(axis=-1))
        np.fill_diagonal(r, np.inf)
        mag = -spec.pair.derivative(r)
        mag[~np.isfinite(r)] = 0.0
        F += (mag[..., None] * diff / np.where(np.isfinite(r), r, 1.0)[..., None]).sum(axis=1)
    return F


def _escape_guard(x, length):
    if np.any(x < 0.0) or np.any(x > length):
        raise SamplerError("particle left the domain after reflection")


def step_transport(cfg, run, spec, rng):
    """Advance positions (and velocities) by one dt.

    langevin uses B-A-O-A-B: half kick, half drift, exact Ornstein-Uhlenbeck
    velocity update, half drift, half kick.  ballistic is the same with no
    friction or noise.  Walls reflect and flip the normal velocity.
    """
    grid, dt, L = run.grid, run.dt, run.grid.domain_length
    if not len(cfg):
        return cfg
    x = cfg.positions.copy()
    if run.dynamics == "brownian":
        kT = spec.temperature_energy
        D = np.array([spec.diffusion_diagonal(s, grid.dim) for s in cfg.species])
        F = _forces(cfg, spec, grid)
        x = x + D * F / kT * dt + np.sqrt(2.0 * D * dt) * rng.standard_normal(x.shape)
        x, _ = _reflect(x, L)
        _escape_guard(x, L)
        return replace(cfg, positions=x)

    if cfg.velocities is None:
        raise SamplerError(f"{run.dynamics} dynamics needs particle velocities")
    m, kT = spec.mass, spec.temperature_energy
    eta = spec.eta if run.dynamics == "langevin" else 0.0
    v = cfg.velocities.copy()
    v = v + 0.5 * dt * _forces(cfg, spec, grid) / m
    x, sign = _reflect(x + 0.5 * dt * v, L)
    v = v * sign
    if eta > 0.0:
        c = math.exp(-eta * dt / m)
        v = c * v + math.sqrt((1.0 - c * c) * kT / m) * rng.standard_normal(v.shape)
    x, sign = _reflect(x + 0.5 * dt * v, L)
    v = v * sign
    _escape_guard(x, L)
    moved = replace(cfg, positions=x, velocities=v)
    v = v + 0.5 * dt * _forces(moved, spec, grid) / m
    return replace(moved, velocities=v)


# ---------------- Events ----------------

def _lookup(table, grid, x):
    if table is None or np.isscalar(table):
        return None
    values = np.asarray(table, dtype=float).reshape(grid.spatial_shape)
    return values[tuple(grid.cell_of(x).T)]


def _source(table, grid, scalar):
    """Total rate and per-cell placement weights of a spatial source."""
    if np.isscalar(table) or table is None:
        return scalar * grid.domain_volume, None
    values = np.asarray(table, dtype=float).ravel()
    return float(values.sum() * grid.spatial_volume_element), values / values.sum()


def _candidates(cfg, run, dt, rng):
    """All eligible events with their firing draws, in a label-free order."""
    grid = run.grid
    out = []
    for ci, c in enumerate(run.couplings):
        if isinstance(c, ExchangeModel):
            members = np.nonzero(cfg.species == c.species)[0]
            kout = _lookup(c.kappa_out, grid, cfg.positions[members])
            rate = np.full(len(members), float(c.kappa_out)) if kout is None else kout
            fire = rng.random(len(members)) < -np.expm1(-rate * dt)
            out += [(ci, "bl-deletion", (int(i),)) for i in members[fire]]
            total, _ = _source(c.kappa_in, grid, c.kappa_in)
            if rng.random() < -math.expm1(-total * dt):
                out.append((ci, "bl-insertion", ()))
            continue
        if c.template in ("AA->A", "AB->C"):
            if c.template == "AA->A":
                members = np.nonzero(cfg.species == c.species[0])[0]
                a, b = np.triu_indices(len(members), k=1)
                a, b = members[a], members[b]
            else:
                ia = np.nonzero(cfg.species == c.species[0])[0]
                ib = np.nonzero(cfg.species == c.species[1])[0]
                a, b = (g.ravel() for g in np.meshgrid(ia, ib, indexing="ij"))
            r = np.sqrt(((cfg.positions[a] - cfg.positions[b]) ** 2).sum(axis=-1))
            rate = c.pair_rate(r)
            fire = rng.random(len(a)) < -np.expm1(-rate * dt)
            out += [(ci, c.template, (int(i), int(j))) for i, j in zip(a[fire], b[fire])]
        elif c.template == "A->0":
            members = np.nonzero(cfg.species == c.species[0])[0]
            kd = _lookup(c.rate_field, grid, cfg.positions[members])
            rate = np.full(len(members), c.rate) if kd is None else kd
            fire = rng.random(len(members)) < -np.expm1(-rate * dt)
            out += [(ci, c.template, (int(i),)) for i in members[fire]]
        else:
            total, _ = _source(c.rate_field, grid, c.rate)
            if rng.random() < -math.expm1(-total * dt):
                out.append((ci, c.template, ()))
    return out


def _mb_velocity(rng, kT, mass, dim):
    return rng.normal(0.0, math.sqrt(kT / mass), dim)


def _place_source(table, grid, rng):
    _, weights = _source(table, grid, 0.0)
    if weights is None:
        return rng.random(grid.dim) * grid.domain_length
    cell = np.unravel_index(int(rng.choice(len(weights), p=weights)), grid.spatial_shape)
    return (np.array(cell) + rng.random(grid.dim)) * grid.cell_width


def _products(c, kind, reactants, cfg, grid, rng):
    """(species, position, velocity) of the particle an accepted event creates."""
    with_v = cfg.velocities is not None
    if kind == "bl-insertion":
        v = _mb_velocity(rng, 1.0 / c.beta, c.mass, grid.dim) if with_v else None
        return [(c.species, _place_source(c.kappa_in, grid, rng), v)]
    if kind in ("bl-deletion", "A->0"):
        return []
    if kind == "0->A":
        v = _mb_velocity(rng, c.temperature_energy, c.mass, grid.dim) if with_v else None
        return [(c.species[0], _place_source(c.rate_field, grid, rng), v)]
    i, j = reactants
    x1, x2 = cfg.positions[i], cfg.positions[j]
    if c.form == "well-mixed":
        pos = rng.random(grid.dim) * grid.domain_length
    elif c.placement == "uniform-segment":
        pos = x1 + rng.random() * (x2 - x1)
    else:
        pos = 0.5 * (x1 + x2)
    v = None
    if with_v:
        if c.velocity_policy == "inherit":
            v = 0.5 * (cfg.velocities[i] + cfg.velocities[j])
        else:
            v = _mb_velocity(rng, c.temperature_energy, c.mass, grid.dim)
    product = c.species[0] if c.template == "AA->A" else c.species[2]
    return [(product, pos, v)]


def _resolve_conflicts(fired, rng):
    """Each particle touched by several firing events keeps one of them, uniformly at random.

    An event survives when every one of its reactants kept it; source events
    have no reactants and always survive.
    """
    touching = {}
    for k, (_, _, reactants) in enumerate(fired):
        for i in reactants:
            touching.setdefault(i, []).append(k)
    kept = {i: ks[int(rng.integers(len(ks)))] if len(ks) > 1 else ks[0] for i, ks in sorted(touching.items())}
    return [event for k, event in enumerate(fired) if all(kept[i] == k for i in event[2])]


def step_events(cfg, run, dt, rng, log=None):
    """Fire, resolve and apply the events of one step; accepted events go to `log`."""
    if not run.couplings:
        return cfg
    fired = _candidates(cfg, run, dt, rng)
    if not fired:
        return cfg
    accepted = _resolve_conflicts(fired, rng)
    used = {i for _, _, reactants in accepted for i in reactants}

    next_id = int(cfg.ids.max()) + 1 if len(cfg) else 0
    new_species, new_pos, new_vel, new_ids = [], [], [], []
    for ci, kind, reactants in accepted:
        created = _products(run.couplings[ci], kind, reactants, cfg, run.grid, rng)
        ids = []
        for s, pos, v in created:
            new_species.append(s)
            new_pos.append(pos)
            new_vel.append(v)
            new_ids.append(next_id)
            ids.append(next_id)
            next_id += 1
        if log is not None:
            log.append(Event(cfg.time, kind, tuple(int(cfg.ids[i]) for i in reactants), tuple(ids)))

    keep = np.setdiff1d(np.arange(len(cfg)), np.array(sorted(used), dtype=int))
    kept = _take(cfg, keep)
    if not new_species:
        return kept
    dim = run.grid.dim
    positions = np.vstack([kept.positions.reshape(-1, dim), np.array(new_pos).reshape(-1, dim)])
    velocities = None
    if cfg.velocities is not None:
        velocities = np.vstack([kept.velocities.reshape(-1, dim), np.array(new_vel).reshape(-1, dim)])
    out = ParticleConfiguration(np.concatenate([kept.species, np.array(new_species, dtype="<U8")]), positions,
                                velocities, np.concatenate([kept.ids, np.array(new_ids, dtype=np.int64)]), cfg.time)
    _escape_guard(out.positions, run.grid.domain_length)
    return canonical(out)


# ---------------- Ensembles ----------------

def _initial(run, rng):
    if isinstance(run.initial, FockDensity):
        return sample_configuration(run.initial, run.grid, rng)
    if isinstance(run.initial, ParticleConfiguration):
        run.initial.check_inside(run.grid)
        return run.initial
    raise SamplerError("initial must be a ParticleConfiguration or a FockDensity")


def run_trajectory(run, index):
    """One trajectory: copy-number keys at checkpoints, final configuration, event log."""
    rng = trajectory_rng(run.seed, index)
    cfg = canonical(replace(_initial(run, rng), time=0.0))
    log = [] if run.keep_logs else None
    counts = [cfg.counts(run.species)]
    steps = run.steps
    dt = run.dt
    for i in range(1, steps + 1):
        cfg = canonical(step_transport(cfg, run, run.transport, rng))
        cfg = replace(cfg, time=i * dt)
        cfg = step_events(cfg, run, dt, rng, log)
        if i % run.record_every == 0 or i == steps:
            counts.append(cfg.counts(run.species))
    return counts, cfg, log


def checkpoint_times(run):
    steps = run.steps
    if not steps:
        return np.zeros(1)
    dt = run.dt
    ticks = [0] + [i for i in range(1, steps + 1) if i % run.record_every == 0 or i == steps]
    return np.array([i * dt for i in ticks])


def ensemble_run(run):
    """Empirical copy-number distributions, density histograms and event counts."""
    keys = tuple(level_keys(run.caps))
    times = checkpoint_times(run)
    N = run.n_trajectories
    if N == 0:
        zeros = np.zeros((len(times), len(keys)))
        return EnsembleReport(times, keys, zeros, zeros.copy(), np.zeros(len(times)))

    threads = max(1, int(run.threads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda i: run_trajectory(run, i), range(N)))
    else:
        results = [run_trajectory(run, i) for i in range(N)]

    pos = {k: i for i, k in enumerate(keys)}
    hits = np.zeros((len(times), len(keys)))
    overflow = np.zeros(len(times))
    grid = run.grid
    density = {s: np.zeros(grid.spatial_shape) for s in run.species}
    event_counts, logs = {}, []
    for counts, cfg, log in results:
        for t, key in enumerate(counts):
            if key in pos:
                hits[t, pos[key]] += 1.0
            else:
                overflow[t] += 1.0
        for s in run.species:
            x = cfg.positions[cfg.species == s]
            if len(x):
                np.add.at(density[s], tuple(grid.cell_of(x).T), 1.0)
        if log is not None:
            logs.append(log)
            for ev in log:
                event_counts[ev.kind] = event_counts.get(ev.kind, 0) + 1
    logger.debug("ensemble of %d trajectories, %d events", N, sum(event_counts.values()))
    p = hits / N
    se = np.sqrt(p * (1.0 - p) / N)
    density = {s: h / (N * grid.spatial_volume_element) for s, h in density.items()}
    return EnsembleReport(times, keys, p, se, overflow / N, density, event_counts, logs, N)


def check_couplings(couplings, species):
    for c in couplings:
        if not isinstance(c, (ReactionSpec, ExchangeModel)):
            raise TemplateMismatch(f"not a coupling: {c!r}")
        names = (c.species,) if isinstance(c, ExchangeModel) else c.species
        missing = [s for s in names if s not in species]
        if missing:
            raise TemplateMismatch(f"species {missing} absent from {species}")
