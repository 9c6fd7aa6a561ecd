# reduction.py
"""Well-mixed reductions: chemical master equation, SSA and rate equations.

These are oracles for the spatial solver and the particle sampler.  They are
built from the same ReactionSpec / ExchangeModel objects so both sides share
one set of parameters.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from coupling import ExchangeModel, assemble_coupling
from errors import SolverError, TemplateMismatch
from fockspace import BlockLayout, level_keys, uniform_level

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CmeModel:
    """Copy-number generator; Q[i, j] is the rate from keys[j] to keys[i]."""

    keys: tuple
    Q: np.ndarray
    species: tuple = ("A",)

    def index(self, key):
        key = (key,) if np.isscalar(key) else tuple(key)
        return self.keys.index(key)

    def column_sums(self):
        return self.Q.sum(axis=0)


def _transitions(item, key, volume, species):
    """(target key, rate) pairs leaving `key` for one well-mixed reaction or exchange."""
    index = {s: i for i, s in enumerate(species)}

    if isinstance(item, ExchangeModel):
        if item.kind != "bl-kernel":
            raise TemplateMismatch("boundary-flux exchange has no well-mixed reduction")
        if not item.well_mixed:
            raise TemplateMismatch("spatially varying exchange rates have no well-mixed reduction")
        n = key[index[item.species]]
        return [(_shift(key, index[item.species], 1), item.kappa_in * volume),
                (_shift(key, index[item.species], -1), item.kappa_out * n)]

    if not item.well_mixed:
        raise TemplateMismatch(f"{item.template} with a spatially varying rate has no well-mixed reduction")
    missing = [s for s in item.species if s not in index]
    if missing:
        raise TemplateMismatch(f"species {missing} absent from {species}")
    if item.template == "AA->A":
        s = index[item.species[0]]
        n = key[s]
        return [(_shift(key, s, -1), item.rate * n * (n - 1) / 2.0)]
    if item.template == "AB->C":
        sa, sb, sc = (index[x] for x in item.species)
        target = list(key)
        target[sa] -= 1
        target[sb] -= 1
        target[sc] += 1
        return [(tuple(target), item.rate * key[sa] * key[sb])]
    s = index[item.species[0]]
    if item.template == "A->0":
        return [(_shift(key, s, -1), item.rate * key[s])]
    return [(_shift(key, s, 1), item.rate * volume)]


def _shift(key, s, d):
    out = list(key)
    out[s] += d
    return tuple(out)


def cme_generator(reactions, volume, nmax, species=("A",)):
    """Truncated CME generator; transitions out of 0..nmax are dropped."""
    species = tuple(species)
    caps = (nmax,) * len(species) if np.isscalar(nmax) else tuple(nmax)
    keys = tuple(level_keys(caps))
    pos = {k: i for i, k in enumerate(keys)}
    Q = np.zeros((len(keys), len(keys)))
    for item in reactions:
        for j, key in enumerate(keys):
            for target, rate in _transitions(item, key, volume, species):
                if rate == 0.0 or target not in pos:
                    continue
                Q[pos[target], j] += rate
                Q[j, j] -= rate
    return CmeModel(keys, Q, species)


def cme_solve(model, p0, t):
    """exp(Q t) p0 for scalar t, or one row per entry of an array of times."""
    p0 = np.asarray(p0, dtype=float)
    times = np.atleast_1d(np.asarray(t, dtype=float))
    out = []
    for tk in times:
        p = linalg.expm(model.Q * tk) @ p0
        if not np.all(np.isfinite(p)):
            raise SolverError(f"matrix exponential overflowed at t={tk}")
        out.append(p)
    out = np.array(out)
    return out[0] if np.ndim(t) == 0 else out


def cme_stationary(model):
    """Normalized null vector of Q (the generator must have a single closed class)."""
    A = model.Q.copy()
    A[0, :] = 1.0
    b = np.zeros(len(model.keys))
    b[0] = 1.0
    try:
        return linalg.solve(A, b)
    except linalg.LinAlgError as exc:
        raise SolverError(f"stationary CME solve failed: {exc}") from exc


def trajectory_rng(seed, index):
    """Counter-based stream owned by one trajectory."""
    key = np.array([int(seed) & (2**64 - 1), int(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _ssa_path(model, start, t_final, times, rng):
    Q = model.Q
    state = start
    t = 0.0
    visits = np.empty(len(times), dtype=np.int64)
    k = 0
    while True:
        out_rate = -Q[state, state]
        dwell = rng.exponential(1.0 / out_rate) if out_rate > 0 else np.inf
        while k < len(times) and times[k] < t + dwell:
            visits[k] = state
            k += 1
        if k == len(times) or t + dwell > t_final:
            visits[k:] = state
            return visits
        t += dwell
        rates = Q[:, state].copy()
        rates[state] = 0.0
        state = int(rng.choice(len(rates), p=rates / rates.sum()))


def ssa_run(model, start, t_final, seed, n_paths, times=None, threads=1):
    """Gillespie paths of the CME; returns (times, empirical distributions per time).

    `start` is a state key or an initial probability vector.
    """
    times = np.array([t_final], dtype=float) if times is None else np.asarray(times, dtype=float)
    dist = np.zeros((len(times), len(model.keys)))
    if n_paths == 0:
        return times, dist
    p0 = None
    if np.ndim(start) == 1 and len(start) == len(model.keys) and not isinstance(start, tuple):
        p0 = np.asarray(start, dtype=float)

    def one(i):
        rng = trajectory_rng(seed, i)
        s = int(rng.choice(len(model.keys), p=p0 / p0.sum())) if p0 is not None else model.index(start)
        return _ssa_path(model, s, t_final, times, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = list(pool.map(one, range(n_paths)))
    else:
        paths = [one(i) for i in range(n_paths)]
    for visits in paths:
        dist[np.arange(len(times)), visits] += 1.0
    return times, dist / n_paths


def _rate_equations(reactions, volume, species):
    index = {s: i for i, s in enumerate(species)}
    for item in reactions:
        if not item.well_mixed:
            raise TemplateMismatch("mean-field rate equations need well-mixed rates")

    def rhs(_, n):
        dn = np.zeros_like(n)
        for item in reactions:
            if isinstance(item, ExchangeModel):
                s = index[item.species]
                dn[s] += item.kappa_in * volume - item.kappa_out * n[s]
            elif item.template == "AA->A":
                s = index[item.species[0]]
                dn[s] -= 0.5 * item.rate * n[s] ** 2
            elif item.template == "AB->C":
                sa, sb, sc = (index[x] for x in item.species)
                flux = item.rate * n[sa] * n[sb]
                dn[sa] -= flux
                dn[sb] -= flux
                dn[sc] += flux
            elif item.template == "A->0":
                dn[index[item.species[0]]] -= item.rate * n[index[item.species[0]]]
            else:
                dn[index[item.species[0]]] += item.rate * volume
        return dn

    return rhs


def mean_field_ode(reactions, volume, n0, t, species=("A",)):
    """Deterministic copy-number rate equations evaluated at the times t."""
    n0 = np.atleast_1d(np.asarray(n0, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rhs = _rate_equations(list(reactions), volume, tuple(species))
    if t[-1] == 0.0:
        return np.repeat(n0[:, None], len(t), axis=1)
    sol = solve_ivp(rhs, (0.0, float(t[-1])), n0, method="DOP853", t_eval=t, rtol=1e-13, atol=1e-14)
    if not sol.success:
        raise SolverError(f"rate equations failed: {sol.message}")
    return sol.y


def project_coupling(items, grid, nmax, species=("A",)):
    """Copy-number projection of the spatial couplings, as a CmeModel.

    Column j is the level marginal of Q applied to a unit-mass uniform state on
    keys[j]; with well-mixed rates it equals cme_generator entrywise.
    """
    species = tuple(species)
    caps = (nmax,) * len(species) if np.isscalar(nmax) else tuple(nmax)
    keys = tuple(level_keys(caps))
    layout = BlockLayout(keys, grid.points, species)
    q = assemble_coupling(items, grid, layout)
    Q = np.zeros((len(keys), len(keys)))
    for j, key in enumerate(keys):
        column = uniform_level(grid, caps, key, species)
        out = q.apply_vec(layout.pack(column))
        Q[:, j] = [layout.view(out, k).sum() * grid.cell_volume ** sum(k) for k in keys]
    return CmeModel(keys, Q, species)


def poisson_truncated(mean, nmax):
    p = poisson.pmf(np.arange(nmax + 1), mean)
    return p / p.sum()


def total_variation(p, q):
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())
