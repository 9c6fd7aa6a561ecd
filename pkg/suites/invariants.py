# suites/invariants.py
"""Invariant checks run by `openfock validate` on a parsed experiment."""

from functools import cached_property

import numpy as np

from coupling import ExchangeModel, audit_conservation, boundary_flux, check_gc_balance
from coupling import mean_field_force, random_test_densities, reservoir_distribution
from fockspace import marginal_copy_number, symmetrize_density
from reduction import cme_generator, cme_solve, poisson_truncated, project_coupling, total_variation
from solver import HierarchyOperator, integrate, stationary
from suites import Suite

suite = Suite("invariants")

AUDIT_DENSITIES = 50


class ValidationContext:
    """Lazily computed artifacts shared by the checks of one config."""

    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = threads

    @cached_property
    def problem(self):
        return self.cfg.problem(self.threads)

    @cached_property
    def operator(self):
        return HierarchyOperator(self.problem)

    @cached_property
    def solution(self):
        return integrate(self.problem)

    @property
    def exchange(self):
        return next((c for c in self.cfg.couplings if isinstance(c, ExchangeModel)), None)

    @property
    def reactions(self):
        return [c for c in self.cfg.couplings if not isinstance(c, ExchangeModel)]

    @property
    def well_mixed(self):
        """All couplings reduce exactly to a copy-number CME."""
        if not self.cfg.couplings:
            return False
        ex = self.exchange
        if ex is not None and (ex.kind != "bl-kernel" or not ex.well_mixed):
            return False
        return all(rx.well_mixed for rx in self.reactions)

    @cached_property
    def cme(self):
        return cme_generator(self.cfg.couplings, self.cfg.grid.domain_volume, self.cfg.nmax, self.cfg.species)


@suite.check("coupling_conservation", 1e-10)
def coupling_conservation(ctx):
    if not ctx.cfg.couplings or not ctx.operator.coupling.closed:
        return None
    densities = random_test_densities(ctx.operator.layout, ctx.cfg.grid, AUDIT_DENSITIES, seed=ctx.cfg.seed % 2**32)
    return audit_conservation(ctx.operator.coupling, ctx.cfg.grid, densities)


@suite.check("transport_column_sums", 1e-12)
def transport_column_sums(ctx):
    if ctx.cfg.mode == "none":
        return None
    worst = 0.0
    for jumps in ctx.operator.jumps.values():
        if not len(jumps.rate):
            continue
        M = jumps.matrix()
        worst = max(worst, float(np.abs(np.asarray(M.sum(axis=0))).max() / abs(M).max()))
    return worst


@suite.check("mass_residual", 1e-8)
def mass_residual(ctx):
    if not ctx.operator.coupling.closed:
        return None
    _, report = ctx.solution
    return max(report.mass_residual)


@suite.check("negativity", 1e-10)
def negativity(ctx):
    _, report = ctx.solution
    return -min(report.min_entry)


@suite.check("leakage", 1e-6)
def leakage(ctx):
    _, report = ctx.solution
    return report.leakage[-1]


@suite.check("level_symmetry", 1e-12)
def level_symmetry(ctx):
    f, _ = ctx.solution
    sym = symmetrize_density(f)
    worst = 0.0
    for key in f.keys:
        arr = f[key]
        scale = float(np.abs(arr).max()) if arr.size else 0.0
        if scale > 0:
            worst = max(worst, float(np.abs(arr - sym[key]).max()) / scale)
    return worst


@suite.check("cme_projection", 1e-10)
def cme_projection(ctx):
    if not ctx.well_mixed:
        return None
    cfg = ctx.cfg
    projected = project_coupling(cfg.couplings, cfg.grid, cfg.nmax, cfg.species)
    Q = ctx.cme.Q
    return float(np.abs(projected.Q - Q).max() / max(1.0, np.abs(Q).max()))


@suite.check("cme_marginal", 1e-6)
def cme_marginal(ctx):
    if not ctx.well_mixed or ctx.cfg.grid.open_faces:
        return None
    _, report = ctx.solution
    p0 = marginal_copy_number(ctx.cfg.initial, ctx.cfg.grid)
    ref = cme_solve(ctx.cme, p0, np.array(report.times))
    return max(total_variation(p, q) for p, q in zip(report.marginals, ref))


def _gc_applicable(ctx):
    ex = ctx.exchange
    cfg = ctx.cfg
    return (ex is not None and ex.kind == "bl-kernel" and cfg.resolved["exchange"]["balanced"]
            and not cfg.transport.pair.active and len(cfg.species) == 1)


@suite.check("gc_balance", 1e-12)
def gc_balance(ctx):
    if not _gc_applicable(ctx):
        return None
    return check_gc_balance(ctx.exchange, ctx.cfg.grid, ctx.cfg.transport, nmax=min(ctx.problem.caps[0], 4))


@suite.check("gc_poisson", 1e-10)
def gc_poisson(ctx):
    """Stationary copy numbers of an ideal gas under balanced exchange are Poisson."""
    if not _gc_applicable(ctx) or ctx.reactions or np.any(ctx.cfg.transport.one_body_potential(ctx.cfg.grid)):
        return None
    ex = ctx.exchange
    grid = ctx.cfg.grid
    mean = float(np.broadcast_to(ex.kappa_in, grid.spatial_shape).sum() * grid.spatial_volume_element / ex.kappa_out)
    p = marginal_copy_number(stationary(ctx.problem), grid)
    return total_variation(p, poisson_truncated(mean, ctx.problem.caps[0]))


@suite.check("boundary_flux_null", 1e-14)
def boundary_flux_null(ctx):
    ex = ctx.exchange
    if ex is None or ex.kind != "boundary-flux":
        return None
    grid = ctx.cfg.grid
    f1 = reservoir_distribution(ex, grid).ravel()
    rng = np.random.default_rng(ctx.cfg.seed % 2**32)
    worst = 0.0
    for n in range(min(max(ctx.problem.caps), 2) + 1):
        f_n = rng.random((grid.points,) * n)
        flux = boundary_flux(f_n, np.multiply.outer(f_n, f1), ex, grid)
        worst = max(worst, float(np.abs(flux).max()))
    return worst


@suite.check("mean_field_midpoint", 1e-12)
def mean_field_midpoint(ctx):
    ex = ctx.exchange
    grid = ctx.cfg.grid
    if not ctx.cfg.resolved["transport"]["mean_field"] or len(grid.open_faces) != 2:
        return None
    force = mean_field_force(ex, grid, ctx.cfg.transport.pair, points=[0.5 * grid.domain_length])
    return abs(float(force[0]))
