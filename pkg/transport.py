# transport.py
"""n-particle transport generators on the finite-volume grid.

Every generator here is discretized as a set of jumps between neighbouring
cells of the level tensor (source index, target index, rate).  Diffusion uses
exponentially fitted face rates and advection terms are first-order upwind.
Both only ever move mass from one cell to another, so the discrete operators
conserve mass exactly and their materialized matrices have vanishing column sums.

Expanded level layout: a level-n tensor reshaped to one_particle_shape * n
has, for particle i, `dim` spatial axes followed by `dim` velocity axes.
"""

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np
from scipy import sparse
from scipy.special import erfc, exprel

from errors import GridError, StateSpaceTooLarge, TransportError
from fockspace import MAX_ENTRIES
from guards import requires_position_grid, requires_velocity_grid

logger = logging.getLogger(__name__)

MODES = ("diffusion", "klein-kramers", "liouville", "none")
POTENTIALS = ("zero", "harmonic")
PAIR_KINDS = ("none", "soft")


@dataclass(frozen=True)
class PairPotential:
    """Finite-range soft repulsion V(r) = strength * (1 - r/range)^2 for r < range."""

    kind: str = "none"
    strength: float = 0.0
    range: float = 0.0

    def __post_init__(self):
        if self.kind not in PAIR_KINDS:
            raise TransportError(f"unknown pair potential {self.kind!r}")
        if self.kind == "soft" and not self.range > 0:
            raise TransportError("soft pair potential needs a positive range")

    @property
    def active(self):
        return self.kind != "none" and self.strength != 0.0

    @property
    def finite_range(self):
        return self.range if self.kind == "soft" else 0.0

    def value(self, r):
        r = np.asarray(r, dtype=float)
        if not self.active:
            return np.zeros_like(r)
        return np.where(r < self.range, self.strength * (1.0 - r / self.range) ** 2, 0.0)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        if not self.active:
            return np.zeros_like(r)
        return np.where(r < self.range, -2.0 * self.strength / self.range * (1.0 - r / self.range), 0.0)


@dataclass(frozen=True)
class TransportSpec:
    """Drift, diffusion and friction data shared by all levels.

    `potential` is a named one-body form or a table over the spatial grid, in
    energy units.  The diffusion drift is A = -D grad(U) / kT so that
    exp(-U/kT) is stationary.  `external_force` (spatial_shape + (dim,)) is an
    extra one-body force, used for the reservoir mean field.
    """

    diffusion: object = 1.0
    potential: object = "zero"
    stiffness: float = 0.0
    center: object = None
    pair: PairPotential = field(default_factory=PairPotential)
    friction: object = 0.0
    mass: float = 1.0
    temperature_energy: float = 1.0
    external_force: object = None
    species_diffusion: tuple = ()

    def __post_init__(self):
        for d in [self.diffusion] + [v for _, v in self.species_diffusion]:
            D = np.atleast_2d(np.asarray(d, dtype=float))
            if D.shape[0] != D.shape[1] or not np.allclose(D, D.T):
                raise TransportError("diffusion matrix must be square and symmetric")
            if np.linalg.eigvalsh(D).min() < -1e-14:
                raise TransportError("diffusion matrix must be positive semidefinite")
        if np.any(np.asarray(self.friction, dtype=float) < 0):
            raise TransportError("friction must be >= 0")
        if not self.mass > 0:
            raise TransportError("mass must be positive")
        if not self.temperature_energy > 0:
            raise TransportError("temperature_energy must be positive")
        if isinstance(self.potential, str) and self.potential not in POTENTIALS:
            raise TransportError(f"unknown potential {self.potential!r}")

    @property
    def eta(self):
        eta = np.asarray(self.friction, dtype=float)
        if eta.ndim and not np.all(eta == eta.flat[0]):
            raise TransportError("configuration-dependent friction is not discretized; give a constant")
        return float(eta.flat[0]) if eta.ndim else float(eta)

    def diffusion_diagonal(self, species, dim):
        D = dict(self.species_diffusion).get(species, self.diffusion)
        D = np.asarray(D, dtype=float)
        if D.ndim == 0:
            return np.full(dim, float(D))
        if D.shape != (dim, dim):
            raise TransportError(f"diffusion matrix shape {D.shape} does not match dim {dim}")
        if np.any(D - np.diag(np.diag(D))):
            raise TransportError("only diagonal diffusion matrices are discretized")
        return np.diag(D).copy()

    def max_diffusion(self, dim):
        values = [self.diffusion] + [v for _, v in self.species_diffusion]
        return max(float(np.max(np.abs(np.asarray(v, dtype=float)))) for v in values)

    def one_body_potential(self, grid):
        if not isinstance(self.potential, str):
            table = np.asarray(self.potential, dtype=float)
            if table.shape != grid.spatial_shape:
                raise TransportError(f"tabulated potential has shape {table.shape}, grid is {grid.spatial_shape}")
            return table
        if self.potential == "zero":
            return np.zeros(grid.spatial_shape)
        center = grid.domain_length / 2.0 if self.center is None else float(self.center)
        mesh = np.meshgrid(*([grid.centers] * grid.dim), indexing="ij")
        return 0.5 * self.stiffness * sum((x - center) ** 2 for x in mesh)

    def force_field(self, grid):
        if self.external_force is None:
            return None
        force = np.asarray(self.external_force, dtype=float)
        if grid.dim == 1 and force.shape == grid.spatial_shape:
            force = force[..., None]
        if force.shape != grid.spatial_shape + (grid.dim,):
            raise TransportError(f"external force has shape {force.shape}")
        return force


# ---------------- Jump representation ----------------

@dataclass(frozen=True)
class Jumps:
    """Cell-to-cell transfer rates over one flattened level."""

    src: np.ndarray
    dst: np.ndarray
    rate: np.ndarray
    size: int

    @classmethod
    def collect(cls, parts, size):
        if not parts:
            empty = np.zeros(0, dtype=np.int64)
            return cls(empty, empty, np.zeros(0), size)
        src = np.concatenate([np.ravel(s) for s, _, _ in parts]).astype(np.int64)
        dst = np.concatenate([np.ravel(d) for _, d, _ in parts]).astype(np.int64)
        rate = np.concatenate([np.ravel(np.broadcast_to(r, np.shape(s))) for s, _, r in parts]).astype(float)
        keep = rate != 0.0
        return cls(src[keep], dst[keep], rate[keep], size)

    def apply(self, vec):
        w = self.rate * vec[self.src]
        return np.bincount(self.dst, w, self.size) - np.bincount(self.src, w, self.size)

    def exit_rates(self):
        return np.bincount(self.src, self.rate, self.size)

    def matrix(self):
        off = sparse.coo_matrix((self.rate, (self.dst, self.src)), shape=(self.size, self.size))
        return (off - sparse.diags(self.exit_rates())).tocsr()


def _along(values, axis, ndim):
    shape = [1] * ndim
    shape[axis] = len(values)
    return np.reshape(values, shape)


def _on_particle(table, i, grid, ndim):
    """Place a spatial table on particle i's spatial axes."""
    base = i * grid.axes_per_particle
    shape = [1] * base + list(grid.spatial_shape) + [1] * (ndim - base - grid.dim)
    return np.reshape(table, shape)


def _faces(idx, axis):
    length = idx.shape[axis]
    return (np.take(idx, range(0, length - 1), axis=axis),
            np.take(idx, range(1, length), axis=axis))


def _face_average(values, axis):
    length = values.shape[axis]
    return 0.5 * (np.take(values, range(0, length - 1), axis=axis) + np.take(values, range(1, length), axis=axis))


def level_potential(grid, spec, n):
    """Total potential sum_i U(q_i) + sum_{i<j} V(q_i - q_j) on an expanded level.

    Velocity axes are kept at length one.
    """
    app = grid.axes_per_particle
    ndim = n * app
    pot_shape = []
    for _ in range(n):
        pot_shape += list(grid.spatial_shape) + [1] * (app - grid.dim)
    U = np.zeros([1] * ndim)
    u1 = spec.one_body_potential(grid)
    for i in range(n):
        U = U + _on_particle(u1, i, grid, ndim)
    if spec.pair.active:
        coords = [[_along(grid.centers, i * app + d, ndim) for d in range(grid.dim)] for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                r = np.sqrt(sum((coords[i][d] - coords[j][d]) ** 2 for d in range(grid.dim)))
                U = U + spec.pair.value(r)
    return np.broadcast_to(U, tuple(pot_shape)).copy()


def _slots(n, slot_species):
    return ("A",) * n if slot_species is None else tuple(slot_species)


def _diffusion_jumps(grid, spec, n, slot_species):
    """Exponentially fitted (Scharfetter-Gummel) face rates.

    Across a face with drift Peclet number x = A dx / D the hop rates are
    D/dx^2 B(-x) forward and D/dx^2 B(x) backward, B(x) = x / (e^x - 1).
    They are positive and make exp(-U/kT) an exact null vector.
    """
    shape = grid.one_particle_shape * n
    size = math.prod(shape)
    idx = np.arange(size).reshape(shape)
    dx, kT = grid.cell_width, spec.temperature_energy
    U = level_potential(grid, spec, n)
    force = spec.force_field(grid)
    parts = []
    for i, s in enumerate(_slots(n, slot_species)):
        D = spec.diffusion_diagonal(s, grid.dim)
        for d in range(grid.dim):
            if D[d] == 0.0:
                continue
            ax = i * grid.axes_per_particle + d
            x = -np.diff(U, axis=ax) / kT
            if force is not None:
                fc = np.broadcast_to(_on_particle(force[..., d], i, grid, len(shape)), U.shape)
                x = x + _face_average(fc, ax) * dx / kT
            src, dst = _faces(idx, ax)
            parts.append((src, dst, D[d] / dx**2 / exprel(-x)))
            parts.append((dst, src, D[d] / dx**2 / exprel(x)))
    return Jumps.collect(parts, size)


def _klein_kramers_jumps(grid, spec, n, friction):
    shape = grid.one_particle_shape * n
    ndim = len(shape)
    size = math.prod(shape)
    idx = np.arange(size).reshape(shape)
    dx, dv = grid.cell_width, grid.velocity_width
    m, kT = spec.mass, spec.temperature_energy
    vc = grid.velocity_centers
    vface = 0.5 * (vc[:-1] + vc[1:])
    U = level_potential(grid, spec, n)
    force = spec.force_field(grid)
    G = grid.spatial_cells
    parts = []
    for i in range(n):
        for d in range(grid.dim):
            ax = i * grid.axes_per_particle + d
            vax = i * grid.axes_per_particle + grid.dim + d
            v = _along(vc, vax, ndim)
            # streaming in position
            src, dst = _faces(idx, ax)
            parts.append((src, dst, np.maximum(v, 0.0) / dx))
            parts.append((dst, src, np.maximum(-v, 0.0) / dx))
            # specular reflection at closed walls
            mirror = np.flip(idx, axis=vax)
            if d > 0 or not grid.is_open("upper"):
                parts.append((np.take(idx, [G - 1], axis=ax), np.take(mirror, [G - 1], axis=ax),
                              np.maximum(v, 0.0) / dx))
            if d > 0 or not grid.is_open("lower"):
                parts.append((np.take(idx, [0], axis=ax), np.take(mirror, [0], axis=ax),
                              np.maximum(-v, 0.0) / dx))
            # force, friction and velocity noise
            F = -np.gradient(U, dx, axis=ax)
            if force is not None:
                F = F + _on_particle(force[..., d], i, grid, ndim)
            drift = F / m - friction * _along(vface, vax, ndim) / m
            noise = friction * kT / (m**2 * dv**2)
            src, dst = _faces(idx, vax)
            parts.append((src, dst, np.maximum(drift, 0.0) / dv + noise))
            parts.append((dst, src, np.maximum(-drift, 0.0) / dv + noise))
    return Jumps.collect(parts, size)


def transport_jumps(grid, spec, n, mode, slot_species=None):
    if mode not in MODES:
        raise TransportError(f"unknown transport mode {mode!r}")
    if mode == "none" or n == 0:
        return Jumps.collect([], grid.points ** n)
    if mode == "diffusion":
        if grid.has_velocities:
            raise TransportError("diffusion mode needs a position-only grid; use klein-kramers")
        return _diffusion_jumps(grid, spec, n, slot_species)
    if not grid.has_velocities:
        raise TransportError(f"{mode} mode needs a velocity grid")
    friction = spec.eta if mode == "klein-kramers" else 0.0
    return _klein_kramers_jumps(grid, spec, n, friction)


# ---------------- Operators ----------------

@requires_position_grid
def apply_diffusion(f_n, grid, spec, slot_species=None):
    f_n = np.asarray(f_n, dtype=float)
    jumps = transport_jumps(grid, spec, f_n.ndim, "diffusion", slot_species)
    return jumps.apply(f_n.ravel()).reshape(f_n.shape)


@requires_velocity_grid
def apply_klein_kramers(f_n, grid, spec, slot_species=None):
    f_n = np.asarray(f_n, dtype=float)
    jumps = transport_jumps(grid, spec, f_n.ndim, "klein-kramers", slot_species)
    return jumps.apply(f_n.ravel()).reshape(f_n.shape)


@requires_velocity_grid
def apply_liouville(f_n, grid, spec, slot_species=None):
    return apply_klein_kramers(f_n, grid, replace(spec, friction=0.0), slot_species)


def heat_exchange(f_n, grid, spec, slot_species=None):
    """Thermostat part T = K - Lambda of the Klein-Kramers generator."""
    return apply_klein_kramers(f_n, grid, spec, slot_species) - apply_liouville(f_n, grid, spec, slot_species)


@dataclass(frozen=True)
class GeneratorMatrix:
    matrix: object
    mode: str
    level: int

    def apply(self, f_n):
        f_n = np.asarray(f_n, dtype=float)
        return (self.matrix @ f_n.ravel()).reshape(f_n.shape)

    def column_sum_residual(self):
        scale = abs(self.matrix).max() if self.matrix.nnz else 1.0
        return float(np.abs(np.asarray(self.matrix.sum(axis=0))).max() / scale) if self.matrix.shape[0] else 0.0


def assemble_generator(n, grid, spec, mode="diffusion", cap=MAX_ENTRIES, slot_species=None):
    size = grid.points ** n
    if size > cap:
        raise StateSpaceTooLarge(f"level {n} has {size} entries, cap is {cap}")
    jumps = transport_jumps(grid, spec, n, mode, slot_species)
    return GeneratorMatrix(jumps.matrix(), mode, n)


# ---------------- Reference states ----------------

def maxwell_boltzmann(grid, spec, temperature_energy=None):
    """Discrete Maxwell-Boltzmann density over the velocity cells (integrates to 1)."""
    kT = spec.temperature_energy if temperature_energy is None else temperature_energy
    vc = grid.velocity_centers
    mesh = np.meshgrid(*([vc] * grid.dim), indexing="ij")
    w = np.exp(-spec.mass * sum(v**2 for v in mesh) / (2.0 * kT))
    return w / (w.sum() * grid.velocity_volume_element)


def boltzmann_density(grid, spec, n=1):
    """exp(-H/kT) on level n, normalized to unit mass; H includes m v^2/2 on velocity grids."""
    U = level_potential(grid, spec, n)
    f = np.exp(-(U - U.min()) / spec.temperature_energy) if U.size else np.ones(())
    if grid.has_velocities and n:
        mb = maxwell_boltzmann(grid, spec)
        shape = grid.one_particle_shape * n
        f = np.broadcast_to(f, shape).copy()
        for i in range(n):
            base = i * grid.axes_per_particle + grid.dim
            f = f * np.reshape(mb, [1] * base + list(grid.velocity_shape) + [1] * (len(shape) - base - grid.dim))
    f = np.reshape(f, (grid.points,) * n)
    return f / (f.sum() * grid.cell_volume ** n)


def stationarity_residual(apply, f_n, grid):
    """L1 norm of a generator applied to a level density."""
    f_n = np.asarray(f_n, dtype=float)
    return float(np.abs(apply(f_n)).sum() * grid.cell_volume ** f_n.ndim)


def check_velocity_cutoff(grid, spec, tol=1e-8):
    """Maxwell-Boltzmann mass beyond the velocity cutoff; raises when above tol."""
    if not grid.has_velocities:
        return 0.0
    sigma = math.sqrt(spec.temperature_energy / spec.mass)
    tail_1d = float(erfc(grid.velocity_cutoff / (math.sqrt(2.0) * sigma)))
    tail = 1.0 - (1.0 - tail_1d) ** grid.dim
    if tail > tol:
        raise GridError(f"velocity cutoff {grid.velocity_cutoff} leaves Maxwell-Boltzmann tail {tail:.3g} > {tol:g}")
    return tail
