# fockspace.py
"""State representation for systems with a varying number of particles.

A state is a truncated family of n-particle densities f_0 ... f_Nmax living on
tensor products of a one-particle grid.  Each level tensor has one axis per
particle slot; an axis runs over the flattened one-particle grid (positions,
then velocities when present).  Densities are cell averages in units of
1/(cell volume)^n, so every integral is a sum times a power of the cell volume.

The normalization follows the chemical diffusion master equation: no binomial
prefactor, i.e. sum_n int f_n = 1.  (The open-subsystem derivation carries an
N-choose-n factor in its definition of f_n; states built that way have to be
rescaled before they are handed to this module.)

Multi-species states key their levels by count tuples (a, b, c); slots are
ordered by species block (A slots, then B, then C) and symmetry only holds
within a block.
"""

from dataclasses import dataclass, field
from itertools import permutations, product
import logging
import math

import numpy as np
from scipy.stats import poisson

from errors import DimensionMismatch, GridError, StateSpaceTooLarge

logger = logging.getLogger(__name__)

MAX_ENTRIES = 10**7
BOUNDARY_KINDS = ("reflecting", "open-with-reservoir")
FACES = ("lower", "upper")


# ---------------- Grid ----------------

@dataclass(frozen=True)
class PhaseGrid:
    """Cell-centered finite-volume grid of the one-particle state space.

    Open faces are the lower/upper ends of the first spatial axis.
    """

    spatial_cells: int
    cell_width: float
    dim: int = 1
    velocity_cells: int | None = None
    velocity_cutoff: float | None = None
    boundary_kind: str = "reflecting"
    open_faces: tuple = ()

    def __post_init__(self):
        if int(self.spatial_cells) < 2:
            raise GridError(f"spatial_cells must be >= 2, got {self.spatial_cells}")
        if not self.cell_width > 0:
            raise GridError(f"cell_width must be positive, got {self.cell_width}")
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.velocity_cells is not None:
            if int(self.velocity_cells) < 2:
                raise GridError(f"velocity_cells must be >= 2, got {self.velocity_cells}")
            if self.velocity_cutoff is None or not self.velocity_cutoff > 0:
                raise GridError("velocity_cutoff must be positive when a velocity grid is present")
        if self.boundary_kind not in BOUNDARY_KINDS:
            raise GridError(f"boundary_kind must be one of {BOUNDARY_KINDS}, got {self.boundary_kind!r}")
        faces = tuple(self.open_faces)
        if self.boundary_kind == "open-with-reservoir" and not faces:
            faces = FACES
        if self.boundary_kind == "reflecting" and faces:
            raise GridError("reflecting grids cannot declare open faces")
        for face in faces:
            if face not in FACES:
                raise GridError(f"unknown face {face!r}; expected one of {FACES}")
        object.__setattr__(self, "open_faces", faces)

    @property
    def has_velocities(self):
        return self.velocity_cells is not None

    @property
    def spatial_shape(self):
        return (self.spatial_cells,) * self.dim

    @property
    def velocity_shape(self):
        return (self.velocity_cells,) * self.dim if self.has_velocities else ()

    @property
    def one_particle_shape(self):
        return self.spatial_shape + self.velocity_shape

    @property
    def points(self):
        return math.prod(self.one_particle_shape)

    @property
    def axes_per_particle(self):
        return len(self.one_particle_shape)

    @property
    def spatial_volume_element(self):
        return self.cell_width ** self.dim

    @property
    def velocity_width(self):
        if not self.has_velocities:
            return 1.0
        return 2.0 * self.velocity_cutoff / self.velocity_cells

    @property
    def velocity_volume_element(self):
        return self.velocity_width ** self.dim if self.has_velocities else 1.0

    @property
    def cell_volume(self):
        return self.spatial_volume_element * self.velocity_volume_element

    @property
    def domain_length(self):
        return self.spatial_cells * self.cell_width

    @property
    def domain_volume(self):
        return self.domain_length ** self.dim

    @property
    def centers(self):
        return (np.arange(self.spatial_cells) + 0.5) * self.cell_width

    @property
    def velocity_centers(self):
        if not self.has_velocities:
            return np.zeros(0)
        # built around zero so v[j] == -v[Gv-1-j] holds bitwise
        return (np.arange(self.velocity_cells) - (self.velocity_cells - 1) / 2.0) * self.velocity_width

    def is_open(self, face):
        return face in self.open_faces

    def cell_of(self, x):
        """Spatial cell index (per axis) containing point(s) x."""
        idx = np.floor(np.asarray(x, dtype=float) / self.cell_width).astype(int)
        return np.clip(idx, 0, self.spatial_cells - 1)

    def velocity_cell_of(self, v):
        idx = np.floor((np.asarray(v, dtype=float) + self.velocity_cutoff) / self.velocity_width).astype(int)
        return np.clip(idx, 0, self.velocity_cells - 1)

    def flat_index(self, spatial_idx, velocity_idx=None):
        """Flat one-particle index from per-axis spatial (and velocity) indices."""
        parts = list(np.atleast_1d(spatial_idx))
        if self.has_velocities:
            parts += list(np.atleast_1d(velocity_idx))
        return int(np.ravel_multi_index(tuple(int(p) for p in parts), self.one_particle_shape))


def level_keys(caps):
    """All count tuples with 0 <= count <= cap per species, in lexicographic order."""
    caps = tuple(int(c) for c in caps)
    if any(c < 0 for c in caps):
        raise DimensionMismatch(f"species caps must be >= 0, got {caps}")
    return [tuple(k) for k in product(*(range(c + 1) for c in caps))]


def check_state_size(grid, keys, cap=MAX_ENTRIES):
    total = sum(grid.points ** sum(k) for k in keys)
    if total > cap:
        raise StateSpaceTooLarge(f"state space has {total} entries, cap is {cap}")
    return total


# ---------------- Densities ----------------

@dataclass(frozen=True)
class FockDensity:
    """Immutable family of level tensors keyed by species-count tuples."""

    levels: dict
    species: tuple = ("A",)

    def __post_init__(self):
        species = tuple(self.species)
        clean = {}
        for key, value in self.levels.items():
            key = (int(key),) if np.isscalar(key) else tuple(int(k) for k in key)
            if len(key) != len(species):
                raise DimensionMismatch(f"level key {key} does not match species {species}")
            arr = np.array(value, dtype=float)
            if arr.ndim != sum(key):
                raise DimensionMismatch(f"level {key} has rank {arr.ndim}, expected {sum(key)}")
            arr.setflags(write=False)
            clean[key] = arr
        object.__setattr__(self, "levels", dict(sorted(clean.items())))
        object.__setattr__(self, "species", species)

    @classmethod
    def from_levels(cls, levels, species=("A",)):
        return cls({(n,): f_n for n, f_n in enumerate(levels)}, species)

    @property
    def keys(self):
        return list(self.levels)

    @property
    def nmax(self):
        return max(sum(k) for k in self.levels)

    @property
    def is_multispecies(self):
        return len(self.species) > 1

    def __getitem__(self, key):
        if np.isscalar(key):
            key = (int(key),)
        return self.levels[tuple(key)]

    def level(self, n):
        return self[(n,)]

    def replace(self, updates):
        levels = dict(self.levels)
        for key, value in updates.items():
            levels[(key,) if np.isscalar(key) else tuple(key)] = value
        return FockDensity(levels, self.species)

    def map(self, func):
        return FockDensity({k: func(k, v) for k, v in self.levels.items()}, self.species)

    def min_entry(self):
        return min((float(v.min()) for v in self.levels.values() if v.size), default=0.0)


def _check_consistent(f, grid):
    m = grid.points
    for key, arr in f.levels.items():
        if arr.shape != (m,) * sum(key):
            raise DimensionMismatch(f"level {key} has shape {arr.shape}, grid expects {(m,) * sum(key)}")


def total_mass(f, grid):
    _check_consistent(f, grid)
    return float(sum(arr.sum() * grid.cell_volume ** arr.ndim for arr in f.levels.values()))


def symmetrize(f_n, blocks=None):
    """Average a level tensor over slot permutations within each species block."""
    out = np.asarray(f_n, dtype=float)
    rank = out.ndim
    blocks = (rank,) if blocks is None else tuple(blocks)
    if sum(blocks) != rank:
        raise DimensionMismatch(f"blocks {blocks} do not cover rank {rank}")
    start = 0
    for size in blocks:
        if size > 1:
            block_axes = range(start, start + size)
            perms = list(permutations(block_axes))
            acc = np.zeros_like(out)
            for perm in perms:
                order = list(range(rank))
                order[start:start + size] = perm
                acc += np.transpose(out, order)
            out = acc / len(perms)
        start += size
    return out


def symmetrize_density(f):
    return f.map(lambda key, arr: symmetrize(arr, key))


def marginal_copy_number(f, grid):
    """Integral of every level, aligned with f.keys (index n for single species)."""
    _check_consistent(f, grid)
    return np.array([arr.sum() * grid.cell_volume ** arr.ndim for arr in f.levels.values()])


def marginal_density_field(f, grid, species=None):
    """Expected particle density per one-particle cell, sum_n n int f_n(x, rest) d rest."""
    _check_consistent(f, grid)
    field = np.zeros(grid.points)
    for key, arr in f.levels.items():
        start = 0
        for s, count in zip(f.species, key):
            if species is None or s == species:
                for slot in range(start, start + count):
                    others = tuple(a for a in range(arr.ndim) if a != slot)
                    field += arr.sum(axis=others) * grid.cell_volume ** (arr.ndim - 1)
            start += count
    return field.reshape(grid.one_particle_shape)


def spatial_density(field, grid):
    """Integrate the velocity axes out of a one-particle field."""
    if not grid.has_velocities:
        return field
    axes = tuple(range(grid.dim, 2 * grid.dim))
    return field.sum(axis=axes) * grid.velocity_volume_element


# ---------------- Constructors ----------------

def vacuum(grid, nmax, species=("A",)):
    caps = (nmax,) * len(species) if np.isscalar(nmax) else tuple(nmax)
    m = grid.points
    levels = {k: np.zeros((m,) * sum(k)) for k in level_keys(caps)}
    levels[(0,) * len(species)] = np.ones(())
    return FockDensity(levels, species)


def uniform_level(grid, nmax, n, species=("A",)):
    """All mass at count n (int or tuple), uniform over phase space."""
    key = (n,) if np.isscalar(n) else tuple(n)
    f = vacuum(grid, nmax, species)
    volume = grid.points * grid.cell_volume
    return f.replace({(0,) * len(species): np.zeros(()),
                      key: np.full((grid.points,) * sum(key), volume ** -sum(key))})


def product_state(grid, p, rho=None):
    """Single-species product state f_n = p_n prod_i rho(x_i); rho defaults to uniform."""
    m = grid.points
    rho = np.full(m, 1.0 / (m * grid.cell_volume)) if rho is None else np.asarray(rho, float).ravel()
    levels = []
    for n, p_n in enumerate(p):
        f_n = np.asarray(float(p_n))
        for _ in range(n):
            f_n = np.multiply.outer(f_n, rho)
        levels.append(f_n)
    return FockDensity.from_levels(levels)


def poisson_uniform(grid, nmax, mean):
    """Truncated Poisson copy numbers with uniformly placed particles."""
    p = poisson.pmf(np.arange(nmax + 1), mean)
    return product_state(grid, p / p.sum())


# ---------------- Block layout ----------------

@dataclass(frozen=True)
class BlockLayout:
    """Ordered level keys laid out end to end in one flat vector."""

    keys: tuple
    points: int
    species: tuple = ("A",)
    offsets: dict = field(init=False)
    total: int = field(init=False)

    def __post_init__(self):
        keys = tuple(tuple(k) for k in self.keys)
        offsets, pos = {}, 0
        for k in keys:
            offsets[k] = pos
            pos += self.points ** sum(k)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "total", pos)

    @classmethod
    def for_density(cls, f, grid):
        return cls(tuple(f.keys), grid.points, f.species)

    def shape(self, key):
        return (self.points,) * sum(key)

    def size(self, key):
        return self.points ** sum(key)

    def slice(self, key):
        start = self.offsets[key]
        return slice(start, start + self.size(key))

    def view(self, vec, key):
        return vec[self.slice(key)].reshape(self.shape(key))

    def pack(self, f):
        vec = np.zeros(self.total)
        for key in self.keys:
            if key in f.levels:
                vec[self.slice(key)] = f.levels[key].ravel()
        return vec

    def unpack(self, vec):
        return FockDensity({k: self.view(vec, k) for k in self.keys}, self.species)

    def __contains__(self, key):
        return tuple(key) in self.offsets


# ---------------- Particles ----------------

@dataclass(frozen=True)
class ParticleConfiguration:
    """Particles as parallel arrays; ids are persistent labels."""

    species: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray | None = None
    ids: np.ndarray | None = None
    time: float = 0.0

    def __post_init__(self):
        species = np.asarray(self.species, dtype="<U8").reshape(-1)
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2:
            positions = positions.reshape(len(species), -1) if len(species) else positions.reshape(0, 1)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "positions", positions)
        if self.velocities is not None:
            object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=float).reshape(positions.shape))
        ids = np.arange(len(species)) if self.ids is None else np.asarray(self.ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.species)

    def counts(self, species_order):
        return tuple(int(np.sum(self.species == s)) for s in species_order)

    def check_inside(self, grid):
        if len(self) and (np.any(self.positions < 0.0) or np.any(self.positions > grid.domain_length)):
            raise GridError("particle outside the domain")
        if self.velocities is not None and not np.all(np.isfinite(self.velocities)):
            raise GridError("non-finite particle velocity")
