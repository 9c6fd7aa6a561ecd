# coupling.py
"""Particle-number-changing operators Q_n and their audits.

Every coupling is split into channels.  A channel reads a source level, may
remove mass from it at a local loss rate, and may deposit the corresponding
gain into the level its shift points at.  Closed couplings (reactions and
insertion/deletion exchange) pair both halves so that the integrated gain
equals the integrated loss; the reservoir boundary flux is an open term and
keeps the halves separate.

Gain routines work on the trailing slot axes only, so they accept stacks of
level tensors (extra leading axes) and can be applied column-wise to
materialize the block matrix.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import logging
import math

import numpy as np
from scipy import sparse
from scipy.integrate import quad

from errors import DimensionMismatch, GridError, TemplateMismatch
from fockspace import BlockLayout, FockDensity, symmetrize, total_mass
from guards import requires_kind, requires_template, requires_velocity_grid
from transport import level_potential

logger = logging.getLogger(__name__)

TEMPLATES = ("AA->A", "AB->C", "A->0", "0->A")
RATE_FORMS = ("well-mixed", "doi", "gaussian")
PLACEMENTS = ("midpoint", "uniform-segment")
VELOCITY_POLICIES = ("maxwell", "inherit")
EXCHANGE_KINDS = ("bl-kernel", "boundary-flux")
F2_MODELS = ("independent", "hard-core")

DEFAULT_SPECIES = {"AA->A": ("A",), "AB->C": ("A", "B", "C"), "A->0": ("A",), "0->A": ("A",)}

# midpoint nodes per axis and cell for pair-rate cell averages
QUADRATURE_NODES = {1: 32, 2: 8, 3: 4}


def _as_table(value):
    if value is None or np.isscalar(value):
        return value
    return tuple(float(x) for x in np.ravel(value))


def _spatial(value, grid):
    """Scalar or flattened table -> array over the spatial grid."""
    if np.isscalar(value):
        return np.full(grid.spatial_shape, float(value))
    table = np.asarray(value, dtype=float)
    if table.size != math.prod(grid.spatial_shape):
        raise DimensionMismatch(f"table with {table.size} entries does not fit grid {grid.spatial_shape}")
    return table.reshape(grid.spatial_shape)


def _phase(spatial_values, grid, velocity_density=None):
    """Spatial table times a velocity density, flattened over one-particle cells."""
    if not grid.has_velocities:
        return np.asarray(spatial_values, dtype=float).ravel()
    vel = np.ones(grid.velocity_shape) if velocity_density is None else velocity_density
    return np.multiply.outer(spatial_values, vel).ravel()


def _mb(grid, kT, mass):
    if not grid.has_velocities:
        return None
    w = np.exp(-mass * sum(v**2 for v in np.meshgrid(*([grid.velocity_centers] * grid.dim), indexing="ij")) / (2.0 * kT))
    return w / (w.sum() * grid.velocity_volume_element)


# ---------------- Specs ----------------

@dataclass(frozen=True)
class ReactionSpec:
    """A reaction template with its rate function.

    rate: lambda_0 [1/time] for AA->A and AB->C (integral of lambda over the
    product position), k_d [1/time] for A->0, birth intensity [1/(time*volume)]
    for 0->A.  rate_field optionally makes the unimolecular rates spatial.
    """

    template: str
    rate: float
    form: str = "well-mixed"
    radius: float = 0.0
    placement: str = "midpoint"
    velocity_policy: str = "maxwell"
    species: tuple = ()
    rate_field: object = None
    temperature_energy: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise TemplateMismatch(f"unknown template {self.template!r}")
        if self.form not in RATE_FORMS:
            raise TemplateMismatch(f"unknown rate form {self.form!r}")
        if self.placement not in PLACEMENTS:
            raise TemplateMismatch(f"unknown placement {self.placement!r}")
        if self.velocity_policy not in VELOCITY_POLICIES:
            raise TemplateMismatch(f"unknown velocity policy {self.velocity_policy!r}")
        if self.rate < 0:
            raise TemplateMismatch("reaction rate must be >= 0")
        if self.form != "well-mixed" and not self.radius > 0:
            raise TemplateMismatch(f"{self.form} rate needs a positive radius")
        species = tuple(self.species) or DEFAULT_SPECIES[self.template]
        if len(species) != len(DEFAULT_SPECIES[self.template]):
            raise TemplateMismatch(f"{self.template} names {len(DEFAULT_SPECIES[self.template])} species, got {species}")
        if self.template == "AB->C" and species[0] == species[1]:
            raise TemplateMismatch("AB->C needs two distinct reactant species; use AA->A")
        if self.bimolecular and self.rate_field is not None:
            raise TemplateMismatch("rate_field applies to A->0 and 0->A only")
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "rate_field", _as_table(self.rate_field))
        if self.rate_field is not None and np.min(self.rate_field) < 0:
            raise TemplateMismatch("rate field must be >= 0")

    @property
    def bimolecular(self):
        return self.template in ("AA->A", "AB->C")

    @property
    def well_mixed(self):
        return self.form == "well-mixed" and self.rate_field is None

    def pair_rate(self, r):
        """Total rate int lambda(y; x1, x2) dy at reactant distance r (continuous space)."""
        r = np.asarray(r, dtype=float)
        if self.form == "well-mixed":
            return np.full_like(r, self.rate)
        if self.form == "doi":
            return np.where(r < self.radius, self.rate, 0.0)
        return self.rate * np.exp(-r**2 / (2.0 * self.radius**2))


@dataclass(frozen=True)
class ExchangeModel:
    """System-reservoir exchange.

    bl-kernel: single-particle insertion with spatial intensity kappa_in
    [1/(time*volume)] and deletion at kappa_out [1/time] per particle; beta and
    mu enter the grand-canonical balance check.  Inserted particles draw
    Maxwell-Boltzmann velocities at kT = 1/beta.
    boundary-flux: reservoir one-particle distribution rho_res * MB at the open
    faces and the pair-conditional model f2 for the mean field.
    """

    kind: str
    kappa_in: object = 0.0
    kappa_out: object = 0.0
    beta: float = 1.0
    mu: float = 0.0
    mass: float = 1.0
    species: str = "A"
    reservoir_density: float = 0.0
    reservoir_temperature: float = 1.0
    f2_model: str = "independent"
    core_radius: float = 0.0
    reservoir_depth: object = None

    def __post_init__(self):
        if self.kind not in EXCHANGE_KINDS:
            raise TemplateMismatch(f"unknown exchange kind {self.kind!r}")
        if self.f2_model not in F2_MODELS:
            raise TemplateMismatch(f"unknown f2 model {self.f2_model!r}")
        object.__setattr__(self, "kappa_in", _as_table(self.kappa_in))
        object.__setattr__(self, "kappa_out", _as_table(self.kappa_out))
        for name in ("kappa_in", "kappa_out", "reservoir_density"):
            if np.min(getattr(self, name)) < 0:
                raise TemplateMismatch(f"{name} must be >= 0")

    @property
    def well_mixed(self):
        return np.isscalar(self.kappa_in) and np.isscalar(self.kappa_out)


# ---------------- Reaction kernels ----------------

@dataclass(frozen=True)
class ReactionKernel:
    """Discrete lambda(y; z, z') = Lambda(z, z') P(y | z, z') / cell_volume.

    Either `independent` (a product-placement vector over y) or `conditional`
    (sparse, shape (M, M*M)) is set.
    """

    Lambda: np.ndarray
    independent: object = None
    conditional: object = None

    def place(self, X, grid):
        """cell_volume * sum_{z,z'} Lambda P(y|z,z') X(..., z, z') -> (..., y)."""
        M = grid.points
        lead = X.shape[:-2]
        flat = (X * self.Lambda).reshape(-1, M * M)
        if self.independent is not None:
            h = flat.sum(axis=1)[:, None] * self.independent[None, :]
        else:
            h = np.asarray((self.conditional @ flat.T).T)
        return grid.cell_volume * h.reshape(lead + (M,))


def _cell_indices(grid):
    idx = np.unravel_index(np.arange(grid.points), grid.one_particle_shape)
    spatial = np.stack(idx[:grid.dim], axis=1)
    velocity = np.stack(idx[grid.dim:], axis=1) if grid.has_velocities else None
    return spatial, velocity


def _nearest_pairs(s):
    """Both cells nearest to half an index sum, weight 1/2 each (same cell twice when even)."""
    return s // 2, (s + 1) // 2


def cell_pair_rates(rx, grid):
    """pair_rate averaged over both cells' extents, by spatial cell offset.

    Indexed by offset + (G - 1) per axis.  Midpoint nodes on each cell; the
    node offsets of two cells are triangularly distributed.
    """
    G, dim = grid.spatial_cells, grid.dim
    if rx.form == "well-mixed":
        return np.full((2 * G - 1,) * dim, float(rx.rate))
    q = QUADRATURE_NODES[dim]
    a = np.arange(q)
    s, counts = np.unique(np.subtract.outer(a, a).ravel(), return_counts=True)
    w = counts / q**2
    k = np.arange(-(G - 1), G)
    sep = (k[:, None] + s[None, :] / q) * grid.cell_width
    r2 = np.zeros([1] * (2 * dim))
    weight = np.ones([1] * (2 * dim))
    for d in range(dim):
        shape = [1] * (2 * dim)
        shape[d], shape[dim + d] = len(k), len(s)
        r2 = r2 + (sep**2).reshape(shape)
        wshape = [1] * (2 * dim)
        wshape[dim + d] = len(s)
        weight = weight * w.reshape(wshape)
    rates = (rx.pair_rate(np.sqrt(r2)) * weight).sum(axis=tuple(range(dim, 2 * dim)))
    # exact symmetry under offset -> -offset
    return 0.5 * (rates + rates[(slice(None, None, -1),) * dim])


@lru_cache(maxsize=64)
def reaction_kernel(rx, grid):
    if not rx.bimolecular:
        raise TemplateMismatch(f"{rx.template} has no pair kernel")
    M = grid.points
    spatial, velocity = _cell_indices(grid)
    offset = spatial[:, None, :] - spatial[None, :, :] + (grid.spatial_cells - 1)
    Lambda = cell_pair_rates(rx, grid)[tuple(np.moveaxis(offset, -1, 0))]
    mb = _mb(grid, rx.temperature_energy, rx.mass)
    spatial_count = math.prod(grid.spatial_shape)

    if rx.form == "well-mixed" and (velocity is None or rx.velocity_policy == "maxwell"):
        vel = None if mb is None else mb * grid.velocity_volume_element
        placement = _phase(np.full(grid.spatial_shape, 1.0 / spatial_count), grid, vel)
        return ReactionKernel(Lambda, independent=placement)

    z1, z2 = np.nonzero(Lambda)
    # spatial target candidates with weights, per reacting pair
    if rx.form == "well-mixed":
        cells = np.arange(spatial_count)
        sp_targets = np.broadcast_to(cells, (len(z1), spatial_count))
        sp_weights = np.full(sp_targets.shape, 1.0 / spatial_count)
    elif rx.placement == "uniform-segment":
        if grid.dim != 1:
            raise GridError("uniform-segment placement is implemented for 1D grids")
        lo = np.minimum(spatial[z1, 0], spatial[z2, 0])
        hi = np.maximum(spatial[z1, 0], spatial[z2, 0])
        width = hi - lo + 1
        cols = np.arange(grid.spatial_cells)
        inside = (cols[None, :] >= lo[:, None]) & (cols[None, :] <= hi[:, None])
        sp_targets = np.broadcast_to(cols, inside.shape)
        sp_weights = np.where(inside, 1.0 / width[:, None], 0.0)
    else:
        combos = []
        for d in range(grid.dim):
            a, b = _nearest_pairs(spatial[z1, d] + spatial[z2, d])
            combos.append((a, b))
        targets, weights = [], []
        for choice in np.ndindex(*([2] * grid.dim)):
            per_axis = [combos[d][c] for d, c in enumerate(choice)]
            targets.append(np.ravel_multi_index(tuple(per_axis), grid.spatial_shape))
            weights.append(np.full(len(z1), 0.5 ** grid.dim))
        sp_targets = np.stack(targets, axis=1)
        sp_weights = np.stack(weights, axis=1)

    if velocity is None:
        rows, vals = sp_targets, sp_weights
    else:
        nv = math.prod(grid.velocity_shape)
        if rx.velocity_policy == "maxwell":
            v_targets = np.broadcast_to(np.arange(nv), (len(z1), nv))
            v_weights = np.broadcast_to(mb.ravel() * grid.velocity_volume_element, (len(z1), nv))
        else:
            targets, weights = [], []
            for choice in np.ndindex(*([2] * grid.dim)):
                per_axis = []
                for d, c in enumerate(choice):
                    a, b = _nearest_pairs(velocity[z1, d] + velocity[z2, d])
                    per_axis.append((a, b)[c])
                targets.append(np.ravel_multi_index(tuple(per_axis), grid.velocity_shape))
                weights.append(np.full(len(z1), 0.5 ** grid.dim))
            v_targets = np.stack(targets, axis=1)
            v_weights = np.stack(weights, axis=1)
        rows = (sp_targets[:, :, None] * nv + v_targets[:, None, :]).reshape(len(z1), -1)
        vals = (sp_weights[:, :, None] * v_weights[:, None, :]).reshape(len(z1), -1)

    cols = np.broadcast_to((z1 * M + z2)[:, None], rows.shape)
    keep = vals != 0.0
    conditional = sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(M, M * M)).tocsr()
    return ReactionKernel(Lambda, conditional=conditional)


def check_rate_symmetry(rx, grid):
    """Max |Lambda(z, z') - Lambda(z', z)| for same-species pair reactions."""
    Lam = reaction_kernel(rx, grid).Lambda
    return float(np.abs(Lam - Lam.T).max())


# ---------------- Tensor helpers (trailing axes) ----------------

def _pair_rate_tensor(Lam, rank, block_a, block_b=None):
    """Sum of Lambda over slot pairs: i<j inside block_a, or block_a x block_b."""
    out = np.zeros([1] * rank)
    pairs = []
    if block_b is None:
        pairs = [(i, j) for i in block_a for j in block_a if i < j]
    else:
        pairs = [(i, j) for i in block_a for j in block_b]
    M = Lam.shape[0]
    for i, j in pairs:
        shape = [1] * rank
        shape[i] = M
        shape[j] = M
        term = Lam if i < j else Lam.T
        out = out + term.reshape(shape)
    return np.broadcast_to(out, (M,) * rank) if pairs else np.zeros((M,) * rank)


def _one_body_rate_tensor(rate, rank, block):
    M = rate.shape[0]
    out = np.zeros([1] * rank)
    for i in block:
        shape = [1] * rank
        shape[i] = M
        out = out + rate.reshape(shape)
    return np.broadcast_to(out, (M,) * rank) if len(block) else np.zeros((M,) * rank)


def _place(h, positions, rank_out):
    """Sum over positions k of h with its last axis moved to slot k."""
    out = 0.0
    for k in positions:
        out = out + np.moveaxis(h, -1, k - rank_out)
    return out


def _block(key, s):
    start = sum(key[:s])
    return list(range(start, start + key[s]))


# ---------------- Channels ----------------

@dataclass(frozen=True)
class Channel:
    """One directed piece of a coupling: source level -> source + shift."""

    name: str
    shift: tuple
    loss_rate: object = None
    gain: object = None

    def target(self, key):
        return tuple(k + s for k, s in zip(key, self.shift))

    def valid_source(self, key):
        return all(t >= 0 for t in self.target(key))


def _reaction_channels(rx, grid, species):
    index = {s: i for i, s in enumerate(species)}
    missing = [s for s in rx.species if s not in index]
    if missing:
        raise TemplateMismatch(f"{rx.template} uses species {missing} absent from layout {species}")
    nspec = len(species)
    M = grid.points
    cv = grid.cell_volume

    if rx.template == "AA->A":
        s = index[rx.species[0]]
        kern = reaction_kernel(rx, grid)
        shift = tuple(-1 if i == s else 0 for i in range(nspec))

        def loss_rate(key):
            return _pair_rate_tensor(kern.Lambda, sum(key), _block(key, s))

        def gain(f_src, key):
            blk = _block(key, s)
            rank = sum(key)
            n = key[s] - 1
            if n < 1:
                return np.zeros(f_src.shape[:f_src.ndim - rank] + (M,) * (rank - 1))
            X = np.moveaxis(f_src, [blk[-2] - rank, blk[-1] - rank], [-2, -1])
            h = kern.place(X, grid)
            return 0.5 * (n + 1) * _place(h, blk[:-1], rank - 1)

        return [Channel(rx.template, shift, loss_rate, gain)]

    if rx.template == "AB->C":
        sa, sb, sc = (index[x] for x in rx.species)
        kern = reaction_kernel(rx, grid)
        shift = [0] * nspec
        shift[sa] -= 1
        shift[sb] -= 1
        shift[sc] += 1

        def loss_rate(key):
            return _pair_rate_tensor(kern.Lambda, sum(key), _block(key, sa), _block(key, sb))

        def gain(f_src, key):
            rank = sum(key)
            dst = tuple(k + d for k, d in zip(key, shift))
            za, zb = _block(key, sa)[-1], _block(key, sb)[-1]
            X = np.moveaxis(f_src, [za - rank, zb - rank], [-2, -1])
            h = kern.place(X, grid)
            # the remaining slots of h already follow the destination block order
            return (key[sa] * key[sb] / dst[sc]) * _place(h, _block(dst, sc), rank - 1)

        return [Channel(rx.template, tuple(shift), loss_rate, gain)]

    s = index[rx.species[0]]
    shift = tuple((-1 if rx.template == "A->0" else 1) if i == s else 0 for i in range(nspec))
    spatial = _spatial(rx.rate if rx.rate_field is None else rx.rate_field, grid)

    if rx.template == "A->0":
        kd = _phase(spatial, grid)

        def loss_rate(key):
            return _one_body_rate_tensor(kd, sum(key), _block(key, s))

        def gain(f_src, key):
            rank = sum(key)
            z = _block(key, s)[-1]
            X = np.moveaxis(f_src, z - rank, -1)
            return key[s] * (X @ (kd * cv))

        return [Channel(rx.template, shift, loss_rate, gain)]

    vel = _mb(grid, rx.temperature_energy, rx.mass)
    beta_phase = _phase(spatial, grid, vel)
    total = float(beta_phase.sum() * cv)
    return [_insertion_channel(rx.template, s, shift, beta_phase, total)]


def _insertion_channel(name, s, shift, beta_phase, total):
    def loss_rate(key):
        return np.full((beta_phase.shape[0],) * sum(key), total)

    def gain(f_src, key):
        rank = sum(key)
        dst_rank = rank + 1
        dst = tuple(k + d for k, d in zip(key, shift))
        h = f_src[..., None] * beta_phase
        # new particle slot sits at the end of its block in the destination
        blk = _block(dst, s)
        h = np.moveaxis(h, -1, blk[-1] - dst_rank)
        return _symmetrize_new_slot(h, blk, dst_rank) / dst[s]

    return Channel(name, shift, loss_rate, gain)


def _symmetrize_new_slot(h, blk, rank):
    """Sum over the block positions the inserted (last-of-block) slot can take."""
    last = blk[-1]
    out = 0.0
    for k in blk:
        out = out + np.moveaxis(h, last - rank, k - rank)
    return out


def _exchange_channels(ex, grid, species):
    index = {s: i for i, s in enumerate(species)}
    if ex.species not in index:
        raise TemplateMismatch(f"exchange species {ex.species!r} absent from layout {species}")
    s = index[ex.species]
    nspec = len(species)
    cv = grid.cell_volume
    if ex.kind == "bl-kernel":
        vel = _mb(grid, 1.0 / ex.beta, ex.mass)
        insert = _phase(_spatial(ex.kappa_in, grid), grid, vel)
        total_in = float(insert.sum() * cv)
        kout = _phase(_spatial(ex.kappa_out, grid), grid)
        up = tuple(1 if i == s else 0 for i in range(nspec))
        down = tuple(-1 if i == s else 0 for i in range(nspec))

        def del_loss(key):
            return _one_body_rate_tensor(kout, sum(key), _block(key, s))

        def del_gain(f_src, key):
            rank = sum(key)
            z = _block(key, s)[-1]
            return key[s] * (np.moveaxis(f_src, z - rank, -1) @ (kout * cv))

        return [_insertion_channel("bl-insertion", s, up, insert, total_in),
                Channel("bl-deletion", down, del_loss, del_gain)]

    outflow, inflow = _boundary_weights(ex, grid)
    down = tuple(-1 if i == s else 0 for i in range(nspec))
    up = tuple(1 if i == s else 0 for i in range(nspec))

    def out_gain(f_src, key):
        rank = sum(key)
        z = _block(key, s)[-1]
        return key[s] * (np.moveaxis(f_src, z - rank, -1) @ outflow)

    def in_loss(key):
        return np.full((grid.points,) * sum(key), (key[s] + 1) * inflow)

    return [Channel("boundary-outflow", down, None, out_gain),
            Channel("boundary-inflow", up, in_loss, None)]


def channels_for(item, grid, species=("A",)):
    if isinstance(item, ReactionSpec):
        return _reaction_channels(item, grid, tuple(species))
    if isinstance(item, ExchangeModel):
        return _exchange_channels(item, grid, tuple(species))
    raise TemplateMismatch(f"not a coupling: {item!r}")


# ---------------- Public level operators ----------------

@requires_template("AA->A")
def loss_AA(f_n, rx, grid):
    f_n = np.asarray(f_n, dtype=float)
    n = f_n.ndim
    if n < 2:
        return np.zeros_like(f_n)
    return f_n * _pair_rate_tensor(reaction_kernel(rx, grid).Lambda, n, list(range(n)))


@requires_template("AA->A")
def gain_AA(f_np1, rx, grid):
    f_np1 = np.asarray(f_np1, dtype=float)
    if f_np1.shape != (grid.points,) * f_np1.ndim:
        raise DimensionMismatch(f"level tensor shape {f_np1.shape} does not match grid")
    (ch,) = _reaction_channels(rx, grid, ("A",))
    return ch.gain(f_np1, (f_np1.ndim,))


@requires_template("AB->C")
def loss_ABC(f_abc, rx, grid, key):
    f_abc = np.asarray(f_abc, dtype=float)
    if f_abc.ndim != sum(key):
        raise DimensionMismatch(f"tensor rank {f_abc.ndim} does not match layout {key}")
    (ch,) = _reaction_channels(rx, grid, rx.species)
    return f_abc * ch.loss_rate(tuple(key))


@requires_template("AB->C")
def gain_ABC(f_src, rx, grid, key):
    """Gain into level key = (a, b, c) from the (a+1, b+1, c-1) tensor f_src."""
    a, b, c = key
    f_src = np.asarray(f_src, dtype=float)
    if c == 0:
        return np.zeros((grid.points,) * (a + b + c))
    if f_src.ndim != a + b + c + 1:
        raise DimensionMismatch(f"source rank {f_src.ndim} does not match layout {(a + 1, b + 1, c - 1)}")
    (ch,) = _reaction_channels(rx, grid, rx.species)
    return ch.gain(f_src, (a + 1, b + 1, c - 1))


# ---------------- Assembly ----------------

@dataclass
class CouplingAssembly:
    """All shipped couplings acting on one block layout.

    Channels whose target level falls outside the layout are not applied;
    their loss flux is the truncation leakage.
    """

    items: tuple
    grid: object
    layout: BlockLayout
    parts: str = "both"
    channels: list = field(init=False)
    active: list = field(init=False)
    leaking: list = field(init=False)

    def __post_init__(self):
        self.items = tuple(self.items)
        self.channels = [ch for item in self.items for ch in channels_for(item, self.grid, self.layout.species)]
        self.active, self.leaking = [], []
        self._rates = {}
        for ch in self.channels:
            for key in self.layout.keys:
                if not ch.valid_source(key):
                    continue
                dst = ch.target(key)
                if dst in self.layout:
                    self.active.append((ch, key, dst))
                elif ch.gain is not None and ch.loss_rate is not None:
                    self.leaking.append((ch, key))
                elif ch.gain is None:
                    self.active.append((ch, key, None))

    @property
    def closed(self):
        return all(ch.gain is not None and ch.loss_rate is not None for ch in self.channels)

    def loss_rate(self, ch, key):
        cache_key = (id(ch), key)
        if cache_key not in self._rates:
            self._rates[cache_key] = ch.loss_rate(key)
        return self._rates[cache_key]

    def contributions(self, target):
        """(channel, source key, kind) terms that write into the target level."""
        out = []
        for ch, src, dst in self.active:
            if src == target and ch.loss_rate is not None and self.parts in ("both", "loss"):
                out.append((ch, src, "loss"))
            if dst == target and ch.gain is not None and self.parts in ("both", "gain"):
                out.append((ch, src, "gain"))
        return out

    def apply_level(self, vec, target):
        out = np.zeros(self.layout.shape(target))
        for ch, src, kind in self.contributions(target):
            f_src = self.layout.view(vec, src)
            if kind == "loss":
                out = out - f_src * self.loss_rate(ch, src)
            else:
                out = out + ch.gain(f_src, src)
        return out

    def apply_vec(self, vec):
        out = np.zeros(self.layout.total)
        for key in self.layout.keys:
            out[self.layout.slice(key)] = self.apply_level(vec, key).ravel()
        return out

    def __call__(self, f):
        return self.layout.unpack(self.apply_vec(self.layout.pack(f)))

    def leakage_rate(self, vec):
        cv = self.grid.cell_volume
        total = 0.0
        for ch, key in self.leaking:
            f_src = self.layout.view(vec, key)
            total += float((f_src * self.loss_rate(ch, key)).sum() * cv ** sum(key))
        return total

    def max_exit_rate(self):
        return max((float(self.exit_rates(k).max()) for k in self.layout.keys), default=0.0)

    def exit_rates(self, key):
        out = np.zeros(self.layout.shape(key))
        for ch, src, dst in self.active:
            if src == key and ch.loss_rate is not None:
                out = out + self.loss_rate(ch, src)
        return out

    def matrix(self, chunk=512):
        """Sparse block matrix of the assembled couplings (built column-wise)."""
        L = self.layout
        blocks_r, blocks_c, blocks_v = [], [], []
        for ch, src, dst in self.active:
            s0 = L.offsets[src]
            if ch.loss_rate is not None and self.parts in ("both", "loss"):
                diag = -np.broadcast_to(self.loss_rate(ch, src), L.shape(src)).ravel()
                nz = np.nonzero(diag)[0]
                blocks_r.append(s0 + nz)
                blocks_c.append(s0 + nz)
                blocks_v.append(diag[nz])
            if ch.gain is not None and dst is not None and self.parts in ("both", "gain"):
                d0 = L.offsets[dst]
                size = L.size(src)
                for c0 in range(0, size, chunk):
                    c1 = min(size, c0 + chunk)
                    E = np.zeros((c1 - c0, size))
                    E[np.arange(c1 - c0), np.arange(c0, c1)] = 1.0
                    G = ch.gain(E.reshape((c1 - c0,) + L.shape(src)), src).reshape(c1 - c0, -1)
                    cols, rows = np.nonzero(G)
                    blocks_r.append(d0 + rows)
                    blocks_c.append(s0 + c0 + cols)
                    blocks_v.append(G[cols, rows])
        if not blocks_v:
            return sparse.csr_matrix((L.total, L.total))
        return sparse.coo_matrix((np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
                                 shape=(L.total, L.total)).tocsr()


def assemble_coupling(items, grid, layout, parts="both"):
    return CouplingAssembly(tuple(items), grid, layout, parts)


# ---------------- Exchange ----------------

@requires_kind("bl-kernel")
def bl_apply(f, ex, grid):
    """Bergman-Lebowitz insertion/deletion increment for every level of f."""
    assembly = assemble_coupling([ex], grid, BlockLayout.for_density(f, grid))
    return assembly(f)


def balanced_exchange(grid, spec, kappa_out, mu, beta=None):
    """bl-kernel whose insertion intensity satisfies the grand-canonical flux balance.

    kappa_in(x) = kappa_out * exp(beta mu) * Z_v * exp(-beta U(x)), Z_v the
    discrete velocity partition sum (1 without a velocity grid).
    """
    beta = 1.0 / spec.temperature_energy if beta is None else beta
    U = spec.one_body_potential(grid)
    zv = 1.0
    if grid.has_velocities:
        mesh = np.meshgrid(*([grid.velocity_centers] * grid.dim), indexing="ij")
        zv = float(np.exp(-beta * spec.mass * sum(v**2 for v in mesh) / 2.0).sum() * grid.velocity_volume_element)
    kin = kappa_out * math.exp(beta * mu) * zv * np.exp(-beta * U)
    if np.all(kin == kin.flat[0]):
        kin = float(kin.flat[0])
    return ExchangeModel("bl-kernel", kappa_in=kin, kappa_out=kappa_out, beta=beta, mu=mu, mass=spec.mass)


def grand_canonical_family(grid, spec, beta, mu, nmax, mass=None):
    """exp(beta mu n - beta H_n) / n! per level, normalized to unit total mass."""
    mass = spec.mass if mass is None else mass
    levels = []
    for n in range(nmax + 1):
        H = level_potential(grid, spec, n)
        if grid.has_velocities and n:
            shape = grid.one_particle_shape * n
            H = np.broadcast_to(H, shape).copy()
            vc = grid.velocity_centers
            for i in range(n):
                for d in range(grid.dim):
                    axis = i * grid.axes_per_particle + grid.dim + d
                    s = [1] * len(shape)
                    s[axis] = len(vc)
                    H = H + 0.5 * mass * vc.reshape(s) ** 2
        w = np.exp(beta * mu * n - beta * H) / math.factorial(n)
        levels.append(np.reshape(w, (grid.points,) * n))
    f = FockDensity.from_levels(levels)
    scale = total_mass(f, grid)
    return f.map(lambda key, arr: arr / scale)


@requires_kind("bl-kernel")
def check_gc_balance(ex, grid, spec, nmax=4):
    """Max |Q w| over levels and cells, w the grand-canonical family at (beta, mu)."""
    w = grand_canonical_family(grid, spec, ex.beta, ex.mu, nmax, ex.mass)
    inc = bl_apply(w, ex, grid)
    return max(float(np.abs(arr).max()) if arr.size else 0.0 for arr in inc.levels.values())


def reservoir_distribution(ex, grid):
    """f1(q, p) = rho_res * MB(p) as a one-particle phase field."""
    mb = _mb(grid, ex.reservoir_temperature, ex.mass)
    return _phase(np.full(grid.spatial_shape, ex.reservoir_density), grid, mb)


def _boundary_weights(ex, grid):
    """Outflow weights over one-particle cells and the inflow rate per open face set.

    Normals point outward; only velocity cells with v.n > 0 contribute.
    """
    if not grid.has_velocities:
        raise GridError("boundary flux needs a velocity grid")
    if grid.dim != 1:
        raise GridError("boundary flux is implemented for 1D domains")
    if not grid.open_faces:
        raise GridError("boundary flux needs at least one open face")
    vc = grid.velocity_centers
    dv = grid.velocity_width
    f1 = reservoir_distribution(ex, grid).reshape(grid.one_particle_shape)
    outflow = np.zeros(grid.one_particle_shape)
    inflow = 0.0
    G = grid.spatial_cells
    for face, cell, normal in (("lower", 0, -1.0), ("upper", G - 1, 1.0)):
        if not grid.is_open(face):
            continue
        vn = vc * normal
        out = vn > 0
        outflow[cell, out] += vn[out] * dv
        # f1(q, -p) at the mirrored velocity cell
        inflow += float((vn[out] * dv * f1[cell, ::-1][out]).sum())
    return outflow.ravel(), inflow


@requires_kind("boundary-flux")
@requires_velocity_grid
def boundary_flux(f_n, f_np1, ex, grid):
    """Discrete (n+1) sum_{dOmega} sum_{v.n>0} (v.n)[f_{n+1}(., (q,v)) - f_n f1(q,-v)] dv."""
    f_n = np.asarray(f_n, dtype=float)
    f_np1 = np.asarray(f_np1, dtype=float)
    if f_np1.ndim != f_n.ndim + 1:
        raise DimensionMismatch("f_np1 must have one more slot than f_n")
    outflow, inflow = _boundary_weights(ex, grid)
    n = f_n.ndim
    return (n + 1) * (f_np1 @ outflow - f_n * inflow)


@requires_kind("boundary-flux")
def mean_field_force(ex, grid, pair, points=None):
    """F_av(q) = -int grad V(q - x) f2(x | q) dx over the reservoir beyond each open face."""
    if grid.dim != 1:
        raise GridError("mean-field force is implemented for 1D domains")
    depth = ex.reservoir_depth
    if depth is None:
        if not pair.finite_range:
            raise GridError("pair potential has no finite range; set reservoir_depth")
        depth = pair.finite_range
    points = grid.centers if points is None else np.atleast_1d(np.asarray(points, dtype=float))
    rho = ex.reservoir_density
    L = grid.domain_length

    def pull(delta):
        # int_0^depth V'(delta + s) g(delta + s) ds
        if not pair.active or rho == 0.0:
            return 0.0
        lo = max(0.0, ex.core_radius - delta) if ex.f2_model == "hard-core" else 0.0
        hi = min(depth, max(pair.finite_range - delta, 0.0)) if pair.finite_range else depth
        if hi <= lo:
            return 0.0
        value, _ = quad(lambda s: float(pair.derivative(delta + s)), lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200)
        return value

    force = np.zeros(len(points))
    for i, q in enumerate(points):
        if grid.is_open("lower"):
            force[i] -= rho * pull(q)
        if grid.is_open("upper"):
            force[i] += rho * pull(L - q)
    return force


# ---------------- Audit ----------------

def random_test_densities(layout, grid, count, seed=0, levels=None):
    """Nonnegative symmetric single-level test densities with unit mass."""
    rng = np.random.default_rng(seed)
    keys = list(layout.keys if levels is None else levels)
    densities = []
    for i in range(count):
        key = keys[i % len(keys)]
        arr = symmetrize(rng.random(layout.shape(key)), key)
        arr = arr / (arr.sum() * grid.cell_volume ** sum(key))
        densities.append(FockDensity({key: arr}, layout.species))
    return densities


def audit_conservation(q, grid, densities):
    """Max over test densities of |sum_n int (Q eta_m)_n|."""
    worst = 0.0
    for eta in densities:
        vec = q.layout.pack(eta)
        out = q.apply_vec(vec)
        mass = sum(float(q.layout.view(out, k).sum()) * grid.cell_volume ** sum(k) for k in q.layout.keys)
        worst = max(worst, abs(mass))
    if not q.closed:
        logger.info("open coupling audit residual %.3e", worst)
    return worst
