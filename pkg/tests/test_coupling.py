from math import comb

import numpy as np
import pytest

from coupling import (
    ExchangeModel,
    ReactionSpec,
    assemble_coupling,
    audit_conservation,
    balanced_exchange,
    bl_apply,
    boundary_flux,
    cell_pair_rates,
    check_gc_balance,
    check_rate_symmetry,
    gain_AA,
    gain_ABC,
    grand_canonical_family,
    loss_AA,
    loss_ABC,
    mean_field_force,
    random_test_densities,
    reaction_kernel,
    reservoir_distribution,
)
from errors import GridError, TemplateMismatch
from fockspace import (BlockLayout, PhaseGrid, level_keys, marginal_copy_number, product_state, total_mass,
                       uniform_level)
from reduction import cme_generator, poisson_truncated
from transport import PairPotential, TransportSpec


def _assembly(items, grid, caps, species=("A",)):
    layout = BlockLayout(tuple(level_keys(caps)), grid.points, species)
    return assemble_coupling(items, grid, layout)


def _audit(items, grid, caps, species=("A",)):
    q = _assembly(items, grid, caps, species)
    return audit_conservation(q, grid, random_test_densities(q.layout, grid, 50, seed=11))


def test_dimerization_conserves_probability(line8):
    rx = ReactionSpec("AA->A", 5.0, form="doi", radius=0.25)
    assert _audit([rx], line8, (4,)) < 1e-10


def test_association_conserves_probability(line4):
    rx = ReactionSpec("AB->C", 2.0, form="gaussian", radius=0.2)
    assert _audit([rx], line4, (2, 2, 2), ("A", "B", "C")) < 1e-10


def test_exchange_conserves_probability(line4):
    ex = ExchangeModel("bl-kernel", kappa_in=[0.5, 1.0, 1.5, 2.0], kappa_out=0.8)
    assert _audit([ex], line4, (4,)) < 1e-10


def test_unimolecular_templates_conserve_probability(phase4):
    items = [ReactionSpec("A->0", 0.6), ReactionSpec("0->A", 1.3)]
    assert _audit(items, phase4, (2,)) < 1e-10


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_pair_gain_and_loss_combinatorics(line4, n):
    rx = ReactionSpec("AA->A", 0.7)
    p = 0.3
    cv = line4.cell_volume
    loss = loss_AA(uniform_level(line4, n, n).level(n) * p, rx, line4).sum() * cv**n
    gain = gain_AA(uniform_level(line4, n + 1, n + 1).level(n + 1) * p, rx, line4).sum() * cv**n
    assert loss == pytest.approx(comb(n, 2) * 0.7 * p, rel=1e-12, abs=1e-15)
    assert gain == pytest.approx(comb(n + 1, 2) * 0.7 * p, rel=1e-12)


def test_association_gain_matches_loss(line4):
    rx = ReactionSpec("AB->C", 1.5)
    src = uniform_level(line4, (2, 2, 1), (2, 2, 0), ("A", "B", "C"))[(2, 2, 0)]
    cv = line4.cell_volume
    loss = loss_ABC(src, rx, line4, (2, 2, 0)).sum() * cv**4
    gain = gain_ABC(src, rx, line4, (1, 1, 1)).sum() * cv**3
    assert loss == pytest.approx(4 * 1.5, rel=1e-12)
    assert gain == pytest.approx(loss, rel=1e-12)


def test_templates_are_checked(line4):
    with pytest.raises(TemplateMismatch):
        loss_AA(np.ones((4, 4)), ReactionSpec("A->0", 1.0), line4)
    with pytest.raises(TemplateMismatch):
        ReactionSpec("AB->C", 1.0, species=("A", "A", "C"))
    with pytest.raises(TemplateMismatch):
        ReactionSpec("AA->A", 1.0, form="doi")


def test_doi_kernel_is_symmetric(line8):
    assert check_rate_symmetry(ReactionSpec("AA->A", 2.0, form="doi", radius=0.3), line8) == 0.0


def test_leakage_from_top_level(line4):
    q = _assembly([ReactionSpec("0->A", 0.5)], line4, (2,))
    vec = q.layout.pack(uniform_level(line4, 2, 2))
    assert q.leakage_rate(vec) == pytest.approx(0.5)
    assert q.closed


def test_balanced_exchange_satisfies_flux_balance(line4):
    spec = TransportSpec(potential="harmonic", stiffness=3.0)
    ex = balanced_exchange(line4, spec, kappa_out=0.9, mu=-0.4)
    assert check_gc_balance(ex, line4, spec, nmax=4) < 1e-12


def test_balanced_exchange_with_velocities(phase4):
    spec = TransportSpec(friction=1.0)
    ex = balanced_exchange(phase4, spec, kappa_out=0.5, mu=-1.0)
    assert ex.well_mixed
    assert check_gc_balance(ex, phase4, spec, nmax=3) < 1e-12


def test_grand_canonical_family_is_normalized(line4, free):
    w = grand_canonical_family(line4, free, 1.0, 0.2, 4)
    assert total_mass(w, line4) == pytest.approx(1.0, rel=1e-14)


def _open_grid():
    return PhaseGrid(8, 0.125, velocity_cells=8, velocity_cutoff=6.0, boundary_kind="open-with-reservoir")


def test_boundary_flux_vanishes_on_factorized_input():
    grid = _open_grid()
    ex = ExchangeModel("boundary-flux", reservoir_density=0.7)
    f1 = reservoir_distribution(ex, grid).ravel()
    rng = np.random.default_rng(5)
    for n in (0, 1, 2):
        f_n = rng.random((grid.points,) * n)
        flux = boundary_flux(f_n, np.multiply.outer(f_n, f1), ex, grid)
        assert np.abs(flux).max() < 1e-14


def test_boundary_flux_needs_velocity_grid(line4):
    ex = ExchangeModel("boundary-flux", reservoir_density=0.7)
    with pytest.raises(GridError):
        boundary_flux(np.ones(()), np.ones(4), ex, line4)


def test_boundary_flux_rejects_bl_kernel():
    with pytest.raises(TemplateMismatch):
        boundary_flux(np.ones(()), np.ones(64), ExchangeModel("bl-kernel"), _open_grid())


def test_mean_field_force_without_pair_potential():
    grid = PhaseGrid(8, 0.125, boundary_kind="open-with-reservoir")
    ex = ExchangeModel("boundary-flux", reservoir_density=1.0, reservoir_depth=0.5)
    np.testing.assert_array_equal(mean_field_force(ex, grid, PairPotential()), np.zeros(8))


def test_mean_field_force_symmetric_reservoirs():
    grid = PhaseGrid(8, 0.125, boundary_kind="open-with-reservoir")
    ex = ExchangeModel("boundary-flux", reservoir_density=1.0, reservoir_depth=0.8)
    pair = PairPotential("soft", 1.0, 0.3)
    assert abs(mean_field_force(ex, grid, pair, points=[0.5])[0]) < 1e-12
    force = mean_field_force(ex, grid, pair)
    assert force[0] > 0.0 > force[-1]
    np.testing.assert_allclose(force, -force[::-1], atol=1e-12)


def test_doi_kernel_averages_over_cell_extents(line8):
    # uniform pairs on [0, 1] meet within R with probability 1 - (1 - R)^2
    kernel = reaction_kernel(ReactionSpec("AA->A", 1.0, form="doi", radius=0.25), line8)
    assert kernel.Lambda.mean() == pytest.approx(1.0 - 0.75**2, abs=0.005)
    assert kernel.Lambda[0, 0] == pytest.approx(1.0)
    assert kernel.Lambda[0, 3] == 0.0


def test_cell_pair_rates_partial_overlap(line8):
    rates = cell_pair_rates(ReactionSpec("AA->A", 2.0, form="doi", radius=0.25), line8)
    assert rates.shape == (15,)
    np.testing.assert_allclose(rates, rates[::-1])
    # cells two apart: offsets spread over (0.125, 0.375), half of them within R
    assert rates[7 + 2] == pytest.approx(1.0, abs=0.035)
    assert rates[7 + 1] == pytest.approx(2.0)


def test_well_mixed_pair_rates_are_constant(line4):
    np.testing.assert_array_equal(cell_pair_rates(ReactionSpec("AA->A", 3.0), line4), np.full(7, 3.0))


def test_one_way_exchange_breaks_gc_balance(line4, free):
    ex = ExchangeModel("bl-kernel", kappa_in=0.0, kappa_out=1.0)
    assert check_gc_balance(ex, line4, free, nmax=3) > 1e-3


def test_bl_apply_marginal_is_the_birth_death_generator(line4):
    ex = ExchangeModel("bl-kernel", kappa_in=0.8, kappa_out=0.5)
    p = poisson_truncated(1.3, 4)
    inc = bl_apply(product_state(line4, p), ex, line4)
    expected = cme_generator([ex], 1.0, 4).Q @ p
    np.testing.assert_allclose(marginal_copy_number(inc, line4), expected, atol=1e-12)


def test_boundary_flux_without_upper_level_is_pure_loss():
    grid = _open_grid()
    ex = ExchangeModel("boundary-flux", reservoir_density=0.7)
    f1 = reservoir_distribution(ex, grid).reshape(grid.one_particle_shape)
    vc = grid.velocity_centers
    # both faces open; f1 is the same Maxwellian in every cell
    entering = 2.0 * float((vc[vc > 0] * grid.velocity_width * f1[0, vc > 0]).sum())
    f_n = np.random.default_rng(8).random((grid.points,) * 2)
    flux = boundary_flux(f_n, np.zeros((grid.points,) * 3), ex, grid)
    np.testing.assert_allclose(flux, -3.0 * f_n * entering, rtol=1e-13)
    assert flux.max() < 0.0


def test_mean_field_force_vanishes_beyond_the_pair_range():
    grid = PhaseGrid(8, 0.125, boundary_kind="open-with-reservoir", open_faces=("lower",))
    ex = ExchangeModel("boundary-flux", reservoir_density=1.0, reservoir_depth=0.5)
    pair = PairPotential("soft", 1.0, 0.2)
    far = mean_field_force(ex, grid, pair, points=[0.2, 0.25, 0.5, 0.9])
    assert np.abs(far).max() < 1e-10
    assert mean_field_force(ex, grid, pair, points=[0.05])[0] > 0.0
