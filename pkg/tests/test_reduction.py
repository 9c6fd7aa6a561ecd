import numpy as np
import pytest
from scipy.stats import binom

from coupling import ExchangeModel, ReactionSpec
from errors import TemplateMismatch
from reduction import (
    cme_generator,
    cme_solve,
    cme_stationary,
    mean_field_ode,
    poisson_truncated,
    project_coupling,
    ssa_run,
    total_variation,
    trajectory_rng,
)


def test_generator_columns_sum_to_zero():
    model = cme_generator([ReactionSpec("AA->A", 1.0), ReactionSpec("0->A", 2.0)], 1.0, 6)
    np.testing.assert_allclose(model.column_sums(), 0.0, atol=1e-12)


def test_multispecies_keys():
    model = cme_generator([ReactionSpec("AB->C", 1.0)], 1.0, (1, 1, 1), ("A", "B", "C"))
    j = model.index((1, 1, 0))
    assert model.Q[model.index((0, 0, 1)), j] == 1.0
    assert model.Q[j, j] == -1.0


def test_birth_death_stationary_is_poisson():
    model = cme_generator([ReactionSpec("0->A", 2.0), ReactionSpec("A->0", 1.0)], 1.0, 20)
    assert total_variation(cme_stationary(model), poisson_truncated(2.0, 20)) < 1e-10


def test_exchange_reduces_to_birth_death():
    ex = ExchangeModel("bl-kernel", kappa_in=1.5, kappa_out=0.5)
    model = cme_generator([ex], 2.0, 25)
    assert total_variation(cme_stationary(model), poisson_truncated(6.0, 25)) < 1e-6


def test_decay_is_binomial():
    model = cme_generator([ReactionSpec("A->0", 0.8)], 1.0, 5)
    p0 = np.zeros(6)
    p0[5] = 1.0
    p = cme_solve(model, p0, 1.3)
    np.testing.assert_allclose(p, binom.pmf(np.arange(6), 5, np.exp(-0.8 * 1.3)), atol=1e-12)
    np.testing.assert_array_equal(cme_solve(model, p0, 0.0), p0)


def test_spatial_rates_have_no_well_mixed_reduction():
    with pytest.raises(TemplateMismatch):
        cme_generator([ReactionSpec("AA->A", 1.0, form="doi", radius=0.1)], 1.0, 3)
    with pytest.raises(TemplateMismatch):
        cme_generator([ExchangeModel("boundary-flux")], 1.0, 3)


def test_rate_equations_decay():
    t = np.linspace(0.0, 3.0, 7)
    n = mean_field_ode([ReactionSpec("A->0", 0.7)], 1.0, 4.0, t)
    np.testing.assert_allclose(n[0], 4.0 * np.exp(-0.7 * t), rtol=1e-8)


def test_rate_equations_dimerization():
    t = np.linspace(0.0, 2.0, 5)
    n = mean_field_ode([ReactionSpec("AA->A", 1.5)], 1.0, 6.0, t)
    np.testing.assert_allclose(n[0], 6.0 / (1.0 + 0.75 * 6.0 * t), rtol=1e-8)


def test_rate_equations_association():
    t = np.array([0.0, 0.5, 1.0])
    n = mean_field_ode([ReactionSpec("AB->C", 1.0)], 1.0, [2.0, 1.0, 0.0], t, ("A", "B", "C"))
    # A - B and B + C are conserved
    np.testing.assert_allclose(n[0] - n[1], 1.0, atol=1e-10)
    np.testing.assert_allclose(n[1] + n[2], 1.0, atol=1e-10)


def test_projection_matches_the_cme(line4):
    items = [ReactionSpec("AA->A", 1.2), ExchangeModel("bl-kernel", kappa_in=0.4, kappa_out=0.9),
             ReactionSpec("A->0", 0.3)]
    projected = project_coupling(items, line4, 4)
    reference = cme_generator(items, line4.domain_volume, 4)
    np.testing.assert_allclose(projected.Q, reference.Q, atol=1e-12)


def test_trajectory_streams_are_counter_based():
    a = trajectory_rng(7, 3).random(4)
    np.testing.assert_array_equal(a, trajectory_rng(7, 3).random(4))
    assert not np.array_equal(a, trajectory_rng(7, 4).random(4))
    assert not np.array_equal(a, trajectory_rng(8, 3).random(4))


def test_ssa_matches_cme_for_decay():
    model = cme_generator([ReactionSpec("A->0", 1.0)], 1.0, 5)
    times = np.array([0.25, 0.5, 1.0])
    n_paths = 4000
    _, dist = ssa_run(model, (5,), 1.0, seed=12, n_paths=n_paths, times=times)
    p0 = np.zeros(6)
    p0[5] = 1.0
    exact = cme_solve(model, p0, times)
    se = np.sqrt(exact * (1.0 - exact) / n_paths)
    assert np.all(np.abs(dist - exact) <= 4.0 * se + 1e-3)


def test_ssa_matches_cme_for_dimerization():
    model = cme_generator([ReactionSpec("AA->A", 1.0), ReactionSpec("0->A", 1.0)], 1.0, 8)
    p0 = poisson_truncated(2.0, 8)
    times = np.array([0.5, 2.0])
    n_paths = 4000
    _, dist = ssa_run(model, p0, 2.0, seed=3, n_paths=n_paths, times=times)
    exact = cme_solve(model, p0, times)
    se = np.sqrt(exact * (1.0 - exact) / n_paths)
    assert np.all(np.abs(dist - exact) <= 4.0 * se + 1e-3)


def test_ssa_matches_cme_for_association():
    model = cme_generator([ReactionSpec("AB->C", 1.5)], 1.0, (3, 3, 3), ("A", "B", "C"))
    start = (3, 2, 0)
    times = np.array([0.2, 0.6, 1.5])
    n_paths = 4000
    _, dist = ssa_run(model, start, 1.5, seed=8, n_paths=n_paths, times=times)
    p0 = np.zeros(len(model.keys))
    p0[model.index(start)] = 1.0
    exact = cme_solve(model, p0, times)
    se = np.sqrt(exact * (1.0 - exact) / n_paths)
    assert np.all(np.abs(dist - exact) <= 4.0 * se + 1e-3)
    assert dist[:, model.index((1, 0, 2))].max() > 0.0


def test_ssa_matches_cme_for_exchange():
    model = cme_generator([ExchangeModel("bl-kernel", kappa_in=1.5, kappa_out=0.7)], 1.0, 10)
    times = np.array([0.5, 1.0, 3.0])
    n_paths = 4000
    _, dist = ssa_run(model, (0,), 3.0, seed=9, n_paths=n_paths, times=times)
    p0 = np.zeros(11)
    p0[0] = 1.0
    exact = cme_solve(model, p0, times)
    se = np.sqrt(exact * (1.0 - exact) / n_paths)
    assert np.all(np.abs(dist - exact) <= 4.0 * se + 1e-3)


def test_ssa_is_independent_of_thread_count():
    model = cme_generator([ReactionSpec("AA->A", 2.0), ReactionSpec("0->A", 1.0)], 1.0, 6)
    one = ssa_run(model, (3,), 1.0, seed=5, n_paths=200, times=np.array([0.5, 1.0]))[1]
    four = ssa_run(model, (3,), 1.0, seed=5, n_paths=200, times=np.array([0.5, 1.0]), threads=4)[1]
    np.testing.assert_array_equal(one, four)
