import numpy as np
import pytest

from tissue_manifold import geometry, inr, phantom
from tissue_manifold.errors import ConfigurationError, InputError

from conftest import random_model, with_zero_head


def profile_of(E, t=None, p0=None, p1=None):
    E = np.asarray(E, dtype=np.float64)
    t = np.linspace(0.0, 1.0, E.size) if t is None else t
    p0 = np.zeros(1) if p0 is None else p0
    p1 = np.ones(1) if p1 is None else p1
    nan = np.full(E.size, np.nan)
    return geometry.LineProfile(p0, p1, t, E, nan, nan)


def two_mode_sym():
    return phantom.MixtureSpec([0.5, 0.5], [[-2.0, 0, 0, 0, 0], [2.0, 0, 0, 0, 0]], 0.25)


# ----------------------------------------------------------------- descent

def test_descent_stops_immediately_at_critical_point():
    field = phantom.AnalyticField(phantom.single_gaussian(np.zeros(5), 1.0), 0.1)
    u0 = np.full(5, 1e-6)
    res = geometry.descend(field, u0)
    assert res["steps"] == 0 and res["converged"]
    np.testing.assert_array_equal(res["endpoint"], u0)


def test_descent_reaches_gaussian_mode():
    field = phantom.AnalyticField(phantom.single_gaussian(np.zeros(5), 1.0), 0.1)
    starts = np.random.default_rng(0).normal(0, 2, size=(100, 5))
    res = geometry.descend_many(field, starts)
    assert np.all(res.converged)
    assert np.max(np.linalg.norm(res.endpoint, axis=1)) < 0.3


def test_descent_energy_strictly_decreases():
    model = random_model(2)
    starts = np.random.default_rng(1).normal(size=(50, 5))
    res = geometry.descend_many(model, starts, geometry.FlowConfig(max_steps=200), record=True)
    for hist in res.history:
        assert np.all(np.diff(hist) < 0)


def test_flow_config_validation():
    with pytest.raises(ConfigurationError):
        geometry.FlowConfig(step_size=0)
    with pytest.raises(ConfigurationError):
        geometry.FlowConfig(backtrack=1.0)


# ------------------------------------------------------------------ basins

def test_two_mode_basins_and_labels():
    spec = two_mode_sym()
    field = phantom.AnalyticField(spec, 0.1)
    table = phantom.sample(spec, 1000, seed=0)
    basins = geometry.find_basins(field, table.values)
    assert basins.n_minima == 2
    modes = phantom.convolved_modes(spec, 0.1)
    for loc in basins.locations:
        assert np.min(np.linalg.norm(modes - loc, axis=1)) < 0.3
    nearest_mode = np.argmin(np.linalg.norm(table.values[:, None] - modes[None], axis=2), 1)
    basin_mode = np.argmin(np.linalg.norm(basins.locations[:, None] - modes[None], axis=2), 1)
    agree = np.mean(basin_mode[basins.assignment] == nearest_mode)
    assert agree >= 0.95


def test_single_gaussian_has_one_basin():
    spec = phantom.single_gaussian(np.ones(5), 0.5)
    basins = geometry.find_basins(phantom.AnalyticField(spec, 0.1),
                                  phantom.sample(spec, 300, seed=1).values)
    assert basins.n_minima == 1


def test_duplicated_seeds_duplicate_assignments():
    spec = two_mode_sym()
    field = phantom.AnalyticField(spec, 0.1)
    seeds = phantom.sample(spec, 200, seed=2).values
    once = geometry.find_basins(field, seeds)
    twice = geometry.find_basins(field, np.concatenate([seeds, seeds]))
    np.testing.assert_array_equal(twice.locations, once.locations)
    np.testing.assert_array_equal(twice.assignment, np.tile(once.assignment, 2))


def test_assign_to_basins_matches_find():
    spec = two_mode_sym()
    field = phantom.AnalyticField(spec, 0.1)
    seeds = phantom.sample(spec, 300, seed=3).values
    basins = geometry.find_basins(field, seeds)
    np.testing.assert_array_equal(geometry.assign_to_basins(field, seeds, basins),
                                  basins.assignment)


def test_basin_map_round_trip():
    spec = two_mode_sym()
    basins = geometry.find_basins(phantom.AnalyticField(spec, 0.1),
                                  phantom.sample(spec, 50, seed=0).values)
    back = geometry.BasinMap.from_dict(basins.to_dict())
    np.testing.assert_array_equal(back.locations, basins.locations)
    np.testing.assert_array_equal(back.assignment, basins.assignment)


# ---------------------------------------------------------------- profiles

def test_constant_model_profile_is_flat():
    model = with_zero_head(random_model(0), bias=2.0)
    prof = geometry.line_profile(model, np.zeros(5), np.ones(5), K=33)
    np.testing.assert_array_equal(prof.energy, 2.0)
    np.testing.assert_array_equal(prof.grad_norm, 0.0)
    assert geometry.barrier_height(prof) is geometry.NO_BARRIER


def test_reversed_profile_reverses_rows():
    model = random_model(1)
    a, b = np.zeros(5), np.full(5, 0.7)
    fwd = geometry.line_profile(model, a, b, K=65, margin=0.1)
    rev = geometry.line_profile(model, b, a, K=65, margin=0.1)
    np.testing.assert_allclose(rev.t, 1.0 - fwd.t[::-1], atol=1e-15)
    np.testing.assert_allclose(rev.energy, fwd.energy[::-1], rtol=1e-12, atol=1e-14)


def test_two_mode_profile_has_interior_ridge():
    spec = two_mode_sym()
    modes = phantom.convolved_modes(spec, 0.1)
    prof = geometry.line_profile(phantom.AnalyticField(spec, 0.1), modes[0], modes[1])
    bar = geometry.barrier(prof)
    assert bar is not None and 0.0 < bar.ridge_t < 1.0
    a, b = bar.minima
    assert prof.energy[bar.ridge_index] > max(prof.energy[a], prof.energy[b])


def test_profile_rejects_degenerate_segment():
    with pytest.raises(InputError):
        geometry.line_profile(random_model(0), np.zeros(5), np.zeros(5))


# ----------------------------------------------------------------- barrier

def test_monotone_profile_has_no_barrier():
    assert geometry.barrier_height(profile_of(np.linspace(0, 1, 50))) is geometry.NO_BARRIER


def test_double_well_barrier_is_one():
    t = np.linspace(-1.5, 1.5, 301)             # contains t = -1, 0, 1 exactly
    prof = profile_of((t**2 - 1.0) ** 2, t=t)
    bar = geometry.barrier(prof)
    assert bar.height == pytest.approx(1.0, abs=1e-12)
    assert bar.ridge_t == pytest.approx(0.0, abs=1e-12)


def test_barrier_uses_two_lowest_minima():
    # minima 1 (E=1), 3 (E=0), 5 (E=2): ridge between the two lowest is E=3
    E = np.array([5, 1, 3, 0, 4, 2, 6], dtype=float)
    assert geometry.barrier_height(profile_of(E)) == pytest.approx(3.0)


# ------------------------------------------------------------------- width

def test_quadratic_width():
    t = np.linspace(-1.5, 1.5, 301)
    length = 2.5
    prof = profile_of(t**2, t=t, p0=np.zeros(2), p1=np.array([length, 0.0]))
    w = geometry.basin_width(prof, 150, 1.0)
    assert w.width == pytest.approx(2.0 * length, rel=1e-3)
    assert not w.truncated and not w.degenerate


def test_flat_profile_width_is_degenerate():
    prof = profile_of(np.zeros(64))
    w = geometry.basin_width(prof, 10, 0.5)
    assert w.degenerate and w.width == pytest.approx(1.0)


def test_width_stops_at_ridge():
    t = np.linspace(-1.5, 1.5, 301)
    prof = profile_of((t**2 - 1.0) ** 2, t=t)
    w = geometry.basin_width(prof, 50, 5.0)      # level above the barrier
    assert w.truncated and w.t_right == pytest.approx(0.0, abs=1e-12)


def test_width_requires_local_minimum():
    with pytest.raises(InputError):
        geometry.basin_width(profile_of(np.linspace(0, 1, 10)), 5, 0.5)


def test_two_mode_width_against_level_set():
    spec = two_mode_sym()
    modes = phantom.convolved_modes(spec, 0.1)
    prof = geometry.line_profile(phantom.AnalyticField(spec, 0.1), modes[0], modes[1], K=2049,
                                margin=0.25)
    i = int(np.argmin(np.abs(prof.t)))
    w = geometry.basin_width(prof, i, 0.5)
    # near the mode the energy is ~ x^2 / (2 (0.25 + 0.01)): level 0.5 -> |x| = sqrt(0.26)
    assert w.width == pytest.approx(2.0 * np.sqrt(0.26), rel=0.1)


# --------------------------------------------------------------- summaries

def test_field_summary_constant_model():
    model = with_zero_head(random_model(0))
    summary = geometry.field_summary(model, np.random.default_rng(0).normal(size=(100, 5)))
    assert summary["grad_norm"]["max"] == 0.0


def test_field_summary_permutation_invariant():
    model = random_model(0)
    x = np.random.default_rng(0).normal(size=(200, 5))
    a = geometry.field_summary(model, x)
    b = geometry.field_summary(model, x[::-1].copy())
    assert a == b


def test_gaussian_gradient_magnitude_oracle():
    spec = phantom.single_gaussian(np.zeros(5), 1.0)
    x = phantom.sample(spec, 20_000, seed=0).values
    summary = geometry.field_summary(phantom.AnalyticField(spec, 0.1), x)
    expected = np.mean(np.linalg.norm(x, axis=1)) / 1.01
    assert summary["grad_norm"]["mean"] == pytest.approx(expected, rel=0.15)
