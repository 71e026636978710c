import logging
import math

import numpy as np
import pytest

from symde.core import density as density_module
from symde.core.density import (
    GridDensity,
    GridSpec,
    cv_bandwidth,
    default_candidates,
    density_grid,
    fft_kde_grid,
    kde_evaluate,
    kde_fit,
    kde_fit_reflected,
    reflect_samples,
    silverman_bandwidth,
)
from symde.core.errors import (
    DimensionMismatch,
    EmptyCandidates,
    GridTooCoarse,
    NonFiniteInput,
    NonPositiveBandwidth,
    TooFewSamples,
)


def test_single_sample_peak_1d():
    model = kde_fit(np.array([[0.0]]), 1.0)
    assert kde_evaluate(model, [[0.0]])[0] == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), rel=1e-12)


def test_single_sample_peak_2d():
    model = kde_fit(np.array([[0.3, -1.2]]), 1.0)
    assert model([[0.3, -1.2]])[0] == pytest.approx(1.0 / (2.0 * math.pi), rel=1e-12)


def test_symmetric_pair():
    pair = kde_fit(np.array([[-0.7], [0.7]]), 0.5)
    single = kde_fit(np.array([[0.7]]), 0.5)
    assert pair([[0.0]])[0] == pytest.approx(single([[0.0]])[0], rel=1e-12)


def test_far_query_is_tiny_but_not_negative():
    value = kde_fit(np.array([[0.0]]), 0.1)([[1e3]])[0]
    assert 0.0 <= value < 1e-300


def test_fit_rejects_bad_input():
    with pytest.raises(NonPositiveBandwidth):
        kde_fit(np.zeros((3, 1)), 0.0)
    with pytest.raises(NonFiniteInput):
        kde_fit(np.array([[0.0], [np.nan]]), 1.0)
    with pytest.raises(DimensionMismatch):
        kde_fit(np.zeros((3, 2)), 1.0)(np.zeros((2, 3)))


def test_kde_integrates_to_one(gm_samples):
    h = 0.3
    model = kde_fit(gm_samples, h)
    grid = GridSpec.covering(gm_samples, 160, 6 * h)
    total = kde_evaluate(model, grid.points()).sum() * grid.cell_volume
    assert total == pytest.approx(1.0, abs=0.01)


def test_cv_singleton_candidate():
    assert cv_bandwidth(np.random.default_rng(0).normal(size=(50, 1)), [0.37], folds=5) == 0.37


def test_cv_close_to_silverman_for_normal_data():
    samples = np.random.default_rng(1).normal(size=(2000, 1))
    h = cv_bandwidth(samples, np.logspace(-2, 0, 30), folds=5, seed=0)
    reference = silverman_bandwidth(samples)
    assert reference / 2 <= h <= reference * 2


def test_cv_prefers_smallest_bandwidth_for_duplicates():
    samples = np.zeros((40, 1))
    assert cv_bandwidth(samples, [0.5, 0.1, 1.0], folds=4) == 0.1


def test_cv_is_deterministic(gm_samples):
    candidates = default_candidates(gm_samples, 8)
    assert cv_bandwidth(gm_samples[:400], candidates, 5, seed=3) == cv_bandwidth(gm_samples[:400], candidates, 5, seed=3)


def test_cv_errors():
    with pytest.raises(EmptyCandidates):
        cv_bandwidth(np.zeros((10, 1)), [], folds=5)
    with pytest.raises(TooFewSamples):
        cv_bandwidth(np.zeros((3, 1)), [0.1, 0.2], folds=5)


def test_fft_single_sample_on_a_node():
    grid = GridSpec(((-5.0, 5.0, 101),))
    values = fft_kde_grid(np.array([[0.0]]), grid, 0.5)
    assert int(np.argmax(values)) == 50
    expected = np.exp(-0.5 * (grid.coordinates()[0] / 0.5) ** 2) / (0.5 * math.sqrt(2 * math.pi))
    np.testing.assert_allclose(values, expected, atol=1e-6 * expected.max())


def test_fft_rejects_coarse_grids():
    grid = GridSpec(((-5.0, 5.0, 11),))
    with pytest.raises(GridTooCoarse):
        fft_kde_grid(np.array([[0.0]]), grid, 0.5)


@pytest.mark.slow
def test_fft_matches_direct_kde_on_gm_grid(gm_samples):
    h = 0.101
    grid = GridSpec.covering(gm_samples, 256, 4 * h)
    fft = fft_kde_grid(gm_samples, grid, h)
    direct = kde_evaluate(kde_fit(gm_samples, h), grid.points()).reshape(grid.shape)
    assert np.max(np.abs(fft - direct)) <= 1e-3 * direct.max()
    assert fft.sum() * grid.cell_volume == pytest.approx(1.0, abs=0.01)


def test_fft_padding_warning(caplog):
    samples = np.array([[0.3], [0.7]])
    h = 0.1
    with caplog.at_level(logging.WARNING, logger="symde.core.density"):
        fft_kde_grid(samples, GridSpec.covering(samples, 25, 4 * h), h)
    assert "padding" not in caplog.text
    with caplog.at_level(logging.WARNING, logger="symde.core.density"):
        fft_kde_grid(samples, GridSpec.covering(samples, 25, 3 * h), h)
    assert "padding" in caplog.text


def test_density_grid_falls_back_to_direct_evaluation():
    samples = np.array([[0.0], [1.0]])
    model = kde_fit(samples, 0.05)
    grid = GridSpec(((-1.0, 2.0, 7),))
    np.testing.assert_allclose(density_grid(model, grid).ravel(), model(grid.points()))


def test_reflection_examples():
    np.testing.assert_array_equal(reflect_samples(np.array([[0.1]]), [(0.0, None)]).ravel(), [0.1, -0.1])
    assert reflect_samples(np.random.default_rng(0).uniform(size=(10, 1)), [(0.0, 1.0)]).shape == (30, 1)
    assert reflect_samples(np.zeros((5, 2)), [None, (0.0, None)]).shape == (10, 2)


def test_reflection_reduces_boundary_bias():
    samples = np.random.default_rng(2).uniform(size=(5000, 1))
    h = 0.05
    plain = kde_fit(samples, h)([[0.0]])[0]
    reflected = kde_fit_reflected(samples, h, [(0.0, 1.0)])([[0.0]])[0]
    assert abs(reflected - 1.0) < abs(plain - 1.0)
    assert kde_fit_reflected(samples, h, [(0.0, 1.0)])([[-0.1]])[0] == 0.0


def test_grid_density_interpolates_nodes_and_is_zero_outside():
    grid = GridSpec(((0.0, 1.0, 3), (0.0, 2.0, 3)))
    values = np.arange(9, dtype=float).reshape(3, 3)
    density = GridDensity(grid, values)
    np.testing.assert_allclose(density(grid.points()), values.ravel())
    assert density([[0.25, 0.0]])[0] == pytest.approx(1.5)
    assert density([[5.0, 5.0]])[0] == 0.0


def test_grid_density_builds_its_interpolator_once(monkeypatch):
    grid = GridSpec(((0.0, 1.0, 3),))
    density = GridDensity(grid, np.array([0.0, 1.0, 0.0]))

    def rebuilt(*args, **kwargs):
        raise AssertionError("interpolator rebuilt on call")

    monkeypatch.setattr(density_module.interpolate, "RegularGridInterpolator", rebuilt)
    assert density([[0.5]])[0] == pytest.approx(1.0)
    assert density([[0.25]])[0] == pytest.approx(0.5)


def test_grid_spec_serialization_and_points():
    grid = GridSpec(((0.0, 1.0, 2), (-1.0, 1.0, 3)))
    assert GridSpec.from_dict(grid.to_dict()) == grid
    assert grid.points().shape == (6, 2)
    assert grid.cell_volume == pytest.approx(1.0)
