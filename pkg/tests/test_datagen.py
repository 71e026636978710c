import numpy as np
import pytest

from symde.core import datagen
from symde.core.errors import (
    ConfigError,
    EnvelopeTooSmall,
    NonPdCovariance,
    PoleHit,
    WeightMismatch,
)
from symde.core.validate import integrate_grid


def test_gaussian_spec_validation():
    with pytest.raises(NonPdCovariance):
        datagen.GaussianSpec(np.zeros((1, 2)), np.array([[1.0, 2.0], [2.0, 1.0]]), np.array([1.0]))
    with pytest.raises(WeightMismatch):
        datagen.GaussianSpec(np.zeros((2, 2)), np.eye(2), np.array([0.6, 0.6]))


def test_gaussian_mixture_density_and_sampler():
    spec = datagen.BIMODAL_SPEC
    peak = datagen.gaussian_mixture_density(spec, [-4.0, 4.0])[0]
    assert peak == pytest.approx(0.5 / (2 * np.pi * 0.6), rel=1e-6)
    samples = datagen.sample_gaussian_mixture(spec, 20_000, seed=1)
    assert samples.shape == (20_000, 2)
    np.testing.assert_allclose(samples.mean(axis=0), [0.0, 0.0], atol=0.15)
    upper = samples[samples[:, 0] < 0]
    assert np.corrcoef(upper.T)[0, 1] == pytest.approx(0.8, abs=0.03)


@pytest.mark.parametrize(
    "density, box",
    [
        (lambda x: datagen.gaussian_mixture_density(datagen.BIMODAL_SPEC, x), [(-10.0, 10.0), (-10.0, 10.0)]),
        (datagen.rastrigin_density, datagen.RASTRIGIN_BOX),
        (datagen.HEAVY_TAIL.density, [(0.0, 1.0), (0.0, 1.0)]),
    ],
)
def test_builtin_densities_are_normalized(density, box):
    assert integrate_grid(density, box, 400) == pytest.approx(1.0, abs=2e-3)


def test_gaussian4d_is_normalized_product():
    point = np.array([[-4.0, 4.0, 4.0, -4.0]])
    pair_peak = 1.0 / (2 * np.pi * 0.6)
    assert datagen.gaussian4d_density(point)[0] == pytest.approx(pair_peak ** 2, rel=1e-6)
    samples = datagen.sample_gaussian4d(5000, seed=2)
    assert abs(np.corrcoef(samples.T)[0, 2]) < 0.06


def test_rastrigin_is_zero_outside_its_box():
    assert datagen.rastrigin_density([[2.5, 0.0]])[0] == 0.0
    assert datagen.rastrigin_density([[0.0, 0.0]])[0] > 0.0


def test_muon_density_and_pole():
    masses = datagen.MuonMasses()
    (a0, a1), (b0, b1) = masses.box
    assert a1 == pytest.approx(64.0)
    assert (b0, b1) == pytest.approx((4900.0, 6084.0))
    u = np.random.default_rng(0).uniform(size=(100, 2))
    assert np.all(datagen.muon_decay_scaled(u) >= 0.0)
    pole = masses.m_e ** 2 + masses.m_mu ** 2 - masses.m_W ** 2
    with pytest.raises(PoleHit):
        datagen.muon_decay_density(np.array([pole]), np.array([0.0]), masses)


def test_heavy_tail_sampler_matches_its_density():
    samples = datagen.HEAVY_TAIL.sample(50_000, seed=3)
    assert np.all((samples >= 0.0) & (samples <= 1.0))
    box = [(0.0, 0.1), (0.0, 0.5)]
    empirical = np.mean(np.all((samples >= [0.0, 0.0]) & (samples <= [0.1, 0.5]), axis=1))
    assert empirical == pytest.approx(integrate_grid(datagen.HEAVY_TAIL.density, box, 200), abs=0.01)


def test_rejection_sampling_follows_the_density():
    density = lambda x: 2.0 * x[:, 0]
    draw = datagen.rejection_sample(density, [(0.0, 1.0)], 20_000, seed=4, envelope=2.1)
    assert draw.samples.shape == (20_000, 1)
    assert draw.samples.mean() == pytest.approx(2.0 / 3.0, abs=0.01)
    assert draw.acceptance_rate == pytest.approx(1.0 / 2.1, abs=0.02)
    with pytest.raises(EnvelopeTooSmall):
        datagen.rejection_sample(density, [(0.0, 1.0)], 10, seed=4, envelope=1.0)


def test_generation_is_reproducible():
    for name in datagen.BUILTIN_DATASETS:
        first = datagen.generate(name, 300, seed=7)
        np.testing.assert_array_equal(first, datagen.generate(name, 300, seed=7))
    assert not np.array_equal(datagen.generate("rastrigin", 300, 7), datagen.generate("rastrigin", 300, 8))


def test_generation_errors():
    with pytest.raises(ConfigError):
        datagen.generate("gaussian_mixture", 0, seed=1)
    with pytest.raises(ConfigError):
        datagen.generate("no_such_dataset", 10, seed=1)
    with pytest.raises(ConfigError):
        datagen.builtin_density("muon_decay")


def test_shard_seeds_are_distinct_and_stable():
    seeds = [datagen.shard_seed(42, shard) for shard in range(100)]
    assert len(set(seeds)) == 100
    assert seeds == [datagen.shard_seed(42, shard) for shard in range(100)]
    assert all(0 <= s < 2 ** 64 for s in seeds)
