import numpy as np
import pytest

from symde.core import datagen
from symde.core.config import parse_config
from symde.core.sr import SrConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def gm_samples():
    return datagen.sample_gaussian_mixture(datagen.BIMODAL_SPEC, 2000, seed=3)


@pytest.fixture
def tiny_sr():
    return SrConfig(
        maxsize=15,
        niterations=3,
        ncycles_per_iteration=20,
        populations=3,
        population_size=12,
        batch_size=64,
        seed=7,
    )


@pytest.fixture
def desk_config(tmp_path):
    """A pipeline configuration small enough to run in a couple of seconds."""

    def build(**values):
        base = {
            "input": "gaussian_mixture",
            "n_samples": "600",
            "seed": "11",
            "threads": "1",
            "output_dir": str(tmp_path / "run"),
            "density.bandwidth": "0.4",
            "density.grid_count": "48",
            "support.resolution": "16",
            "validation.resolution": "24",
            "validation.region.mode_a": "-4.25,-3.75,3.75,4.25",
            "validation.region.mode_b": "3.75,4.25,-4.25,-3.75",
            "sr.maxsize": "12",
            "sr.niterations": "2",
            "sr.ncycles_per_iteration": "15",
            "sr.populations": "2",
            "sr.population_size": "10",
            "sr.batch_size": "64",
        }
        base.update({k: str(v) for k, v in values.items()})
        return parse_config(base).validate()

    return build
