__all__ = [
    "RUN_SLOW",
    "slow",
    "grid",
    "small_grid",
    "weights",
    "rng",
    "atlas",
    "cohort_config",
    "cohort",
    "run_dir",
    "josa_config",
]

from os import environ, path

import numpy as np
import pytest
from jinja2 import Template

from josa.model import Atlas
from josa.sphere_grid import area_weights, make_grid
from josa.synth import SynthConfig, make_cohort


HERE = path.dirname(path.abspath(__file__))

RUN_SLOW = environ.get("JOSA_RUN_SLOW") == "1"

# Full-size reproductions take minutes; opt in with JOSA_RUN_SLOW=1.
slow = pytest.mark.skipif(not RUN_SLOW, reason="set JOSA_RUN_SLOW=1 to run")


@pytest.fixture(scope="function")
def grid():
    return make_grid(16, 32)


@pytest.fixture(scope="function")
def small_grid():
    return make_grid(8, 16)


@pytest.fixture(scope="function")
def weights(grid):
    return area_weights(grid)


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="function")
def atlas(grid, rng):
    return Atlas(
        rng.standard_normal(grid.shape + (2,)), rng.standard_normal(grid.shape + (1,)), grid
    )


@pytest.fixture(scope="function")
def cohort_config(grid):
    return SynthConfig(
        grid=grid,
        n_subjects=4,
        joint_scale=1.5,
        geom_scale=0.4,
        func_scale=0.4,
        smooth_px=3.0,
        n_blobs=3,
        blob_size_px=2.0,
        seed=7,
    )


@pytest.fixture(scope="function")
def cohort(cohort_config):
    return make_cohort(cohort_config)


@pytest.fixture(scope="function")
def run_dir(tmp_path):
    return str(tmp_path)


@pytest.fixture(scope="function")
def josa_config(tmp_path):
    """Render the example config for a tiny, fast run and return its path."""
    with open(path.join(HERE, "josa-config.example.yml"), "r") as f:
        template = Template(f.read())
    config_path = tmp_path / "config.yml"
    config_path.write_text(
        template.render(
            seed=3,
            threads=2,
            height=8,
            width=16,
            sigma_aug_deform=1.0,
            epochs=3,
            iterations=5,
            n_subjects=4,
        )
    )
    return str(config_path)
