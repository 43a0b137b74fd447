import numpy as np
import pytest

from paradiff.experiment import ExperimentConfig, build_pipeline


def channel_config(**overrides) -> ExperimentConfig:
    """20x20 grid, 4x4 blocks, one interior channel at contrast 1e4.

    Small enough to build in well under a second but heterogeneous enough to
    exercise every code path (multiple continua, nonzero coupling blocks).
    """
    base = dict(
        nx=20,
        blocks=4,
        layers=2,
        contrast=1e4,
        channels=[(1, 19, 8, 10)],
        source_kind="box",
        source_amplitude=1.0,
        source_region=(0.3, 0.7, 0.3, 0.7),
        n_values=(10,),
        alpha=0.5,
        compute_reference=False,
        export_solution=False,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def channel_pipeline():
    return build_pipeline(channel_config())


@pytest.fixture(scope="session")
def homogeneous_pipeline():
    return build_pipeline(
        channel_config(contrast=1.0, channels=[], source_kind="constant", source_region=None)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2395)
