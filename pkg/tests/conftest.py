import numpy as np
import pytest

from driftadapt import (LinearPredictor, MlpPredictor, RecurrentPredictor,
                        drift_linear_config, gen_drifting_series)


@pytest.fixture(scope="session")
def model_zoo():
    return [
        LinearPredictor(d_in=2, d_out=2, window=4, seed=11),
        MlpPredictor(window=4, d_in=2, d_out=2, hidden=6, seed=12),
        RecurrentPredictor(window=5, d_in=3, d_out=2, hidden=6, classes=3, seed=13),
    ]


@pytest.fixture(scope="session")
def tiny_trajectories():
    return gen_drifting_series(drift_linear_config(trials=5, length=80, seed=3))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
