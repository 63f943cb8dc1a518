import logging

import pytest

from stationflow.synth import SynthConfig, generate_city
from stationflow.training import TrainRunConfig, prepare_experiment, train

logging.getLogger("stationflow").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def small_city():
    """50 stations, 15 months, two expansions, mild noise."""
    return generate_city(SynthConfig(
        seed=5, n_stations=50, n_months=15, expansion_months=((8, 8), (12, 8)),
        noise_sd=0.5))


@pytest.fixture(scope="session")
def small_data(small_city):
    config = TrainRunConfig(variant="mgat", seed=0, n_runs=1)
    return prepare_experiment(small_city.samples, small_city.stations,
                              small_city.layers, config)


@pytest.fixture(scope="session")
def small_mgat(small_data):
    config = TrainRunConfig(variant="mgat", seed=0, n_runs=1, epochs=40, patience=8)
    return train(config, small_data)


@pytest.fixture(scope="session")
def exact_city():
    """Noise-free, truncation-free city for exact-recovery tests.

    Full default size: identifiability of every design column needs the
    station footprint to cover the whole feature space.
    """
    city = generate_city(SynthConfig(seed=11, noise_sd=0.0, base_demand=60.0))
    assert city.truth.truncation_rate == 0.0
    return city


@pytest.fixture(scope="session")
def exact_data(exact_city):
    config = TrainRunConfig(variant="slx", seed=1, n_runs=1)
    return prepare_experiment(exact_city.samples, exact_city.stations,
                              exact_city.layers, config)
