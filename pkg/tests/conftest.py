"""Shared fixtures. The expensive one is the trained toy model, built once."""

import time

import pytest

from occlureid.network import NetworkConfig, build_network
from occlureid.synthetic import classification_fixture, reid_fixture
from occlureid.training import toy_overfit_config, train


@pytest.fixture(scope="session")
def toy_dataset():
    return classification_fixture()


@pytest.fixture(scope="session")
def trained_toy(toy_dataset):
    """(model, history, seconds) after the committed overfit recipe. Trained
    once per session; several tests and most acceptance criteria share it."""
    start = time.perf_counter()
    model = build_network(NetworkConfig.toy(), seed=0)
    history = train(model, toy_dataset, toy_overfit_config(), stop_at_accuracy=0.99)
    return model, history, time.perf_counter() - start


@pytest.fixture(scope="session")
def reid_pools():
    return reid_fixture()
