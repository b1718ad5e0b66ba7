import numpy as np
import pytest
import torch
from hypothesis import settings

from maplab.datasets import DatasetSpec, NormalizationStats, load_dataset
from maplab.nets import BackboneSpec, build_model

settings.register_profile("maplab", deadline=None, max_examples=60)
settings.load_profile("maplab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    spec = DatasetSpec("synthetic-blobs", num_classes=4, image_shape=(6, 6, 3), n=200, seed=3, spread=0.05)
    return load_dataset(spec)


@pytest.fixture(scope="session")
def blobs_stats(blobs):
    return NormalizationStats.from_dataset(blobs)


def tiny_model(num_classes=3, input_shape=(2, 2, 1), feature_dim=3, seed=0, dtype=torch.float64):
    spec = BackboneSpec("mlp-tiny", input_shape, feature_dim)
    return build_model(spec, num_classes, seed).to(dtype)


def random_simplex(rng, n, k, concentration=1.0):
    return rng.dirichlet(np.full(k, concentration), size=n)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
