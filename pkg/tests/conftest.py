import numpy as np
import pytest

from cltestbed.data import BlobSpec, desk_blob_spec, make_blob_stream, ring_centers
from cltestbed.models import DiscriminativeModel, TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_stream():
    """Three two-class tasks in four dimensions, well separated."""
    spec = BlobSpec(
        centers=ring_centers(6, 4, 6.0),
        scale=0.5,
        samples_per_class_train=30,
        samples_per_class_test=10,
        seed=3,
    )
    return make_blob_stream(spec, num_tasks=3, classes_per_task=2)


@pytest.fixture(scope="session")
def desk_stream():
    return make_blob_stream(desk_blob_spec(), num_tasks=5, classes_per_task=2)


@pytest.fixture
def small_model(small_stream):
    return DiscriminativeModel.initialize("mlp", small_stream.feature_dim, small_stream.num_classes, 8, seed=0)


@pytest.fixture
def quick_train():
    return TrainConfig(learning_rate=0.1, iterations=60, batch_size=16, seed=0)
