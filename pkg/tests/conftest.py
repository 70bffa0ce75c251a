import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from selcut.datapipe import PhantomSpec, ReferenceSet, generate_phantom
from selcut.netgraph import NetworkConfig

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# two down-blocks on 16x16 inputs keeps every network test fast
TINY = NetworkConfig(input_size=(16, 16), encoder_channels=(2, 4), transition_channels=6, bn_momentum=0.9)


@pytest.fixture
def tiny_config() -> NetworkConfig:
    return TINY


@pytest.fixture
def toy_data():
    """Eight anomalous and eight normal 16x16 phantoms."""
    spec = PhantomSpec(image_size=16, organ_radius_range=(0.3, 0.4), anomaly_radius_range=(0.1, 0.12))
    inputs = [generate_phantom(spec, True, s)[0] for s in range(8)]
    normals = [generate_phantom(spec, False, 100 + s)[0] for s in range(8)]
    return inputs, ReferenceSet(normals)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
