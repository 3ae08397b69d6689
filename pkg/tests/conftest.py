import numpy as np
import pytest

from dalip.mbdc import mbdc_init
from dalip.synthdata import SyntheticDatasetSpec, generate


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def mbdc_params():
    return mbdc_init(h=2, d=4, d_tilde=3, q=5, seed=7)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticDatasetSpec(num_classes=4, samples_per_class=10, tokens=6, latent_dim=3, raw_dim=5, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return generate(small_spec)
