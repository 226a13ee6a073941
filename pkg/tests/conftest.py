import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from he2ihc.images import ImageTile, StainDomain
from he2ihc.synthetic import SyntheticStainSpec, synthesize_dataset

settings.register_profile(
    "package",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("package")

torch.set_num_threads(max(torch.get_num_threads(), 2))


def random_tile(rng, size=32, domain=StainDomain.HE, source_id="t"):
    return ImageTile(rng.random((size, size, 3)), domain, source_id)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 train + 2 test synthetic pairs at 32px, for fast pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    spec = SyntheticStainSpec(count=4, size=32, texture_seed=7)
    synthesize_dataset(spec, root, "train")
    synthesize_dataset(spec, root, "test", count=2)
    return root


@pytest.fixture(scope="session")
def train80_dataset(tmp_path_factory):
    """4 train + 2 test pairs at 80px: big enough for the discriminator."""
    root = tmp_path_factory.mktemp("train80_data")
    spec = SyntheticStainSpec(count=4, size=80, texture_seed=11)
    synthesize_dataset(spec, root, "train")
    synthesize_dataset(spec, root, "test", count=2)
    return root
