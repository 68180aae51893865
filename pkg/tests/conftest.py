import numpy as np
import pytest
import torch

# Single-threaded keeps CPU runs reproducible and avoids oversubscription
# in the sandbox; the suite is sized for this.
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def compact_cfg():
    from spineseg.config import compact_config

    return compact_config()


@pytest.fixture(scope="session")
def full_cfg():
    from spineseg.config import ExperimentConfig

    return ExperimentConfig()


@pytest.fixture(scope="session")
def phantom_subject():
    """One deterministic synthetic volume/label pair, shared read-only."""
    from spineseg.phantom import make_phantom

    return make_phantom(seed=123)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
