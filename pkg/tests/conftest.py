import numpy as np
import pytest

from rankuap.data import SPLITS, SyntheticSpec, generate_synthetic, select_split
from rankuap.embedders import ARCHITECTURES, init_embedder, train_embedder
from rankuap.harness import Splits


@pytest.fixture(scope="session")
def default_items():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def default_splits(default_items):
    return Splits(*(select_split(default_items, s) for s in SPLITS))


@pytest.fixture(scope="session")
def trained(default_splits):
    """Every architecture trained with its default config: name -> (model, head)."""
    return {a: train_embedder(a, default_splits.train) for a in ARCHITECTURES}


@pytest.fixture(scope="session")
def small_items():
    return generate_synthetic(SyntheticSpec(seed=3, n_train_ids=4, n_test_ids=3, views_per_id=4,
                                            height=8, width=4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(arch, shape=(3, 8, 8), seed=0, embed_dim=6, hidden=10):
    return init_embedder(arch, shape, embed_dim=embed_dim, hidden=hidden, seed=seed)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))
