import os
from pathlib import Path

import numpy as np
import pytest

from pcsketch.config import get_settings
from pcsketch.models import Dataset, SketchParams, SparseVector
from pcsketch.services.hashing_service import hashing_service


@pytest.fixture(autouse=True)
def fresh_settings():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def params():
    return SketchParams(d=64, k=9, b=8, seed=11)


@pytest.fixture
def family(params):
    return hashing_service.build_hash_family(params)


@pytest.fixture
def rng():
    return np.random.default_rng(20220127)


@pytest.fixture
def write_file(tmp_path):
    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write


def basket_dataset(baskets, name="toy"):
    """Dataset over item ids 0..d-1 built straight from index baskets."""
    items = np.concatenate([np.asarray(b, dtype=np.int64) for b in baskets]) if baskets else np.zeros(0, np.int64)
    offsets = np.concatenate([[0], np.cumsum([len(b) for b in baskets])]).astype(np.int64)
    d = int(items.max()) + 1
    counts = np.bincount(items, minlength=d).astype(float)
    return Dataset(
        name=name,
        keys=[str(i) for i in range(d)],
        vector=SparseVector(dimension=d, indices=np.arange(d), values=counts),
        basket_items=items,
        basket_offsets=offsets,
        max_basket=max(len(b) for b in baskets),
    )


def dataset_path(variable: str) -> Path:
    value = os.getenv(variable)
    if not value or not Path(value).is_file():
        pytest.skip(f"{variable} not set")
    return Path(value)
