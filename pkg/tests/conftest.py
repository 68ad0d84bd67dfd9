import hashlib
import os
from pathlib import Path

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np
import pytest

import lesionbench.backbones as _backbones
import lesionbench.synthetic as _synthetic

STANDIN_SIZE = 64
SMALLEST = "MobileNetV3Small"


def _cache_dir() -> Path:
    d = Path(os.environ.get("LESIONBENCH_TEST_CACHE", Path.home() / ".cache" / "lesionbench-tests"))
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def standin_weights() -> str:
    """Pretext-pretrained MobileNetV3Small backbone weights at 64 px.

    Stands in for ImageNet weights, which cannot be downloaded here. Cached on
    disk keyed by the source of the code that produces them (about 90 s cold).
    """
    from lesionbench.backbones import describe

    key = hashlib.sha256()
    for mod in (_synthetic, _backbones):
        key.update(Path(mod.__file__).read_bytes())
    key.update(f"{SMALLEST}:{STANDIN_SIZE}".encode())
    path = _cache_dir() / f"standin-{SMALLEST}-{STANDIN_SIZE}-{key.hexdigest()[:16]}.weights.h5"
    if not path.exists():
        tmp = path.with_name("partial-" + path.name)
        _synthetic.pretrain_stand_in(describe(SMALLEST, "none").with_input_size(STANDIN_SIZE), tmp)
        os.replace(tmp, path)
    return str(path)


@pytest.fixture(scope="session")
def shape_root(tmp_path_factory):
    """64 blob-vs-ring images on disk (blobs = EM, rings = Confuser) and their manifest."""
    root = tmp_path_factory.mktemp("shapes")
    m = _synthetic.write_shape_dataset(root, 64, STANDIN_SIZE, seed=0)
    return root, m


@pytest.fixture(scope="session")
def intermediate_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("intermediate")
    m = _synthetic.write_multiclass_dataset(root, n_per_class=6, n_classes=7, size=STANDIN_SIZE, seed=3)
    return root, m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
