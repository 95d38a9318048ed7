import os
from pathlib import Path

import numpy as np
import pytest

from xbarnet.core_model import SynapseTemplate
from xbarnet.topology import PRESETS, plan_from_spec
from xbarnet.trainer import init_network

MNIST_DIR = Path(os.environ.get("XBARNET_MNIST", "/root/data/mnist"))


def have_mnist() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").is_file() and \
        (MNIST_DIR / "t10k-images-idx3-ubyte").is_file()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_dir():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not in {MNIST_DIR}")
    return MNIST_DIR


@pytest.fixture
def small_plan():
    return plan_from_spec(PRESETS["mnist-small"])


@pytest.fixture
def small_net(small_plan):
    return init_network(small_plan, SynapseTemplate.named("s1"), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
