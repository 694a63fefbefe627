import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from edgeflow3d.volume import Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_volume(rng):
    def make(dims=(8, 8, 8), spacing=(1.0, 1.0, 1.0), low=0.0, high=1.0):
        data = rng.uniform(low, high, size=dims).astype(np.float32)
        return Volume3D(dims, spacing, data)

    return make


@pytest.fixture
def ramp_volume():
    def make(dims=(8, 8, 8), axis=0):
        idx = np.arange(dims[axis], dtype=np.float32) / max(dims[axis] - 1, 1)
        shape = [1, 1, 1]
        shape[axis] = dims[axis]
        data = np.broadcast_to(idx.reshape(shape), dims)
        return Volume3D(dims, (1.0, 1.0, 1.0), data)

    return make
