import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rand4(rng, shape, lo=-2.0, hi=2.0, dtype=np.float64):
    return rng.uniform(lo, hi, size=shape).astype(dtype)
