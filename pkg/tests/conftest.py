import numpy as np
import pytest

from maglab.geometry import AnchorSet


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_instance(seed, n, d, box=1.0):
    """Anchors and a point, both uniform in [-box, box]^d."""
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(rng.uniform(-box, box, (n, d)))
    return anchors, rng.uniform(-box, box, (n, d))
