from __future__ import annotations

import numpy as np
import pytest

from wsikit.preproc import TissueMask
from wsikit.pyramid import build_pyramid
from wsikit.synthetic import make_synthetic_slide


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240811)


@pytest.fixture
def synthetic_slide():
    """(pyramid, annotation) for a small two-nest slide."""
    image, annotation = make_synthetic_slide(512, 2, seed=3)
    return build_pyramid(image, 256, (0.25, 0.25), slide_id="syn"), annotation


def full_tissue_mask(slide_id: str, width: int, height: int, level: int = 0) -> TissueMask:
    ds = 2 ** level
    return TissueMask(slide_id, level, width // ds, height // ds,
                      np.ones((height // ds, width // ds), dtype=bool), ds)
