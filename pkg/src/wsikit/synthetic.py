"""Synthetic slide generator for tests and demos.

Slides mimic the geometry the pipeline cares about: white glass background, a
saturated pink tissue region, and darker tumour nests strictly inside the
tissue. The annotation is the exact tumour mask at level 0, so an oracle
scorer can reproduce it perfectly.
"""

from __future__ import annotations

import numpy as np

GLASS = (255, 255, 255)
TISSUE_RGB = (228, 130, 166)
TUMOUR_RGB = (156, 72, 130)


def disk_mask(shape: tuple[int, int], cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def make_synthetic_slide(size: int = 1024, n_blobs: int = 2, seed: int = 0,
                         ) -> tuple[np.ndarray, np.ndarray]:
    """(RGB image, binary tumour annotation), both size x size."""
    rng = np.random.default_rng(seed)
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = GLASS

    tissue_r = size * 0.42
    t_cx = size / 2 + rng.uniform(-size * 0.03, size * 0.03)
    t_cy = size / 2 + rng.uniform(-size * 0.03, size * 0.03)
    tissue = disk_mask((size, size), t_cx, t_cy, tissue_r)
    image[tissue] = TISSUE_RGB

    annotation = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        r = rng.uniform(size * 0.03, size * 0.09)
        # keep nests well inside the tissue so mask morphology cannot clip them
        max_offset = tissue_r - r - size * 0.05
        angle = rng.uniform(0, 2 * np.pi)
        rho = rng.uniform(0, max_offset)
        annotation |= disk_mask((size, size), t_cx + rho * np.cos(angle),
                                t_cy + rho * np.sin(angle), r)
    image[annotation] = TUMOUR_RGB
    return image, annotation
