from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsikit.preproc import TissueMask
from wsikit.sampler import (AugmentSpec, LabelledCoord, augment,
                            augment_geometric, build_grid, invert_geometric,
                            label_patch, load_coords, perturb,
                            sample_training_set, save_coords,
                            stratified_folds, window_of, TUMOUR, NON_TUMOUR)

from conftest import full_tissue_mask


def coverage_plane(centres, patch_size, width, height) -> np.ndarray:
    cov = np.zeros((height, width), dtype=np.int32)
    for cx, cy in centres:
        x0, y0, x1, y1 = window_of((cx, cy), patch_size)
        cov[max(y0, 0):min(y1, height), max(x0, 0):min(x1, width)] += 1
    return cov


# ------------------------------------------------------------------ build_grid

def test_grid_full_tissue_counts():
    mask = full_tissue_mask("s", 1024, 1024)
    grid = build_grid(mask, 256, 256)
    assert len(grid) == 16
    assert (grid.centres[0] == (128, 128)).all()
    # row-major ordering by (y, x)
    order = np.lexsort((grid.centres[:, 0], grid.centres[:, 1]))
    assert (order == np.arange(len(grid))).all()


def test_grid_half_stride_coverage_bound():
    mask = full_tissue_mask("s", 1024, 1024)
    grid = build_grid(mask, 256, 128)
    cov = coverage_plane(grid.centres, 256, 1024, 1024)
    assert cov.max() <= 4
    assert (cov[256:768, 256:768] == 4).all()  # grid interior


def test_grid_empty_mask():
    mask = TissueMask("s", 0, 64, 64, np.zeros((64, 64), bool), 1)
    assert len(build_grid(mask, 32, 32)) == 0


def test_grid_tissue_monotonicity(rng):
    bits = rng.random((32, 32)) < 0.2
    mask_small = TissueMask("s", 0, 32, 32, bits, 1)
    mask_big = TissueMask("s", 0, 32, 32, bits | (rng.random((32, 32)) < 0.2), 1)
    small = {tuple(c) for c in build_grid(mask_small, 8, 4).centres}
    big = {tuple(c) for c in build_grid(mask_big, 8, 4).centres}
    assert small <= big
    # and the unrestricted grid is an upper bound
    full = {tuple(c) for c in build_grid(full_tissue_mask("s", 32, 32), 8, 4).centres}
    assert big <= full


def test_grid_respects_low_res_mask():
    bits = np.zeros((16, 16), dtype=bool)
    bits[2, 3] = True  # level-2 mask pixel = level-0 [12..16) x [8..12)
    mask = TissueMask("s", 2, 16, 16, bits, 4)
    grid = build_grid(mask, 8, 8, slide_dims=(64, 64))
    assert len(grid) > 0
    for cx, cy in grid.centres:
        x0, y0, x1, y1 = window_of((int(cx), int(cy)), 8)
        assert x1 > 12 and x0 < 16 and y1 > 8 and y0 < 12


# ----------------------------------------------------------------- label_patch

def test_label_patch_examples():
    ann = np.zeros((64, 64), dtype=bool)
    ann[20:30, 20:30] = True
    assert label_patch(ann, (25, 25), 8) == TUMOUR
    corner = np.zeros((64, 64), dtype=bool)
    corner[10, 10] = True
    # patch window [10, 18) x [10, 18): exactly one annotated corner pixel
    assert label_patch(corner, (14, 14), 8) == TUMOUR
    assert label_patch(ann, (50, 50), 8) == NON_TUMOUR


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), cx=st.integers(-4, 36), cy=st.integers(-4, 36),
       p=st.integers(1, 9))
def test_label_patch_equals_bruteforce(seed, cx, cy, p):
    ann = np.random.default_rng(seed).random((32, 32)) < 0.05
    expect = NON_TUMOUR
    for y in range(32):
        for x in range(32):
            x0, y0, x1, y1 = window_of((cx, cy), p)
            if ann[y, x] and x0 <= x < x1 and y0 <= y < y1:
                expect = TUMOUR
    assert label_patch(ann, (cx, cy), p) == expect


# ------------------------------------------------------- sample_training_set

def _slide_entry(seed=0, size=96):
    rng = np.random.default_rng(seed)
    ann = np.zeros((size, size), dtype=bool)
    ann[30:40, 50:70] = True
    tissue = TissueMask("s%d" % seed, 0, size, size,
                        np.ones((size, size), bool), 1)
    return ("s%d" % seed, ann, tissue)


def test_sample_counts_and_labels():
    entry = _slide_entry()
    coords = sample_training_set([entry], 16, 100, seed=5)
    assert len(coords) == 200
    assert sum(c.label == TUMOUR for c in coords) == 100
    _, ann, _ = entry
    for c in coords:
        assert label_patch(ann, c.centre, 16) == c.label


def test_sample_no_tumour_error():
    sid, ann, tissue = _slide_entry()
    with pytest.raises(ValueError, match="tumour"):
        sample_training_set([(sid, np.zeros_like(ann), tissue)], 16, 10, seed=1)


def test_sample_deterministic():
    entry = _slide_entry(seed=2)
    a = sample_training_set([entry], 16, 50, seed=9)
    b = sample_training_set([entry], 16, 50, seed=9)
    assert a == b
    c = sample_training_set([entry], 16, 50, seed=10)
    assert a != c


# ---------------------------------------------------------------------- perturb

def test_perturb_radius_zero(rng):
    assert perturb((40, 50), 0, rng, (100, 100)) == (40, 50)


def test_perturb_radius_bound(rng):
    r = 128
    for _ in range(2000):
        x, y = perturb((500, 500), r, rng, (2000, 2000))
        assert (x - 500) ** 2 + (y - 500) ** 2 <= (r + 0.5 * np.sqrt(2)) ** 2
        # rounded offsets stay within the closed disk up to rounding;
        # the continuous draw itself is within r
    draws = np.array([perturb((5000, 5000), r, rng, (10 ** 5, 10 ** 5))
                      for _ in range(10 ** 5)])
    d2 = ((draws - 5000) ** 2).sum(axis=1)
    assert np.sqrt(d2.max()) <= r + 1.0


def test_perturb_uniform_disk_gof(rng):
    # annuli of equal area must receive near-equal counts
    r, n = 128, 10 ** 5
    draws = np.array([perturb((5000, 5000), r, rng, (10 ** 5, 10 ** 5))
                      for _ in range(n)])
    d = np.sqrt(((draws - 5000.0) ** 2).sum(axis=1))
    k = 8
    edges = r * np.sqrt(np.arange(k + 1) / k)  # equal-area annuli
    counts, _ = np.histogram(d, bins=edges)
    expected = n / k
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # 7 dof; 99.9% quantile is 24.3, leave margin for edge rounding
    assert chi2 < 40.0


# ---------------------------------------------------------------------- augment

def test_augment_identity_and_involutions(rng):
    patch = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    assert (augment(patch, AugmentSpec()) == patch).all()
    h = AugmentSpec(flips="h")
    assert (augment(augment(patch, h), h) == patch).all()
    r = AugmentSpec(rot90=1)
    out = patch
    for _ in range(4):
        out = augment(out, r)
    assert (out == patch).all()


def test_augment_brightness_midgrey():
    patch = np.full((8, 8, 3), 128, dtype=np.uint8)
    spec = AugmentSpec(brightness_delta=64.0 / 255.0)
    out = augment(patch, spec)
    assert (out == 128 + 64).all()


def test_augment_histogram_invariance_geometric(rng):
    patch = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
    for spec in (AugmentSpec(flips="v", rot90=3), AugmentSpec(rot90=2)):
        out = augment(patch, spec)
        assert (np.sort(out.ravel()) == np.sort(patch.ravel())).all()


def test_augment_delta_out_of_range():
    with pytest.raises(ValueError):
        AugmentSpec(brightness_delta=0.5)
    with pytest.raises(ValueError):
        AugmentSpec(saturation_delta=-0.2)


def test_invert_geometric_roundtrip(rng):
    plane = rng.random((10, 10))
    for flips in ("none", "h", "v"):
        for k in range(4):
            spec = AugmentSpec(flips=flips, rot90=k)
            assert (invert_geometric(spec, augment_geometric(plane, spec))
                    == plane).all()


def test_invert_geometric_rejects_colour():
    spec = AugmentSpec(brightness_delta=0.1)
    with pytest.raises(ValueError):
        invert_geometric(spec, np.zeros((4, 4)))


def test_augment_spec_random_within_limits(rng):
    for geometric in (False, True):
        spec = AugmentSpec.random(rng, geometric_only=geometric)
        assert abs(spec.brightness_delta) <= 64.0 / 255.0
        assert abs(spec.contrast_delta) <= 0.75
        if geometric:
            assert spec.is_geometric


# -------------------------------------------------------------- stratified_folds

def test_folds_balanced():
    slides = [(f"t{i}", True) for i in range(9)] + [(f"n{i}", False) for i in range(9)]
    folds = stratified_folds(slides, 3, seed=0)
    for f in range(3):
        assert sum(1 for s, tum in slides if tum and folds[s] == f) == 3
        assert sum(1 for s, tum in slides if not tum and folds[s] == f) == 3


def test_folds_uneven():
    slides = [(f"t{i}", True) for i in range(10)] + [(f"n{i}", False) for i in range(8)]
    folds = stratified_folds(slides, 3, seed=1)
    t_sizes = sorted(sum(1 for s, tum in slides if tum and folds[s] == f)
                     for f in range(3))
    n_sizes = sorted(sum(1 for s, tum in slides if not tum and folds[s] == f)
                     for f in range(3))
    assert t_sizes == [3, 3, 4]
    assert n_sizes == [2, 3, 3]


def test_folds_deterministic_and_warning(caplog):
    slides = [("a", True), ("b", True), ("c", False)]
    assert stratified_folds(slides, 2, seed=3) == stratified_folds(slides, 2, seed=3)
    with caplog.at_level("WARNING"):
        stratified_folds(slides, 3, seed=0)
    assert any("stratum" in r.message for r in caplog.records)


def test_coords_csv_roundtrip(tmp_path):
    coords = [LabelledCoord("s1", (10, 20), TUMOUR, 1),
              LabelledCoord("s2", (0, 5), NON_TUMOUR, 2)]
    save_coords(coords, tmp_path / "c.csv")
    assert load_coords(tmp_path / "c.csv") == coords
