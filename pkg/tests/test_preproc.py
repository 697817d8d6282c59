from __future__ import annotations

import colorsys
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsikit.preproc import (MorphKernel, dilate, erode, median_blur, saturation,
                            morphology, otsu_threshold, replace_black,
                            rgb_to_hsv, hsv_to_rgb, tissue_mask)
from wsikit.pyramid import build_pyramid
from wsikit.synthetic import disk_mask


# ---------------------------------------------------------------- rgb_to_hsv

def test_hsv_black_and_red():
    out = rgb_to_hsv(np.array([[[0, 0, 0]], [[255, 0, 0]]], dtype=np.uint8))
    assert np.allclose(out[0, 0], (0.0, 0.0, 0.0))
    assert np.allclose(out[1, 0], (0.0, 1.0, 1.0))


def test_hsv_matches_colorsys(rng):
    pixels = rng.integers(0, 256, size=(64, 3)).astype(np.uint8)
    got = rgb_to_hsv(pixels.reshape(1, -1, 3))[0]
    for px, (h, s, v) in zip(pixels, got):
        rh, rs, rv = colorsys.rgb_to_hsv(*(px / 255.0))
        assert abs(h - rh * 360.0) % 360.0 < 1e-6
        assert abs(s - rs) < 1e-6 and abs(v - rv) < 1e-6


def test_hsv_roundtrip(rng):
    rgb = rng.random((20, 20, 3))
    back = hsv_to_rgb(rgb_to_hsv(rgb))
    assert np.allclose(back, rgb, atol=1e-12)


def test_saturation_fast_path_matches_full_hsv(rng):
    img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
    assert np.allclose(saturation(img), rgb_to_hsv(img)[..., 1], atol=1e-15)


# ------------------------------------------------------------ otsu_threshold

def otsu_oracle(hist: np.ndarray) -> int:
    """Exhaustive scan of the textbook w0*w1*(mu0-mu1)^2 in exact rationals."""
    total = int(hist.sum())
    best_t, best = 0, Fraction(-1)
    for t in range(256):
        c0 = int(hist[: t + 1].sum())
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            continue
        mu0 = Fraction(int((np.arange(t + 1) * hist[: t + 1]).sum()), c0)
        mu1 = Fraction(int((np.arange(t + 1, 256) * hist[t + 1:]).sum()), c1)
        val = Fraction(c0, total) * Fraction(c1, total) * (mu0 - mu1) ** 2
        if val > best:
            best_t, best = t, val
    return best_t


def test_otsu_two_spikes():
    hist = np.zeros(256, dtype=int)
    hist[50], hist[200] = 120, 80
    thr, degenerate = otsu_threshold(hist)
    assert not degenerate
    assert 50 <= thr <= 199
    assert thr == otsu_oracle(hist)


def test_otsu_single_spike_degenerate():
    hist = np.zeros(256, dtype=int)
    hist[100] = 7
    assert otsu_threshold(hist) == (100, True)


def otsu_values(hist: np.ndarray) -> dict[int, Fraction]:
    total = int(hist.sum())
    vals = {}
    for t in range(256):
        c0 = int(hist[: t + 1].sum())
        c1 = total - c0
        if c0 == 0 or c1 == 0:
            continue
        mu0 = Fraction(int((np.arange(t + 1) * hist[: t + 1]).sum()), c0)
        mu1 = Fraction(int((np.arange(t + 1, 256) * hist[t + 1:]).sum()), c1)
        vals[t] = Fraction(c0, total) * Fraction(c1, total) * (mu0 - mu1) ** 2
    return vals


def test_otsu_mirror_symmetry(rng):
    # the mirrored split 255-1-t must sit among the mirrored maximizers
    # (ties break toward the smaller index, so equality of the variance is
    # the invariant, not equality of the index)
    for _ in range(20):
        hist = rng.integers(0, 50, size=256)
        if (hist > 0).sum() < 2:
            continue
        t = otsu_threshold(hist).threshold
        mirrored = hist[::-1].copy()
        vals = otsu_values(mirrored)
        assert vals[255 - 1 - t] == max(vals.values())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=256, max_size=256),
       st.data())
def test_otsu_equals_exhaustive(counts, data):
    hist = np.asarray(counts)
    if hist.sum() == 0:
        hist[data.draw(st.integers(0, 255))] = 1
    if (hist > 0).sum() < 2:
        res = otsu_threshold(hist)
        assert res.degenerate
        return
    assert otsu_threshold(hist).threshold == otsu_oracle(hist)


# ---------------------------------------------------------------- median_blur

def median_oracle(image: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    pad = np.pad(image, [(r, r), (r, r)] + [(0, 0)] * (image.ndim - 2), mode="edge")
    out = np.empty_like(image)
    for y in range(image.shape[0]):
        for x in range(image.shape[1]):
            win = pad[y:y + k, x:x + k]
            out[y, x] = np.median(win.reshape(-1, *image.shape[2:]), axis=0)
    return out


def test_median_constant_unchanged():
    img = np.full((16, 16, 3), 99, dtype=np.uint8)
    assert (median_blur(img, 7) == img).all()


def test_median_rejects_salt():
    img = np.full((9, 9), 10, dtype=np.uint8)
    img[4, 4] = 255
    assert (median_blur(img, 3) == 10).all()


def test_median_matches_oracle(rng):
    img = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    assert (median_blur(img, 7) == median_oracle(img, 7)).all()


def test_median_even_k_rejected():
    with pytest.raises(ValueError):
        median_blur(np.zeros((4, 4), np.uint8), 4)


def test_median_backends_agree(rng):
    cv2 = pytest.importorskip("cv2")
    from scipy import ndimage
    img = rng.integers(0, 256, size=(25, 33)).astype(np.uint8)
    for k in (3, 5, 7):
        assert (median_blur(img, k)
                == ndimage.median_filter(img, size=(k, k), mode="nearest")).all()


def test_median_commutes_with_channel_permutation(rng):
    img = rng.integers(0, 256, size=(20, 20, 3)).astype(np.uint8)
    perm = [2, 0, 1]
    assert (median_blur(img[..., perm], 5) == median_blur(img, 5)[..., perm]).all()


# ----------------------------------------------------------------- morphology

def dilate_oracle(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    """Direct Minkowski sum: stamp the kernel at every foreground pixel."""
    out = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    for y, x in zip(*np.nonzero(mask)):
        for dy, dx in kernel.offsets():
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                out[yy, xx] = True
    return out


def erode_oracle(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    out = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            ok = True
            for dy, dx in kernel.offsets():
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w and mask[yy, xx]):
                    ok = False
                    break
            out[y, x] = ok
    return out


def test_morphology_empty():
    empty = np.zeros((10, 10), dtype=bool)
    for op in ("erode", "dilate", "open", "close"):
        assert not morphology(empty, op, MorphKernel("square", 3)).any()


def test_blob_survives_close_open():
    # a filled rectangle is morphologically open w.r.t. a smaller square
    blob = np.zeros((40, 40), dtype=bool)
    blob[8:30, 5:33] = True
    out = morphology(morphology(blob, "close", MorphKernel("square", 3)),
                     "open", MorphKernel("square", 3))
    assert (out == blob).all()
    # a large digital disk survives within a thin boundary film
    disk = disk_mask((60, 60), 30, 30, 20)
    out = morphology(morphology(disk, "close", MorphKernel("square", 3)),
                     "open", MorphKernel("square", 3))
    assert (out ^ disk).sum() <= 0.02 * disk.sum()


@pytest.mark.parametrize("kernel", [MorphKernel("square", 3),
                                    MorphKernel("square", 4),
                                    MorphKernel("disk", 2)])
def test_dilate_erode_match_oracle(rng, kernel):
    for _ in range(5):
        mask = rng.random((16, 16)) < 0.3
        assert (dilate(mask, kernel) == dilate_oracle(mask, kernel)).all()
        assert (erode(mask, kernel) == erode_oracle(mask, kernel)).all()


def test_morphology_monotonicity(rng):
    for _ in range(10):
        mask = rng.random((20, 20)) < 0.4
        k = MorphKernel("square", 3)
        assert (dilate(mask, k) | mask).sum() == dilate(mask, k).sum()  # dilate ⊇ A
        assert (erode(mask, k) & mask).sum() == erode(mask, k).sum()    # erode ⊆ A


def test_open_close_compositions(rng):
    mask = rng.random((15, 15)) < 0.5
    k = MorphKernel("square", 3)
    assert (morphology(mask, "open", k) == dilate(erode(mask, k), k)).all()
    assert (morphology(mask, "close", k) == erode(dilate(mask, k), k)).all()


# --------------------------------------------------------------- replace_black

def test_replace_black():
    allblack = np.zeros((4, 4, 3), dtype=np.uint8)
    assert (replace_black(allblack, 10) == 255).all()
    white = np.full((4, 4, 3), 255, dtype=np.uint8)
    assert (replace_black(white, 10) == white).all()


def test_replace_black_predicate_scan(rng):
    img = rng.integers(0, 30, size=(12, 12, 3)).astype(np.uint8)
    out = replace_black(img, 10)
    for y in range(12):
        for x in range(12):
            if (img[y, x] <= 10).all():
                assert (out[y, x] == 255).all()
            else:
                assert (out[y, x] == img[y, x]).all()


# ---------------------------------------------------------------- tissue_mask

def test_tissue_mask_disk_iou():
    size = 512
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    disk = disk_mask((size, size), 256, 250, 180)
    img[disk] = (228, 130, 166)
    pyr = build_pyramid(img, 256, (0.25, 0.25), slide_id="d")
    mask = tissue_mask(pyr, level=0)
    inter = (mask.bits & disk).sum()
    union = (mask.bits | disk).sum()
    assert inter / union >= 0.95


def test_tissue_mask_blank_slide(caplog):
    img = np.full((256, 256, 3), 255, dtype=np.uint8)
    pyr = build_pyramid(img, 256, (0.25, 0.25), slide_id="blank")
    with caplog.at_level("WARNING"):
        mask = tissue_mask(pyr, level=0)
    assert not mask.bits.any()
    assert any("degenerate" in r.message for r in caplog.records)


def test_tissue_mask_black_fix_invariance():
    size = 384
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    img[disk_mask((size, size), 190, 190, 120)] = (228, 130, 166)
    bordered = img.copy()
    bordered[:20, :] = 0
    bordered[:, :12] = 0
    pyr_clean = build_pyramid(img, 256, (0.25, 0.25), slide_id="clean")
    pyr_fixed = build_pyramid(bordered, 256, (0.25, 0.25), slide_id="bordered")
    m_clean = tissue_mask(pyr_clean, level=0, black_fix=True)
    m_fixed = tissue_mask(pyr_fixed, level=0, black_fix=True)
    assert (m_clean.bits == m_fixed.bits).all()
