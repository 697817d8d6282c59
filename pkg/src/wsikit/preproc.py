"""Tissue masking and the raster primitives behind it.

The mask pipeline runs on a low-resolution pyramid level: optional black-region
replacement, median blur, HSV conversion, Otsu thresholding of the saturation
channel (tissue = strictly above threshold), then a configurable binary
morphology plan. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

try:  # optional: exact histogram-based uint8 median, much faster than scipy
    import cv2
except ImportError:
    cv2 = None

from .pyramid import SlidePyramid

log = logging.getLogger(__name__)

DEFAULT_MASK_MAX_DIM = 4096
DEFAULT_BLACK_CEILING = 10


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


def otsu_threshold(histogram: np.ndarray) -> OtsuResult:
    """Threshold t maximizing between-class variance of the split
    [0..t] / [t+1..255]; ties break toward the smaller t.

    Computed in exact rational arithmetic so the argmax is reproducible
    bit-for-bit against an exhaustive-scan oracle. A histogram whose mass sits
    in a single bin has no split; its bin index is returned flagged degenerate.
    """
    h = np.asarray(histogram, dtype=np.int64)
    if h.shape != (256,) or (h < 0).any():
        raise ValueError("histogram must be 256 non-negative counts")
    total = int(h.sum())
    if total <= 0:
        raise ValueError("histogram is empty")
    nonzero = np.flatnonzero(h)
    if len(nonzero) == 1:
        return OtsuResult(int(nonzero[0]), True)

    counts = [int(c) for c in h]
    moments = [i * counts[i] for i in range(256)]
    s_total = sum(moments)
    best_t, best_val = 0, Fraction(-1)
    c0 = s0 = 0
    for t in range(256):
        c0 += counts[t]
        s0 += moments[t]
        c1 = total - c0
        s1 = s_total - s0
        if c0 == 0 or c1 == 0:
            continue
        # sigma^2_B = w0*w1*(mu0-mu1)^2 = (s0*c1 - s1*c0)^2 / (N^2 * c0 * c1)
        val = Fraction((s0 * c1 - s1 * c0) ** 2, c0 * c1)
        if val > best_val:
            best_t, best_val = t, val
    return OtsuResult(best_t, False)


def median_blur(image: np.ndarray, k: int) -> np.ndarray:
    """Per-channel k*k median with edge-replicated borders.

    cv2 and scipy compute the identical exact median; cv2 is preferred for
    uint8 because its histogram algorithm is an order of magnitude faster on
    whole low-resolution levels.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("median kernel must be odd and >= 1")
    if k == 1:
        return np.array(image, copy=True)
    if cv2 is not None and image.dtype == np.uint8 and k >= 3 and \
            (image.ndim == 2 or image.shape[2] in (1, 3, 4)):
        return cv2.medianBlur(np.ascontiguousarray(image), k)
    if image.ndim == 2:
        return ndimage.median_filter(image, size=(k, k), mode="nearest")
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.median_filter(image[..., c], size=(k, k), mode="nearest")
    return out


def replace_black(image: np.ndarray, value_ceiling: int = DEFAULT_BLACK_CEILING) -> np.ndarray:
    """Turn near-black pixels (all channels <= ceiling) white; scanner borders
    otherwise wreck the saturation histogram."""
    out = np.array(image, copy=True)
    black = (image <= value_ceiling).all(axis=-1)
    out[black] = 255
    return out


def saturation(image: np.ndarray) -> np.ndarray:
    """Just the hexcone S channel, without the hue bookkeeping."""
    image = np.asarray(image)
    rgb = image.astype(np.float64)
    if np.issubdtype(image.dtype, np.integer):
        rgb /= 255.0
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(v > 0, np.clip(c / v, 0.0, 1.0), 0.0)


def rgb_to_hsv(image: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV; H in [0, 360), S and V in [0, 1]."""
    image = np.asarray(image)
    rgb = image.astype(np.float64)
    if np.issubdtype(image.dtype, np.integer):
        rgb /= 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / v, 0.0)
        hr = np.mod((g - b) / c, 6.0)
        hg = (b - r) / c + 2.0
        hb = (r - g) / c + 4.0
    h = np.select([c == 0, v == r, v == g], [0.0, hr, hg], default=hb) * 60.0
    h = np.mod(h, 360.0)
    return np.stack([h, np.clip(s, 0.0, 1.0), v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone transform; returns floats in [0, 1]."""
    h = np.mod(hsv[..., 0], 360.0) / 60.0
    s = np.clip(hsv[..., 1], 0.0, 1.0)
    v = hsv[..., 2]
    c = v * s
    x = c * (1.0 - np.abs(np.mod(h, 2.0) - 1.0))
    m = v - c
    zeros = np.zeros_like(c)
    sector = np.floor(h).astype(int) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    return np.stack([r + m, g + m, b + m], axis=-1)


@dataclass(frozen=True)
class MorphKernel:
    """Structuring element: square of side `size` (anchor at index size//2)
    or disk of radius `size`."""

    shape: str = "square"
    size: int = 3

    def __post_init__(self) -> None:
        if self.shape not in ("square", "disk"):
            raise ValueError(f"unknown kernel shape {self.shape!r}")
        if self.size < 1:
            raise ValueError("kernel size must be >= 1")

    def offsets(self) -> list[tuple[int, int]]:
        if self.shape == "square":
            lo = -(self.size // 2)
            rng = range(lo, lo + self.size)
            return [(dy, dx) for dy in rng for dx in rng]
        r = self.size
        return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
                if dy * dy + dx * dx <= r * r]


def _shifted(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[p] = mask[p - (dy, dx)], zero-filled outside."""
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    yo = slice(max(-dy, 0), max(-dy, 0) + (ys.stop - ys.start))
    xo = slice(max(-dx, 0), max(-dx, 0) + (xs.stop - xs.start))
    if ys.stop > ys.start and xs.stop > xs.start:
        out[ys, xs] = mask[yo, xo]
    return out


def _dilate_axis(mask: np.ndarray, offsets: range, axis: int) -> np.ndarray:
    out = np.zeros_like(mask)
    for o in offsets:
        out |= _shifted(mask, o, 0) if axis == 0 else _shifted(mask, 0, o)
    return out


def _erode_axis(mask: np.ndarray, offsets: range, axis: int) -> np.ndarray:
    out = np.ones_like(mask)
    for o in offsets:
        out &= _shifted(mask, -o, 0) if axis == 0 else _shifted(mask, 0, -o)
    return out


def dilate(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    """Minkowski sum: out[p] = any mask[p - b] over kernel offsets b."""
    mask = np.asarray(mask, dtype=bool)
    if kernel.shape == "square":
        lo = -(kernel.size // 2)
        rng = range(lo, lo + kernel.size)
        return _dilate_axis(_dilate_axis(mask, rng, 0), rng, 1)
    out = np.zeros_like(mask)
    for dy, dx in kernel.offsets():
        out |= _shifted(mask, dy, dx)
    return out


def erode(mask: np.ndarray, kernel: MorphKernel) -> np.ndarray:
    """out[p] = all mask[p + b] over kernel offsets b; outside counts as empty."""
    mask = np.asarray(mask, dtype=bool)
    if kernel.shape == "square":
        lo = -(kernel.size // 2)
        rng = range(lo, lo + kernel.size)
        return _erode_axis(_erode_axis(mask, rng, 0), rng, 1)
    out = np.ones_like(mask)
    for dy, dx in kernel.offsets():
        out &= _shifted(mask, -dy, -dx)
    return out


def morphology(mask: np.ndarray, op: str, kernel: MorphKernel) -> np.ndarray:
    if op == "erode":
        return erode(mask, kernel)
    if op == "dilate":
        return dilate(mask, kernel)
    if op == "open":
        return dilate(erode(mask, kernel), kernel)
    if op == "close":
        return erode(dilate(mask, kernel), kernel)
    raise ValueError(f"unknown morphology op {op!r}")


MorphPlan = list[tuple[str, MorphKernel]]

DEFAULT_MORPH_PLAN: MorphPlan = [
    ("close", MorphKernel("square", 5)),
    ("open", MorphKernel("square", 3)),
]


@dataclass
class TissueMask:
    """Binary tissue plane at a pyramid level (1 = tissue)."""

    slide_id: str
    level: int
    width: int
    height: int
    bits: np.ndarray
    downsample: int

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.shape != (self.height, self.width):
            raise ValueError("mask bits do not match declared dims")
        if self.downsample != 2 ** self.level:
            raise ValueError("downsample must equal 2^level")

    def resample_nearest(self, out_width: int, out_height: int, out_downsample: float) -> np.ndarray:
        """Nearest-neighbour resample (sampled at output pixel centres)."""
        ys = np.minimum(((np.arange(out_height) + 0.5) * out_downsample / self.downsample).astype(int),
                        self.height - 1)
        xs = np.minimum(((np.arange(out_width) + 0.5) * out_downsample / self.downsample).astype(int),
                        self.width - 1)
        return self.bits[np.ix_(ys, xs)]


def tissue_mask(pyramid: SlidePyramid, level: int | None = None, *,
                black_fix: bool = False, blur_k: int = 7,
                morph_plan: MorphPlan | None = None) -> TissueMask:
    """Segment tissue from glass on a low-resolution level.

    A degenerate saturation histogram (blank slide) yields an empty mask and a
    logged warning rather than an error.
    """
    if level is None:
        level = pyramid.best_level_for(DEFAULT_MASK_MAX_DIM)
    info = pyramid.level_info(level)
    image = pyramid.read_full_level(level)
    if black_fix:
        image = replace_black(image)
    image = median_blur(image, blur_k)
    s_byte = np.rint(saturation(image) * 255.0).astype(np.uint8)
    hist = np.bincount(s_byte.ravel(), minlength=256)
    thr, degenerate = otsu_threshold(hist)
    if degenerate:
        log.warning("slide %s: degenerate saturation histogram, empty tissue mask",
                    pyramid.slide_id)
        bits = np.zeros((info.height, info.width), dtype=bool)
    else:
        bits = s_byte > thr
        for op, kernel in (DEFAULT_MORPH_PLAN if morph_plan is None else morph_plan):
            bits = morphology(bits, op, kernel)
    return TissueMask(pyramid.slide_id, level, info.width, info.height, bits,
                      2 ** level)


def mask_png_bytes(bits: np.ndarray) -> bytes:
    """Canonical 1-bit PNG encoding for binary masks."""
    import io
    buf = io.BytesIO()
    Image.fromarray(np.asarray(bits, dtype=bool)).convert("1").save(buf, format="PNG")
    return buf.getvalue()


def save_mask(mask: TissueMask, path: str | Path) -> None:
    """1-bit PNG plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(mask_png_bytes(mask.bits))
    sidecar = {"slide_id": mask.slide_id, "level": mask.level,
               "downsample": mask.downsample}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_mask(path: str | Path) -> TissueMask:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with Image.open(path) as im:
        bits = np.asarray(im.convert("1"), dtype=bool)
    return TissueMask(meta["slide_id"], meta["level"], bits.shape[1], bits.shape[0],
                      bits, meta["downsample"])
