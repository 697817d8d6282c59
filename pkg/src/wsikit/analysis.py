"""Heatmap analysis: connected regions, geometric properties, the 32-feature
vector for metastasis typing, and convex-hull tumour-burden estimation.

All physical quantities use millimetres; the pixel pitch is
map_downsample * microns-per-pixel / 1000. Second moments treat pixels as unit
squares (the +1/12 term), which keeps eccentricity strictly below 1 even for
one-pixel-wide regions.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from math import ceil, floor
from pathlib import Path

import numpy as np
from scipy import ndimage

from .inference import ProbabilityMap, threshold_map
from .preproc import MorphKernel, TissueMask, morphology

log = logging.getLogger(__name__)

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label foreground components; labels 1..n ordered by first row-major pixel."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = np.asarray(mask, dtype=bool)
    raw, n = ndimage.label(mask, structure=_STRUCT_4 if connectivity == 4 else _STRUCT_8)
    if n == 0:
        return raw.astype(np.int32), 0
    flat = raw.ravel()
    labels, first = np.unique(flat[flat > 0], return_index=True)
    order = labels[np.argsort(first)]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1)
    return remap[raw], n


@dataclass(frozen=True)
class Region:
    label: int
    n_pixels: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    area_mm2: float
    perimeter_mm: float
    major_axis_mm: float
    eccentricity: float
    extent: float
    solidity: float
    mean_confidence: float


def _monotone_chain(points: np.ndarray) -> list[tuple[int, int]]:
    """Strict convex hull (extreme points only) of integer (x, y) points, CCW."""
    pts = sorted({(int(x), int(y)) for x, y in points})
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) > 1 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) > 1 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def convex_hull_mask(mask: np.ndarray) -> np.ndarray:
    """Rasterized convex hull of foreground pixel centres (superset of input).

    Row intervals are computed in exact rational arithmetic, which makes the
    operation idempotent: a pixel is set iff its centre lies in the hull.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("convex hull of an empty mask")
    hull = _monotone_chain(np.stack([xs, ys], axis=1))
    out = np.zeros_like(mask)
    if len(hull) == 1:
        out[hull[0][1], hull[0][0]] = True
        return out
    edges = [(hull[i], hull[(i + 1) % len(hull)]) for i in range(len(hull))]
    y_lo = min(p[1] for p in hull)
    y_hi = max(p[1] for p in hull)
    for y in range(y_lo, y_hi + 1):
        span: list[Fraction] = []
        for (ax, ay), (bx, by) in edges:
            if ay == by:
                if ay == y:
                    span += [Fraction(ax), Fraction(bx)]
            elif min(ay, by) <= y <= max(ay, by):
                span.append(Fraction(ax) + Fraction((y - ay) * (bx - ax), by - ay))
        if span:
            out[y, ceil(min(span)):floor(max(span)) + 1] = True
    return out


def _stats_block(values: np.ndarray) -> list[float]:
    """[max, mean, variance, skewness, excess kurtosis]; the 1-element (or
    zero-variance) sample convention is 0 for the higher moments."""
    v = np.asarray(values, dtype=np.float64)
    mx, mean = float(v.max()), float(v.mean())
    if len(v) == 1:
        return [mx, mean, 0.0, 0.0, 0.0]
    m2 = float(np.mean((v - mean) ** 2))
    if m2 == 0.0:
        return [mx, mean, 0.0, 0.0, 0.0]
    m3 = float(np.mean((v - mean) ** 3))
    m4 = float(np.mean((v - mean) ** 4))
    return [mx, mean, m2, m3 / m2 ** 1.5, m4 / m2 ** 2 - 3.0]


def region_props(region_mask: np.ndarray, prob: np.ndarray | None,
                 mpp: float, downsample: float, label: int = 1) -> Region:
    """Geometric and confidence properties of one region's pixel set."""
    region_mask = np.asarray(region_mask, dtype=bool)
    ys, xs = np.nonzero(region_mask)
    n = len(ys)
    if n == 0:
        raise ValueError("region is empty")
    pitch = downsample * mpp / 1000.0  # mm per map pixel

    adj_h = int((region_mask[:, 1:] & region_mask[:, :-1]).sum())
    adj_v = int((region_mask[1:, :] & region_mask[:-1, :]).sum())
    perimeter = (4 * n - 2 * (adj_h + adj_v)) * pitch

    mx, my = xs.mean(), ys.mean()
    m20 = float(np.mean((xs - mx) ** 2)) + 1.0 / 12.0
    m02 = float(np.mean((ys - my) ** 2)) + 1.0 / 12.0
    m11 = float(np.mean((xs - mx) * (ys - my)))
    common = np.sqrt(((m20 - m02) / 2.0) ** 2 + m11 ** 2)
    lam1 = (m20 + m02) / 2.0 + common
    lam2 = max((m20 + m02) / 2.0 - common, 0.0)
    major_axis = 4.0 * np.sqrt(lam1)
    eccentricity = float(np.sqrt(max(1.0 - lam2 / lam1, 0.0))) if lam1 > 0 else 0.0

    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    extent = n / ((x1 - x0) * (y1 - y0))
    hull = convex_hull_mask(region_mask[y0:y1, x0:x1])
    solidity = n / int(hull.sum())
    confidence = float(prob[ys, xs].mean()) if prob is not None else 0.0

    return Region(label=label, n_pixels=n, bbox=(x0, y0, x1, y1),
                  area_mm2=n * pitch * pitch, perimeter_mm=perimeter,
                  major_axis_mm=float(major_axis) * pitch,
                  eccentricity=min(eccentricity, 1.0 - 1e-15),
                  extent=extent, solidity=solidity, mean_confidence=confidence)


def regions_of(mask: np.ndarray, prob: np.ndarray | None, mpp: float,
               downsample: float, connectivity: int = 8,
               min_pixels: int = 0) -> list[Region]:
    labels, n = connected_components(mask, connectivity)
    out = []
    for lbl in range(1, n + 1):
        rm = labels == lbl
        if min_pixels and int(rm.sum()) < min_pixels:
            continue
        out.append(region_props(rm, prob, mpp, downsample, label=lbl))
    return out


FEATURE_PROPS = ("area_mm2", "perimeter_mm", "eccentricity", "extent", "solidity")
FEATURE_STATS = ("max", "mean", "variance", "skewness", "kurtosis")

FEATURE_NAMES: tuple[str, ...] = (
    "largest_major_axis_mm_p09",
    "largest_major_axis_mm_p05",
    "largest_area_mm2_p05",
    "tumour_tissue_ratio_p09",
    "nonzero_pixels_p09",
    *(f"regions_{prop}_{stat}_p09" for prop in FEATURE_PROPS for stat in FEATURE_STATS),
    "mean_region_confidence_p09",
    "region_count_p09",
)


@dataclass
class RegionFeatureVector:
    """The 32 heatmap features; `negative` marks a slide with no region even
    at the 0.5 threshold."""

    values: np.ndarray
    negative: bool

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(FEATURE_NAMES),):
            raise ValueError(f"expected {len(FEATURE_NAMES)} features")
        if not np.isfinite(self.values).all():
            raise ValueError("features must be finite")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, map(float, self.values)))


def _largest(regions: list[Region]) -> Region | None:
    if not regions:
        return None
    return max(regions, key=lambda r: (r.n_pixels, -r.label))


def extract_features(pmap: ProbabilityMap, tissue: TissueMask, mpp: float,
                     min_region_pixels: int = 0) -> RegionFeatureVector:
    """Compute the 32-feature vector from a heatmap thresholded at 0.9/0.5.

    Pixel counts (ratio numerator/denominator and the non-zero count) are at
    heatmap scale. `min_region_pixels` optionally drops speck regions before
    any statistics; it is off by default.
    """
    if mpp <= 0:
        raise ValueError("mpp must be positive")
    mask09 = threshold_map(pmap, 0.9)
    mask05 = threshold_map(pmap, 0.5)
    regions09 = regions_of(mask09, pmap.values, mpp, pmap.downsample,
                           min_pixels=min_region_pixels)
    regions05 = regions_of(mask05, pmap.values, mpp, pmap.downsample,
                           min_pixels=min_region_pixels)
    if not regions05:
        return RegionFeatureVector(np.zeros(len(FEATURE_NAMES)), True)

    tissue_bits = tissue.resample_nearest(pmap.width, pmap.height, pmap.downsample)
    tissue_px = int(tissue_bits.sum())
    tumour_px = int(mask09.sum())

    big09, big05 = _largest(regions09), _largest(regions05)
    values = [
        big09.major_axis_mm if big09 else 0.0,
        big05.major_axis_mm,
        big05.area_mm2,
        tumour_px / tissue_px if tissue_px else 0.0,
        float(tumour_px),
    ]
    for prop in FEATURE_PROPS:
        if regions09:
            values.extend(_stats_block([getattr(r, prop) for r in regions09]))
        else:
            values.extend([0.0] * len(FEATURE_STATS))
    values.append(float(np.mean([r.mean_confidence for r in regions09]))
                  if regions09 else 0.0)
    values.append(float(len(regions09)))
    return RegionFeatureVector(np.array(values), False)


def save_features_csv(rows: list[tuple[str, RegionFeatureVector]],
                      path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write("# pixel counts and ratios are at heatmap (map) scale\n")
        writer = csv.writer(fh)
        writer.writerow(["slide_id", *FEATURE_NAMES, "negative"])
        for slide_id, fv in rows:
            writer.writerow([slide_id, *(repr(v) for v in fv.values),
                             int(fv.negative)])


def save_regions_json(regions: list[Region], path: str | Path) -> None:
    payload = [{"label": r.label, "n_pixels": r.n_pixels, "bbox": list(r.bbox),
                "area_mm2": r.area_mm2, "perimeter_mm": r.perimeter_mm,
                "major_axis_mm": r.major_axis_mm, "eccentricity": r.eccentricity,
                "extent": r.extent, "solidity": r.solidity,
                "mean_confidence": r.mean_confidence} for r in regions]
    Path(path).write_text(json.dumps(payload, indent=2))


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Foreground plus any background component not reaching the border."""
    mask = np.asarray(mask, dtype=bool)
    bg_labels, n = ndimage.label(~mask, structure=_STRUCT_4)
    if n == 0:
        return mask.copy()
    border = np.zeros_like(mask)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    outside = np.unique(bg_labels[border & ~mask])
    keep_open = np.isin(bg_labels, outside[outside > 0])
    return mask | (~mask & ~keep_open)


@dataclass
class BurdenResult:
    viable_mask: np.ndarray
    whole_mask: np.ndarray
    viable_area_mm2: float
    whole_area_mm2: float
    burden: float


def whole_tumor_approx(viable: np.ndarray, tissue: TissueMask,
                       map_downsample: float, close_k: int = 20,
                       open_k: int = 5, tissue_dilate_k: int = 20) -> np.ndarray:
    """Approximate the whole-tumour region from the viable mask: morphological
    cleanup, hole filling, convex hull, then intersection with the (dilated)
    tissue mask."""
    viable = np.asarray(viable, dtype=bool)
    if not viable.any():
        raise ValueError("viable mask is empty: burden denominator would be zero")
    cleaned = morphology(viable, "close", MorphKernel("square", close_k))
    cleaned = morphology(cleaned, "open", MorphKernel("square", open_k))
    if not cleaned.any():  # opening erased a speck-sized region; keep the input
        cleaned = viable
    hull = convex_hull_mask(fill_holes(cleaned))
    h, w = viable.shape
    tissue_bits = tissue.resample_nearest(w, h, map_downsample)
    tissue_bits = morphology(tissue_bits, "dilate", MorphKernel("square", tissue_dilate_k))
    return hull & tissue_bits


def tumor_burden(viable: np.ndarray, whole: np.ndarray, mpp: float,
                 map_downsample: float) -> BurdenResult:
    """Burden = area(viable within whole) / area(whole)."""
    viable = np.asarray(viable, dtype=bool)
    whole = np.asarray(whole, dtype=bool)
    if viable.shape != whole.shape:
        raise ValueError("masks are not congruent")
    n_whole = int(whole.sum())
    if n_whole == 0:
        raise ValueError("whole-tumour mask is empty")
    n_viable = int((viable & whole).sum())
    pitch = map_downsample * mpp / 1000.0
    return BurdenResult(viable, whole, n_viable * pitch * pitch,
                        n_whole * pitch * pitch, n_viable / n_whole)
