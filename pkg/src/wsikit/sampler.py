"""Patch coordinate machinery: inference grids, balanced training extraction,
augmentation, and stratified folds.

Coordinates are always level-0 pixels. A patch window for centre c is
[c - p//2, c - p//2 + p) per axis, so odd sizes put the extra pixel on the
right/bottom. Only coordinates are stored; pixels are read lazily.
"""

from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .preproc import TissueMask, hsv_to_rgb, rgb_to_hsv

log = logging.getLogger(__name__)

TUMOUR = "tumour"
NON_TUMOUR = "non_tumour"

MAX_BRIGHTNESS_DELTA = 64.0 / 255.0
MAX_CONTRAST_DELTA = 0.75
MAX_HUE_DELTA = 0.25
MAX_SATURATION_DELTA = 0.04
PERTURB_RADIUS_DEFAULT = 128


@dataclass(frozen=True)
class SampleGrid:
    slide_id: str
    centres: np.ndarray  # (n, 2) int64, columns (x, y), row-major by (y, x)
    patch_size: int
    stride: int

    def __len__(self) -> int:
        return len(self.centres)


@dataclass(frozen=True)
class LabelledCoord:
    slide_id: str
    centre: tuple[int, int]
    label: str
    fold: int = 0


def window_of(centre: tuple[int, int], patch_size: int) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) level-0 window of a centre-anchored patch."""
    cx, cy = centre
    half = patch_size // 2
    return cx - half, cy - half, cx - half + patch_size, cy - half + patch_size


def grid_positions(extent: int, patch_size: int, stride: int) -> np.ndarray:
    """Top-left coordinates k*stride while they intersect [0, extent)."""
    if stride <= 0 or patch_size <= 0:
        raise ValueError("stride and patch_size must be positive")
    n = (extent + stride - 1) // stride
    return np.arange(n, dtype=np.int64) * stride


def build_grid(mask: TissueMask, patch_size: int, stride: int,
               slide_dims: tuple[int, int] | None = None) -> SampleGrid:
    """Uniform grid of patch centres restricted to tissue.

    A grid point survives iff its patch footprint overlaps at least one tissue
    mask pixel. `slide_dims` gives exact level-0 (width, height); defaults to
    the mask extent scaled back up.
    """
    if slide_dims is None:
        slide_dims = (mask.width * mask.downsample, mask.height * mask.downsample)
    w0, h0 = slide_dims
    xs = grid_positions(w0, patch_size, stride)
    ys = grid_positions(h0, patch_size, stride)
    if not mask.bits.any():
        return SampleGrid(mask.slide_id, np.empty((0, 2), dtype=np.int64), patch_size, stride)

    dm = mask.downsample
    integ = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask.bits, axis=0), axis=1, out=integ[1:, 1:])

    def axis_bounds(tops: np.ndarray, extent: int) -> tuple[np.ndarray, np.ndarray]:
        lo = np.clip(tops // dm, 0, extent)
        hi = np.clip((tops + patch_size - 1) // dm + 1, 0, extent)
        return lo, hi

    x0, x1 = axis_bounds(xs, mask.width)
    y0, y1 = axis_bounds(ys, mask.height)
    sums = (integ[np.ix_(y1, x1)] - integ[np.ix_(y0, x1)]
            - integ[np.ix_(y1, x0)] + integ[np.ix_(y0, x0)])
    keep_y, keep_x = np.nonzero(sums > 0)
    half = patch_size // 2
    centres = np.stack([xs[keep_x] + half, ys[keep_y] + half], axis=1)
    return SampleGrid(mask.slide_id, centres, patch_size, stride)


def label_patch(annotation: np.ndarray, centre: tuple[int, int], patch_size: int) -> str:
    """Tumour iff the patch window contains at least one annotated pixel."""
    h, w = annotation.shape
    x0, y0, x1, y1 = window_of(centre, patch_size)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w), min(y1, h)
    if x0 >= x1 or y0 >= y1:
        return NON_TUMOUR
    return TUMOUR if annotation[y0:y1, x0:x1].any() else NON_TUMOUR


def _centre_window_dilate(plane: np.ndarray, patch_size: int) -> np.ndarray:
    """Mask of centres whose patch window intersects `plane` (separable box OR)."""
    # window [c-p//2, c-p//2+p) contains a iff c in [a - (p - p//2) + 1, a + p//2]
    half = patch_size // 2
    offsets = range(-(patch_size - half) + 1, half + 1)

    def pass_axis(bits: np.ndarray, axis: int) -> np.ndarray:
        out = np.zeros_like(bits)
        n = bits.shape[axis]
        for o in offsets:
            src = slice(max(-o, 0), min(n - o, n))
            dst = slice(max(o, 0), min(n + o, n))
            sl_src = (src, slice(None)) if axis == 0 else (slice(None), src)
            sl_dst = (dst, slice(None)) if axis == 0 else (slice(None), dst)
            if src.stop > src.start:
                out[sl_dst] |= bits[sl_src]
        return out

    return pass_axis(pass_axis(np.asarray(plane, dtype=bool), 0), 1)


def _slide_rng(seed: int, label: str, slide_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(label.encode()),
                                  zlib.crc32(slide_id.encode())])


def sample_training_set(slides: list[tuple[str, np.ndarray, TissueMask]],
                        patch_size: int, per_class_count: int,
                        seed: int) -> list[LabelledCoord]:
    """Draw an equal number of tumour / non-tumour patch centres.

    Eligible tumour centres are exactly those whose window touches the
    annotation; negatives must touch tissue but no annotation. Draws are
    i.i.d. uniform over each class pool (so a scarce class repeats):
    per-slide quotas come from a multinomial over pool sizes, then per-slide
    positions use generators keyed by (seed, label, slide_id), so the result
    is a pure function of the seed no matter how slides are parallelized.
    """
    pools: dict[str, list[tuple[str, np.ndarray, int]]] = {TUMOUR: [], NON_TUMOUR: []}
    for slide_id, annotation, tmask in slides:
        annotation = np.asarray(annotation, dtype=bool)
        h, w = annotation.shape
        tumour_ok = _centre_window_dilate(annotation, patch_size)
        tissue_l0 = tmask.resample_nearest(w, h, 1.0)
        tissue_ok = _centre_window_dilate(tissue_l0, patch_size)
        pools[TUMOUR].append((slide_id, np.flatnonzero(tumour_ok), w))
        pools[NON_TUMOUR].append((slide_id, np.flatnonzero(~tumour_ok & tissue_ok), w))

    out: list[LabelledCoord] = []
    for label in (TUMOUR, NON_TUMOUR):
        entries = pools[label]
        counts = np.array([len(flat) for _, flat, _ in entries], dtype=np.int64)
        total = int(counts.sum())
        if per_class_count > 0 and total == 0:
            raise ValueError(f"no eligible {label} centres in any slide")
        if per_class_count == 0:
            continue
        quota_rng = np.random.default_rng([seed, zlib.crc32(label.encode())])
        quotas = quota_rng.multinomial(per_class_count, counts / total)
        for (slide_id, flat, w), quota in zip(entries, quotas):
            if quota == 0:
                continue
            rng = _slide_rng(seed, label, slide_id)
            for pos in flat[rng.integers(len(flat), size=quota)]:
                out.append(LabelledCoord(slide_id, (int(pos) % w, int(pos) // w),
                                         label))
    return out


def perturb(centre: tuple[int, int], radius: int, rng: np.random.Generator,
            bounds: tuple[int, int]) -> tuple[int, int]:
    """Offset a centre uniformly within a closed Euclidean disk, clamped to
    slide bounds."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        dx = dy = 0.0
    else:
        while True:
            dx, dy = rng.uniform(-radius, radius, size=2)
            if dx * dx + dy * dy <= radius * radius:
                break
    w, h = bounds
    x = min(max(int(round(centre[0] + dx)), 0), w - 1)
    y = min(max(int(round(centre[1] + dy)), 0), h - 1)
    return x, y


@dataclass(frozen=True)
class AugmentSpec:
    """One concrete augmentation; deltas are stored explicitly so applying a
    spec is deterministic. `seed` records the draw that produced it."""

    flips: str = "none"  # none | h | v
    rot90: int = 0
    gaussian_blur: bool = False
    brightness_delta: float = 0.0
    contrast_delta: float = 0.0
    hue_delta: float = 0.0
    saturation_delta: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.flips not in ("none", "h", "v"):
            raise ValueError(f"unknown flip {self.flips!r}")
        if not 0 <= self.rot90 <= 3:
            raise ValueError("rot90 must be in 0..3")
        limits = [(self.brightness_delta, MAX_BRIGHTNESS_DELTA, "brightness"),
                  (self.contrast_delta, MAX_CONTRAST_DELTA, "contrast"),
                  (self.hue_delta, MAX_HUE_DELTA, "hue"),
                  (self.saturation_delta, MAX_SATURATION_DELTA, "saturation")]
        for value, cap, name in limits:
            if abs(value) > cap + 1e-12:
                raise ValueError(f"{name} delta {value} exceeds +/-{cap}")

    @property
    def is_geometric(self) -> bool:
        return (not self.gaussian_blur and self.brightness_delta == 0
                and self.contrast_delta == 0 and self.hue_delta == 0
                and self.saturation_delta == 0)

    def geometric_only(self) -> "AugmentSpec":
        return AugmentSpec(flips=self.flips, rot90=self.rot90, seed=self.seed)

    @classmethod
    def random(cls, rng: np.random.Generator, geometric_only: bool = False,
               seed: int = 0) -> "AugmentSpec":
        flips = ("none", "h", "v")[rng.integers(3)]
        k = int(rng.integers(4))
        if geometric_only:
            return cls(flips=flips, rot90=k, seed=seed)
        return cls(
            flips=flips, rot90=k, gaussian_blur=bool(rng.integers(2)),
            brightness_delta=float(rng.uniform(-1, 1) * MAX_BRIGHTNESS_DELTA),
            contrast_delta=float(rng.uniform(-1, 1) * MAX_CONTRAST_DELTA),
            hue_delta=float(rng.uniform(-1, 1) * MAX_HUE_DELTA),
            saturation_delta=float(rng.uniform(-1, 1) * MAX_SATURATION_DELTA),
            seed=seed,
        )


# The 6-member test-time set: identity, the three rotations, both flips.
TTA_DEFAULT: tuple[AugmentSpec, ...] = (
    AugmentSpec(),
    AugmentSpec(rot90=1),
    AugmentSpec(rot90=2),
    AugmentSpec(rot90=3),
    AugmentSpec(flips="h"),
    AugmentSpec(flips="v"),
)


def augment_geometric(patch: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Exact pixel permutation: rot90 then flip."""
    out = np.rot90(patch, k=spec.rot90)
    if spec.flips == "h":
        out = out[:, ::-1]
    elif spec.flips == "v":
        out = out[::-1]
    return np.ascontiguousarray(out)


def invert_geometric(spec: AugmentSpec, plane: np.ndarray) -> np.ndarray:
    """Undo augment_geometric; spec must be purely geometric."""
    if not spec.is_geometric:
        raise ValueError("only flip/rot90 specs are invertible")
    out = np.asarray(plane)
    if spec.flips == "h":
        out = out[:, ::-1]
    elif spec.flips == "v":
        out = out[::-1]
    return np.ascontiguousarray(np.rot90(out, k=-spec.rot90))


def augment(patch: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Apply a spec to an RGB patch: geometry first, then colour, then blur.

    Colour maths runs in [0, 1] floats and clamps back to uint8.
    """
    out = augment_geometric(patch, spec)
    if spec.is_geometric:
        return out
    x = out.astype(np.float64) / 255.0
    if spec.brightness_delta:
        x = x + spec.brightness_delta
    if spec.contrast_delta:
        mean = x.mean(axis=(0, 1), keepdims=True)
        x = (x - mean) * (1.0 + spec.contrast_delta) + mean
    if spec.hue_delta or spec.saturation_delta:
        hsv = rgb_to_hsv(np.clip(x, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + spec.hue_delta * 360.0, 360.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + spec.saturation_delta), 0.0, 1.0)
        x = hsv_to_rgb(hsv)
    if spec.gaussian_blur:
        x = np.stack([ndimage.gaussian_filter(x[..., c], sigma=1.0, mode="nearest")
                      for c in range(x.shape[2])], axis=-1)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def stratified_folds(slides: list[tuple[str, bool]], k: int, seed: int) -> dict[str, int]:
    """Assign folds so per-stratum counts differ by at most one."""
    if k < 2:
        raise ValueError("need k >= 2 folds")
    by_stratum: dict[bool, list[str]] = {True: [], False: []}
    for slide_id, has_tumour in slides:
        by_stratum[bool(has_tumour)].append(slide_id)
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    for has_tumour in (True, False):
        ids = sorted(by_stratum[has_tumour])
        if not ids:
            continue
        if k > len(ids):
            log.warning("stratum has_tumour=%s has %d slides for %d folds",
                        has_tumour, len(ids), k)
        order = rng.permutation(len(ids))
        for i, pos in enumerate(order):
            assignment[ids[pos]] = i % k
    return assignment


def save_coords(coords: list[LabelledCoord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y", "label", "fold"])
        for c in coords:
            writer.writerow([c.slide_id, c.centre[0], c.centre[1], c.label, c.fold])


def load_coords(path: str | Path) -> list[LabelledCoord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LabelledCoord(r["slide_id"], (int(r["x"]), int(r["y"])),
                          r["label"], int(r["fold"])) for r in rows]


def assign_folds(coords: list[LabelledCoord], folds: dict[str, int]) -> list[LabelledCoord]:
    return [replace(c, fold=folds.get(c.slide_id, 0)) for c in coords]


def save_grid(grid: SampleGrid, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y"])
        for x, y in grid.centres:
            writer.writerow([grid.slide_id, int(x), int(y)])
    path.with_suffix(".json").write_text(json.dumps(
        {"slide_id": grid.slide_id, "patch_size": grid.patch_size, "stride": grid.stride}))
