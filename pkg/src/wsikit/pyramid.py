"""Pyramidal slide storage: build, read, persist.

A slide is a multi-resolution RGB pyramid. Level 0 is full resolution and
level L halves each axis (dims = ceil(level0 / 2^L)). On disk a slide is a
directory with ``manifest.json`` and ``level_{L}/{x}_{y}.png`` tiles (x, y in
tile units); tiles are full ``tile_size`` squares, padded with the background
colour beyond the slide edge. Pyramids built in memory expose the identical
read API, so everything downstream is storage-agnostic.
"""

from __future__ import annotations

import io
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DEFAULT_BACKGROUND = (255, 255, 255)


@dataclass(frozen=True)
class LevelInfo:
    level: int
    width: int
    height: int

    @property
    def downsample(self) -> int:
        return 2 ** self.level


@dataclass(frozen=True)
class RegionRequest:
    """Region read: x, y are level-0 coords of the top-left; width/height are
    pixels at the requested level."""

    level: int
    x: int
    y: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("region width/height must be positive")


def _round_half_up_quarter(s: np.ndarray) -> np.ndarray:
    # s is a sum of four uint values; mean with round-half-up = (s + 2) // 4
    return (s + 2) >> 2


def downsample_2x(image: np.ndarray) -> np.ndarray:
    """Area-average 2x downsample with round-half-up, odd edges edge-replicated
    (equivalent to averaging the in-image pixels of each 2x2 block)."""
    h, w = image.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    pad_h, pad_w = oh * 2 - h, ow * 2 - w
    if pad_h or pad_w:
        pad = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad, mode="edge")
    s = image.astype(np.uint32)
    s = s[0::2] + s[1::2]
    s = s[:, 0::2] + s[:, 1::2]
    return _round_half_up_quarter(s).astype(np.uint8)


def level_count_for(width: int, height: int, tile_size: int) -> int:
    """Smallest L with max dim <= tile_size * 2^L, plus one; minimum 1."""
    n = 1
    m = max(width, height)
    cap = tile_size
    while m > cap:
        cap *= 2
        n += 1
    return n


class _MemorySource:
    """Backing store holding every level as one array."""

    def __init__(self, levels: list[np.ndarray]):
        self.levels = levels

    def read(self, level: int, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        return self.levels[level][y0:y1, x0:x1]


class _DirectorySource:
    """Backing store reading PNG tiles, with a synchronized LRU tile cache."""

    def __init__(self, root: Path, tile_size: int, levels: list[LevelInfo],
                 background: tuple[int, int, int], cache_tiles: int = 256):
        self.root = root
        self.tile_size = tile_size
        self.levels = levels
        self.background = background
        self.cache_tiles = cache_tiles
        self._cache: OrderedDict[tuple[int, int, int], np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def _load_tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        key = (level, tx, ty)
        if self.cache_tiles > 0:
            with self._lock:
                if key in self._cache:
                    self._cache.move_to_end(key)
                    return self._cache[key]
        path = self.root / f"level_{level}" / f"{tx}_{ty}.png"
        with Image.open(path) as im:
            tile = np.asarray(im.convert("RGB"))
        if self.cache_tiles > 0:
            with self._lock:
                self._cache[key] = tile
                while len(self._cache) > self.cache_tiles:
                    self._cache.popitem(last=False)
        return tile

    def read(self, level: int, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
        ts = self.tile_size
        out = np.empty((y1 - y0, x1 - x0, 3), dtype=np.uint8)
        for ty in range(y0 // ts, (y1 - 1) // ts + 1):
            for tx in range(x0 // ts, (x1 - 1) // ts + 1):
                tile = self._load_tile(level, tx, ty)
                ax0, ay0 = max(x0, tx * ts), max(y0, ty * ts)
                ax1, ay1 = min(x1, (tx + 1) * ts), min(y1, (ty + 1) * ts)
                out[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] = \
                    tile[ay0 - ty * ts:ay1 - ty * ts, ax0 - tx * ts:ax1 - tx * ts]
        return out


@dataclass
class SlidePyramid:
    """Multi-resolution tiled RGB slide with physical pixel size metadata."""

    slide_id: str
    levels: list[LevelInfo]
    mpp_x: float
    mpp_y: float
    tile_size: int
    background: tuple[int, int, int] = DEFAULT_BACKGROUND
    source: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.mpp_x <= 0 or self.mpp_y <= 0:
            raise ValueError("mpp must be positive")

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    @property
    def mpp(self) -> float:
        """Geometric-mean microns/pixel, used for physical areas and lengths."""
        return float(np.sqrt(self.mpp_x * self.mpp_y))

    def level_info(self, level: int) -> LevelInfo:
        if not 0 <= level < len(self.levels):
            raise ValueError(f"unknown level {level} (slide has {len(self.levels)})")
        return self.levels[level]

    def best_level_for(self, max_dim: int) -> int:
        """Smallest level with both dims <= max_dim (last level if none)."""
        for info in self.levels:
            if info.width <= max_dim and info.height <= max_dim:
                return info.level
        return self.levels[-1].level

    def read_region(self, req: RegionRequest) -> np.ndarray:
        """Read a region; pixels outside the slide are background-filled."""
        info = self.level_info(req.level)
        scale = 1 << req.level
        xl, yl = req.x // scale, req.y // scale
        out = np.empty((req.height, req.width, 3), dtype=np.uint8)
        out[:] = np.asarray(self.background, dtype=np.uint8)
        x0, y0 = max(xl, 0), max(yl, 0)
        x1, y1 = min(xl + req.width, info.width), min(yl + req.height, info.height)
        if x0 < x1 and y0 < y1:
            out[y0 - yl:y1 - yl, x0 - xl:x1 - xl] = self.source.read(req.level, x0, y0, x1, y1)
        return out

    def read_full_level(self, level: int) -> np.ndarray:
        info = self.level_info(level)
        return self.read_region(RegionRequest(level, 0, 0, info.width, info.height))

    def tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        ts = self.tile_size
        scale = 1 << level
        return self.read_region(RegionRequest(level, tx * ts * scale, ty * ts * scale, ts, ts))

    def manifest(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "mpp_x": self.mpp_x,
            "mpp_y": self.mpp_y,
            "tile_size": self.tile_size,
            "levels": [
                {"level": li.level, "width": li.width, "height": li.height}
                for li in self.levels
            ],
            "background": list(self.background),
        }


def build_pyramid(image: np.ndarray, tile_size: int, mpp: tuple[float, float],
                  slide_id: str = "slide",
                  background: tuple[int, int, int] = DEFAULT_BACKGROUND) -> SlidePyramid:
    """Build an in-memory pyramid from a flat RGB image.

    Levels are produced by repeated 2x area-average downsampling until the
    top level fits a single tile.
    """
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3 or image.size == 0:
        raise ValueError("image must be a non-empty HxWx3 RGB raster")
    if tile_size < 128 or tile_size > 1024 or tile_size & (tile_size - 1):
        raise ValueError("tile_size must be a power of two in [128, 1024]")
    h, w = image.shape[:2]
    n_levels = level_count_for(w, h, tile_size)
    planes = [image]
    for _ in range(1, n_levels):
        planes.append(downsample_2x(planes[-1]))
    levels = [LevelInfo(i, p.shape[1], p.shape[0]) for i, p in enumerate(planes)]
    return SlidePyramid(slide_id, levels, float(mpp[0]), float(mpp[1]), tile_size,
                        tuple(background), _MemorySource(planes))


def to_png_bytes(array: np.ndarray) -> bytes:
    """Canonical PNG encoding used by storage, service and tests alike."""
    mode = {2: "L", 3: None}[array.ndim]
    im = Image.fromarray(array, mode=mode)
    buf = io.BytesIO()
    im.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_pyramid(pyr: SlidePyramid, out_dir: str | Path) -> Path:
    """Persist a pyramid as manifest + PNG tiles; returns the slide directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ts = pyr.tile_size
    for info in pyr.levels:
        level_dir = out / f"level_{info.level}"
        level_dir.mkdir(exist_ok=True)
        for ty in range((info.height + ts - 1) // ts):
            for tx in range((info.width + ts - 1) // ts):
                tile = pyr.tile(info.level, tx, ty)
                (level_dir / f"{tx}_{ty}.png").write_bytes(to_png_bytes(tile))
    (out / MANIFEST_NAME).write_text(json.dumps(pyr.manifest(), indent=2))
    return out


def open_pyramid(slide_dir: str | Path, cache_tiles: int = 256) -> SlidePyramid:
    """Open a slide directory written by :func:`write_pyramid`."""
    root = Path(slide_dir)
    meta = json.loads((root / MANIFEST_NAME).read_text())
    levels = [LevelInfo(d["level"], d["width"], d["height"]) for d in meta["levels"]]
    levels.sort(key=lambda li: li.level)
    if [li.level for li in levels] != list(range(len(levels))):
        raise ValueError(f"manifest levels must be contiguous from 0: {root}")
    background = tuple(int(c) for c in meta["background"])
    src = _DirectorySource(root, int(meta["tile_size"]), levels, background, cache_tiles)
    return SlidePyramid(str(meta["slide_id"]), levels, float(meta["mpp_x"]),
                        float(meta["mpp_y"]), int(meta["tile_size"]), background, src)


def list_slides(root: str | Path) -> list[SlidePyramid]:
    """All valid slides directly under root (one level deep), sorted by id.

    Unreadable manifests are logged per slide, never fatal.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"slide root not found: {root}")
    candidates = []
    if (root / MANIFEST_NAME).exists():
        candidates.append(root)
    candidates.extend(p for p in sorted(root.iterdir())
                      if p.is_dir() and (p / MANIFEST_NAME).exists())
    slides = []
    for path in candidates:
        try:
            slides.append(open_pyramid(path))
        except Exception as exc:  # noqa: BLE001 - per-slide reporting is the contract
            log.warning("skipping unreadable slide %s: %s", path, exc)
    slides.sort(key=lambda s: s.slide_id)
    return slides
