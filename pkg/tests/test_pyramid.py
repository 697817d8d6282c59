from __future__ import annotations

import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsikit.pyramid import (RegionRequest, build_pyramid, downsample_2x,
                            list_slides, open_pyramid, write_pyramid)


def downsample_oracle(image: np.ndarray) -> np.ndarray:
    """Naive per-output-pixel 2x2 area average with round-half-up, averaging
    only the in-image pixels."""
    h, w = image.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((oh, ow, image.shape[2]), dtype=np.uint8)
    for y in range(oh):
        for x in range(ow):
            block = image[2 * y:2 * y + 2, 2 * x:2 * x + 2].astype(int)
            n = block.shape[0] * block.shape[1]
            out[y, x] = (block.sum(axis=(0, 1)) * 2 + n) // (2 * n)
    return out


def random_image(rng, h, w):
    return rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)


def test_level_dims_1024_tile_512(rng):
    pyr = build_pyramid(random_image(rng, 1024, 1024), 512, (0.25, 0.25))
    assert [(l.width, l.height) for l in pyr.levels] == [(1024, 1024), (512, 512)]


def test_level_dims_5000_tile_512(rng):
    pyr = build_pyramid(random_image(rng, 5000, 5000), 512, (0.25, 0.25))
    # ceil-division oracle per level
    dims, expect = 5000, []
    for _ in pyr.levels:
        expect.append(dims)
        dims = (dims + 1) // 2
    assert len(pyr.levels) == 5
    assert [l.width for l in pyr.levels] == expect
    assert pyr.levels[3].width == pyr.levels[3].height == 625


def test_constant_colour_invariance():
    img = np.full((700, 500, 3), (12, 200, 77), dtype=np.uint8)
    pyr = build_pyramid(img, 128, (0.5, 0.5))
    for info in pyr.levels:
        level = pyr.read_full_level(info.level)
        assert (level == (12, 200, 77)).all()


def test_build_errors(rng):
    with pytest.raises(ValueError):
        build_pyramid(np.empty((0, 0, 3), dtype=np.uint8), 256, (0.25, 0.25))
    with pytest.raises(ValueError):
        build_pyramid(random_image(rng, 32, 32), 300, (0.25, 0.25))
    with pytest.raises(ValueError):
        build_pyramid(random_image(rng, 32, 32), 64, (0.25, 0.25))


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), seed=st.integers(0, 2 ** 31))
def test_roundtrip_property(h, w, seed):
    img = random_image(np.random.default_rng(seed), h, w)
    pyr = build_pyramid(img, 128, (0.25, 0.25))
    assert (pyr.read_full_level(0) == img).all()


def test_downsample_matches_oracle(rng):
    for h, w in [(10, 10), (11, 13), (1, 7), (64, 33)]:
        img = random_image(rng, h, w)
        assert (downsample_2x(img) == downsample_oracle(img)).all()


def test_read_region_identity(rng):
    img = random_image(rng, 300, 400)
    pyr = build_pyramid(img, 256, (0.25, 0.25))
    out = pyr.read_region(RegionRequest(0, 0, 0, 400, 300))
    assert (out == img).all()


def test_read_region_edge_padding(rng):
    img = random_image(rng, 256, 256)
    pyr = build_pyramid(img, 256, (0.25, 0.25), background=(1, 2, 3))
    out = pyr.read_region(RegionRequest(0, 200, 10, 100, 20))
    assert (out[:, :56] == img[10:30, 200:256]).all()
    assert (out[:, 56:] == (1, 2, 3)).all()
    neg = pyr.read_region(RegionRequest(0, -5, -5, 10, 10))
    assert (neg[:5, :5] == (1, 2, 3)).all()
    assert (neg[5:, 5:] == img[:5, :5]).all()


def test_level1_region_equals_downsample_oracle(rng):
    img = random_image(rng, 512, 512)
    pyr = build_pyramid(img, 256, (0.25, 0.25))
    got = pyr.read_region(RegionRequest(1, 0, 0, 256, 256))
    assert (got == downsample_oracle(img[:512, :512])).all()


def test_deeper_levels_within_one_of_direct_average(rng):
    img = random_image(rng, 512, 512)
    pyr = build_pyramid(img, 128, (0.25, 0.25))
    level = 2
    got = pyr.read_full_level(level).astype(int)
    f = 1 << level
    direct = img.reshape(512 // f, f, 512 // f, f, 3).astype(float).mean(axis=(1, 3))
    assert np.abs(got - direct).max() <= 1.0 + 1e-9


def test_unknown_level(rng):
    pyr = build_pyramid(random_image(rng, 64, 64), 128, (0.25, 0.25))
    with pytest.raises(ValueError, match="unknown level"):
        pyr.read_region(RegionRequest(3, 0, 0, 8, 8))


def test_repeated_reads_bit_identical(rng, tmp_path):
    img = random_image(rng, 300, 300)
    write_pyramid(build_pyramid(img, 128, (0.25, 0.25)), tmp_path / "s")
    pyr = open_pyramid(tmp_path / "s")
    req = RegionRequest(0, 17, 40, 200, 100)
    assert (pyr.read_region(req) == pyr.read_region(req)).all()


def test_cache_transparency(rng, tmp_path):
    img = random_image(rng, 300, 300)
    write_pyramid(build_pyramid(img, 128, (0.25, 0.25)), tmp_path / "s")
    cached = open_pyramid(tmp_path / "s", cache_tiles=64)
    uncached = open_pyramid(tmp_path / "s", cache_tiles=0)
    for req in [RegionRequest(0, 0, 0, 300, 300), RegionRequest(1, 13, 9, 80, 70)]:
        assert (cached.read_region(req) == uncached.read_region(req)).all()


def test_concurrent_reads_consistent(rng, tmp_path):
    img = random_image(rng, 256, 256)
    write_pyramid(build_pyramid(img, 128, (0.25, 0.25)), tmp_path / "s")
    pyr = open_pyramid(tmp_path / "s", cache_tiles=2)
    results = [None] * 8

    def worker(i):
        results[i] = pyr.read_region(RegionRequest(0, 0, 0, 256, 256))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results:
        assert (r == img).all()


def test_manifest_schema(rng, tmp_path):
    pyr = build_pyramid(random_image(rng, 48, 64), 128, (0.25, 0.5), slide_id="m")
    write_pyramid(pyr, tmp_path / "m")
    meta = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert set(meta) == {"slide_id", "mpp_x", "mpp_y", "tile_size", "levels",
                         "background"}
    assert meta["levels"][0] == {"level": 0, "width": 64, "height": 48}
    assert meta["background"] == [255, 255, 255]


def test_list_slides(rng, tmp_path, caplog):
    assert list_slides(tmp_path) == []
    for name in ("b", "a"):
        write_pyramid(build_pyramid(random_image(rng, 32, 32), 128, (0.25, 0.25),
                                    slide_id=name), tmp_path / name)
    corrupt = tmp_path / "c"
    corrupt.mkdir()
    (corrupt / "manifest.json").write_text("{not json")
    with caplog.at_level("WARNING"):
        slides = list_slides(tmp_path)
    assert [s.slide_id for s in slides] == ["a", "b"]
    assert any("skipping unreadable slide" in r.message for r in caplog.records)
    # only one level deep
    deep = tmp_path / "a" / "nested"
    deep.mkdir()
    write_pyramid(build_pyramid(random_image(rng, 16, 16), 128, (0.25, 0.25),
                                slide_id="deep"), deep)
    assert [s.slide_id for s in list_slides(tmp_path)] == ["a", "b"]
