#!/usr/bin/env python3
"""Benchmark overlap-stitch throughput across patch/stride/worker configs.

    python scripts/bench_stitching.py --size 2048 --workers 1 2 4
"""

from __future__ import annotations

import argparse
import time

from wsikit.inference import InferenceConfig, run_segmentation
from wsikit.pyramid import build_pyramid
from wsikit.sampler import build_grid
from wsikit.scorer import BlobbyScorer, EnsembleHandle
from wsikit.synthetic import make_synthetic_slide
from wsikit.preproc import tissue_mask


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=2048)
    parser.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4])
    parser.add_argument("--downsample", type=int, default=8)
    args = parser.parse_args()

    image, _ = make_synthetic_slide(args.size, 3, seed=0)
    pyr = build_pyramid(image, 512, (0.25, 0.25), slide_id="bench")
    mask = tissue_mask(pyr)
    configs = [(256, 256), (256, 128), (1024, 1024), (1024, 512)]

    print(f"{'patch':>6} {'stride':>6} {'workers':>7} {'patches':>8} "
          f"{'seconds':>8} {'Mpx/s':>8}")
    for patch, stride in configs:
        for workers in args.workers:
            cfg = InferenceConfig(patch_size=patch, stride=stride,
                                  batch_size=8,
                                  heatmap_downsample=min(args.downsample, stride))
            ens = EnsembleHandle([BlobbyScorer(seed=1)])
            n_patches = len(build_grid(mask, patch, stride,
                                       slide_dims=(pyr.width, pyr.height)))
            start = time.perf_counter()
            run_segmentation(pyr, mask, ens, cfg, workers=workers)
            elapsed = time.perf_counter() - start
            mpx = n_patches * patch * patch / elapsed / 1e6
            print(f"{patch:>6} {stride:>6} {workers:>7} {n_patches:>8} "
                  f"{elapsed:>8.2f} {mpx:>8.1f}")


if __name__ == "__main__":
    main()
