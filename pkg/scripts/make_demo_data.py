#!/usr/bin/env python3
"""Generate a demo slide root: synthetic pyramids, annotations, scorer specs.

    python scripts/make_demo_data.py demo_root --slides 3 --size 1024

Afterwards:

    wsikit serve demo_root --port 8008
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from wsikit.pyramid import build_pyramid, write_pyramid
from wsikit.synthetic import make_synthetic_slide


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=Path)
    parser.add_argument("--slides", type=int, default=3)
    parser.add_argument("--size", type=int, default=1024)
    parser.add_argument("--tile-size", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    args.root.mkdir(parents=True, exist_ok=True)
    for i in range(args.slides):
        slide_id = f"slide_{i:02d}"
        image, annotation = make_synthetic_slide(
            args.size, n_blobs=1 + i % 4, seed=args.seed + i)
        pyr = build_pyramid(image, args.tile_size, (0.25, 0.25),
                            slide_id=slide_id)
        write_pyramid(pyr, args.root / slide_id)
        ann_path = args.root / f"{slide_id}.annotation.npy"
        np.save(ann_path, annotation)
        specs = [
            {"kind": "oracle", "annotation": str(ann_path), "sigma": 0.05,
             "seed": 1},
            {"kind": "blobby", "seed": 2},
            {"kind": "constant", "value": 0.3},
        ]
        (args.root / f"{slide_id}.scorers.json").write_text(
            json.dumps(specs, indent=2))
        print(f"{slide_id}: {args.size}x{args.size}, "
              f"{int(annotation.sum())} annotated px")


if __name__ == "__main__":
    main()
