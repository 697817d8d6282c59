#!/usr/bin/env python3
"""Run the whole analysis pipeline on one synthetic slide and print a summary.

    python scripts/run_demo_pipeline.py --size 1024 --blobs 3 --out demo_out
"""

from __future__ import annotations

import argparse
from pathlib import Path

from wsikit.analysis import extract_features, regions_of, tumor_burden, whole_tumor_approx
from wsikit.inference import InferenceConfig, run_segmentation, save_map, threshold_map
from wsikit.metrics import dice, jaccard
from wsikit.preproc import tissue_mask
from wsikit.pyramid import build_pyramid
from wsikit.sampler import TTA_DEFAULT
from wsikit.scorer import BlobbyScorer, EnsembleHandle, OracleScorer
from wsikit.staging import classify_rule
from wsikit.synthetic import make_synthetic_slide
from wsikit.uncertainty import aleatoric_map, epistemic_map


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=1024)
    parser.add_argument("--blobs", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--sigma", type=float, default=0.1,
                        help="oracle corruption noise")
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()

    image, annotation = make_synthetic_slide(args.size, args.blobs, args.seed)
    pyr = build_pyramid(image, 512, (0.25, 0.25), slide_id="demo")
    mask = tissue_mask(pyr)
    print(f"tissue mask: level {mask.level}, {int(mask.bits.sum())} px")

    members = [OracleScorer(annotation, sigma=args.sigma, seed=1),
               OracleScorer(annotation, sigma=args.sigma, seed=2),
               BlobbyScorer(seed=3)]
    cfg = InferenceConfig(patch_size=256, stride=128, batch_size=8,
                          heatmap_downsample=1)
    member_maps, heat = run_segmentation(pyr, mask, EnsembleHandle(members), cfg)
    seg = threshold_map(heat, cfg.threshold)
    print(f"segmentation vs annotation: dice {dice(seg, annotation):.4f} "
          f"jaccard {jaccard(seg, annotation):.4f}")

    alea = aleatoric_map(pyr, mask, members[0], cfg, TTA_DEFAULT)
    epis = epistemic_map(member_maps)
    print(f"uncertainty: aleatoric max {alea.values.max():.4f}, "
          f"epistemic max {epis.values.max():.4f}")

    features = extract_features(heat, mask, pyr.mpp)
    label = classify_rule(regions_of(threshold_map(heat, 0.9), heat.values,
                                     pyr.mpp, heat.downsample))
    print(f"metastasis type (rule-based): {label.name}")
    for name, value in list(features.as_dict().items())[:5]:
        print(f"  {name}: {value:.5f}")

    if seg.any():
        whole = whole_tumor_approx(seg, mask, heat.downsample)
        burden = tumor_burden(seg, whole, pyr.mpp, heat.downsample)
        print(f"tumour burden: {burden.burden:.4f} "
              f"({burden.viable_area_mm2:.4f} / {burden.whole_area_mm2:.4f} mm^2)")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_map(heat, args.out / "heatmap")
        save_map(alea.as_probability_map(), args.out / "aleatoric", kind="aleatoric")
        save_map(epis.as_probability_map(), args.out / "epistemic", kind="epistemic")
        print(f"maps written to {args.out}")


if __name__ == "__main__":
    main()
