"""Prediction uncertainty maps.

Aleatoric: per-pixel population variance of a scorer's outputs over a set of
invertible geometric test-time augmentations, each output mapped back through
the inverse transform, stitched exactly like probabilities. Epistemic:
per-pixel population variance across ensemble member maps. Combined: mean of
the member aleatoric maps plus the epistemic map.

Caveat: a coordinate-keyed scorer (the annotation oracle) returns the same
window for every augmentation, so its aleatoric map measures window asymmetry
rather than model noise; content-driven scorers get true TTA variance. Patch
borders bias aleatoric values high (lost context); no correction is applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .inference import (InferenceConfig, MapAccumulator, ProbabilityMap,
                        block_average, _patch_validity, iter_batches,
                        read_patches, _ordered_parallel)
from .preproc import TissueMask
from .pyramid import SlidePyramid
from .sampler import AugmentSpec, TTA_DEFAULT, augment_geometric, invert_geometric
from .sampler import build_grid
from .scorer import PatchBatch

MAX_VARIANCE = 0.25  # a [0,1] variable cannot vary more

KINDS = ("aleatoric", "epistemic", "combined")


@dataclass
class UncertaintyMap:
    slide_id: str
    kind: str
    downsample: int
    width: int
    height: int
    values: np.ndarray
    coverage: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")
        if self.values.shape != (self.height, self.width):
            raise ValueError("plane dims do not match declared size")

    def as_probability_map(self) -> ProbabilityMap:
        """Variance values fit the probability-map container (<= 0.25)."""
        return ProbabilityMap(self.slide_id, self.downsample, self.width,
                              self.height, self.values, self.coverage)


def _check_tta(tta_set: tuple[AugmentSpec, ...]) -> None:
    if not tta_set:
        raise ValueError("tta_set must not be empty")
    for spec in tta_set:
        if not spec.is_geometric:
            raise ValueError("tta_set may only contain flip/rot90 transforms")
    if not any(s.flips == "none" and s.rot90 == 0 for s in tta_set):
        raise ValueError("tta_set must include the identity transform")


def aleatoric_map(pyramid: SlidePyramid, mask: TissueMask, scorer,
                  cfg: InferenceConfig,
                  tta_set: tuple[AugmentSpec, ...] = TTA_DEFAULT,
                  workers: int = 1,
                  progress: Callable[[int, int], None] | None = None,
                  ) -> UncertaintyMap:
    """Stitch the per-pixel TTA variance of a single scorer."""
    _check_tta(tta_set)
    d = cfg.resolve_downsample(pyramid.width, pyramid.height)
    grid = build_grid(mask, cfg.patch_size, cfg.stride,
                      slide_dims=(pyramid.width, pyramid.height))
    mw = (pyramid.width + d - 1) // d
    mh = (pyramid.height + d - 1) // d
    acc = MapAccumulator(mw, mh)
    batches = list(iter_batches(grid, cfg.batch_size))

    def score_batch(centres: np.ndarray):
        batch, coords = read_patches(pyramid, centres, cfg.patch_size)
        stacks = []
        for spec in tta_set:
            pixels = np.stack([augment_geometric(batch.pixels[i], spec)
                               for i in range(batch.n)])
            probs = scorer.score(PatchBatch.from_array(pixels), coords)
            aligned = np.stack([invert_geometric(spec, probs.probs[i])
                                for i in range(batch.n)])
            stacks.append(np.asarray(aligned, dtype=np.float64))
        stack = np.stack(stacks)
        # shift by the first pass: identical outputs then variance to an
        # exact 0 instead of pairwise-summation dust
        variance = np.var(stack - stack[0], axis=0)  # population, over transforms
        blocks = []
        for i, (x0, y0) in enumerate(coords):
            valid = _patch_validity(x0, y0, cfg.patch_size,
                                    pyramid.width, pyramid.height)
            vals, ok = block_average(variance[i], d, valid)
            blocks.append((x0 // d, y0 // d, vals, ok))
        return blocks

    done = 0
    for blocks in _ordered_parallel(score_batch, batches, workers):
        for mx0, my0, vals, ok in blocks:
            acc.add_patch(mx0, my0, vals, ok)
        done += 1
        if progress:
            progress(done, len(batches))

    pmap = acc.to_map(pyramid.slide_id, d)
    return UncertaintyMap(pyramid.slide_id, "aleatoric", d, mw, mh,
                          pmap.values, pmap.coverage)


def epistemic_map(member_maps: list[ProbabilityMap]) -> UncertaintyMap:
    """Per-pixel population variance across ensemble members, defined where
    every member has coverage."""
    if len(member_maps) < 2:
        raise ValueError("epistemic variance needs at least two members")
    first = member_maps[0]
    for m in member_maps[1:]:
        if (m.width, m.height, m.downsample) != (first.width, first.height,
                                                 first.downsample):
            raise ValueError("member maps are not congruent")
    covered = np.ones((first.height, first.width), dtype=bool)
    for m in member_maps:
        covered &= m.coverage > 0
    stack = np.stack([m.values for m in member_maps])
    # identical members must give an exact 0 (see aleatoric_map)
    values = np.where(covered, np.var(stack - stack[0], axis=0), 0.0)
    return UncertaintyMap(first.slide_id, "epistemic", first.downsample,
                          first.width, first.height, values,
                          covered.astype(np.uint32))


def combined_map(aleatoric_members: list[UncertaintyMap],
                 epistemic: UncertaintyMap) -> UncertaintyMap:
    """Mean of member aleatoric maps plus the epistemic map."""
    if not aleatoric_members:
        raise ValueError("need at least one aleatoric map")
    shape = (epistemic.height, epistemic.width)
    for m in aleatoric_members:
        if m.values.shape != shape:
            raise ValueError("maps are not congruent")
    mean_al = np.mean(np.stack([m.values for m in aleatoric_members]), axis=0)
    covered = epistemic.coverage > 0
    for m in aleatoric_members:
        covered = covered & (m.coverage > 0)
    values = np.where(covered, mean_al + epistemic.values, 0.0)
    return UncertaintyMap(epistemic.slide_id, "combined", epistemic.downsample,
                          epistemic.width, epistemic.height, values,
                          covered.astype(np.uint32))
