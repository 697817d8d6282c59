"""Command-line interface: one verb per pipeline stage.

Global flags (--seed, --threads, --config) sit on the group; --config points
at a JSON file whose keys become defaults for segmentation/uncertainty jobs.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import analysis, metrics, preproc, pyramid, sampler, staging
from .inference import (InferenceConfig, run_segmentation, save_map,
                        threshold_map)
from .pyramid import open_pyramid, write_pyramid
from .sampler import TTA_DEFAULT
from .scorer import EnsembleHandle, load_annotation
from .uncertainty import aleatoric_map, combined_map, epistemic_map


@click.group()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file with default job options")
@click.pass_context
def main(ctx: click.Context, seed: int, threads: int, config_path: str | None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"seed": seed, "threads": threads,
               "config": json.loads(Path(config_path).read_text()) if config_path else {}}


@main.group("pyramid")
def pyramid_group() -> None:
    """Slide pyramid storage."""


@pyramid_group.command("build")
@click.argument("image", type=click.Path(exists=True))
@click.option("--tile-size", type=int, default=512, show_default=True)
@click.option("--mpp", type=float, default=0.25, show_default=True,
              help="microns per level-0 pixel (both axes)")
@click.option("--slide-id", default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def pyramid_build(image: str, tile_size: int, mpp: float, slide_id: str | None,
                  out_dir: str) -> None:
    with Image.open(image) as im:
        raster = np.asarray(im.convert("RGB"))
    sid = slide_id or Path(image).stem
    pyr = pyramid.build_pyramid(raster, tile_size, (mpp, mpp), slide_id=sid)
    write_pyramid(pyr, out_dir)
    click.echo(f"wrote {sid}: {len(pyr.levels)} levels to {out_dir}")


@main.command("mask")
@click.argument("slide_dir", type=click.Path(exists=True))
@click.option("--level", default="auto", show_default=True)
@click.option("--black-fix", is_flag=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def mask_cmd(slide_dir: str, level: str, black_fix: bool, out_path: str) -> None:
    pyr = open_pyramid(slide_dir)
    lvl = None if level == "auto" else int(level)
    mask = preproc.tissue_mask(pyr, lvl, black_fix=black_fix)
    preproc.save_mask(mask, out_path)
    click.echo(f"mask level {mask.level}: {int(mask.bits.sum())} tissue px")


@main.command("grid")
@click.argument("slide_dir", type=click.Path(exists=True))
@click.option("--mask", "mask_path", type=click.Path(exists=True), required=True)
@click.option("--patch", type=int, default=1024, show_default=True)
@click.option("--stride", type=int, default=512, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def grid_cmd(slide_dir: str, mask_path: str, patch: int, stride: int,
             out_path: str) -> None:
    pyr = open_pyramid(slide_dir)
    mask = preproc.load_mask(mask_path)
    grid = sampler.build_grid(mask, patch, stride, slide_dims=(pyr.width, pyr.height))
    sampler.save_grid(grid, out_path)
    click.echo(f"{len(grid)} centres")


@main.command("sample")
@click.option("--slide", "slides", type=click.Path(exists=True), multiple=True,
              required=True, help="slide directory (repeatable)")
@click.option("--annotation", "annotations", type=click.Path(exists=True),
              multiple=True, required=True, help="level-0 annotation per slide")
@click.option("--patch", type=int, default=256, show_default=True)
@click.option("--per-class", type=int, required=True)
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=None, help="override the global seed")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
def sample_cmd(ctx: click.Context, slides: tuple[str, ...],
               annotations: tuple[str, ...], patch: int, per_class: int,
               folds: int, seed: int | None, out_path: str) -> None:
    if len(slides) != len(annotations):
        raise click.UsageError("need one --annotation per --slide")
    seed = ctx.obj["seed"] if seed is None else seed
    entries, has_tumour = [], []
    for slide_dir, ann_path in zip(slides, annotations):
        pyr = open_pyramid(slide_dir)
        ann = load_annotation(ann_path)
        mask = preproc.tissue_mask(pyr)
        entries.append((pyr.slide_id, ann, mask))
        has_tumour.append((pyr.slide_id, bool(ann.any())))
    coords = sampler.sample_training_set(entries, patch, per_class, seed)
    fold_of = sampler.stratified_folds(has_tumour, folds, seed) if folds >= 2 \
        else {sid: 0 for sid, _ in has_tumour}
    coords = sampler.assign_folds(coords, fold_of)
    sampler.save_coords(coords, out_path)
    click.echo(f"{len(coords)} coordinates -> {out_path}")


def _run_job(ctx, slide_dir, scorers_path, patch, stride, downsample, threshold,
             batch_size, black_fix):
    pyr = open_pyramid(slide_dir)
    mask = preproc.tissue_mask(pyr, black_fix=black_fix)
    specs = json.loads(Path(scorers_path).read_text())
    if isinstance(specs, dict):
        specs = [specs]
    for spec in specs:
        if spec.get("kind") == "oracle" and isinstance(spec.get("annotation"), str):
            spec["annotation"] = load_annotation(spec["annotation"])
    cfg = InferenceConfig(patch_size=patch, stride=stride, batch_size=batch_size,
                          heatmap_downsample=downsample, threshold=threshold)
    ensemble = EnsembleHandle.from_specs(specs)
    return pyr, mask, ensemble, cfg


@main.command("segment")
@click.argument("slide_dir", type=click.Path(exists=True))
@click.option("--scorers", "scorers_path", type=click.Path(exists=True), required=True)
@click.option("--patch", type=int, default=1024, show_default=True)
@click.option("--stride", type=int, default=512, show_default=True)
@click.option("--downsample", type=int, default=None)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--black-fix", is_flag=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def segment_cmd(ctx, slide_dir, scorers_path, patch, stride, downsample,
                threshold, batch_size, black_fix, out_dir) -> None:
    pyr, mask, ensemble, cfg = _run_job(ctx, slide_dir, scorers_path, patch,
                                        stride, downsample, threshold,
                                        batch_size, black_fix)
    try:
        members, ens = run_segmentation(pyr, mask, ensemble, cfg,
                                        workers=ctx.obj["threads"])
    finally:
        ensemble.close()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(members):
        save_map(m, out / f"member_{i}")
    save_map(ens, out / "heatmap")
    seg = threshold_map(ens, cfg.threshold)
    (out / "segmentation.png").write_bytes(preproc.mask_png_bytes(seg))
    preproc.save_mask(mask, out / "tissue.png")
    click.echo(f"heatmap {ens.width}x{ens.height} at D={ens.downsample} -> {out}")


@main.command("uncertainty")
@click.argument("slide_dir", type=click.Path(exists=True))
@click.option("--scorers", "scorers_path", type=click.Path(exists=True), required=True)
@click.option("--kinds", default="aleatoric,epistemic,combined", show_default=True)
@click.option("--patch", type=int, default=1024, show_default=True)
@click.option("--stride", type=int, default=512, show_default=True)
@click.option("--downsample", type=int, default=None)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--black-fix", is_flag=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def uncertainty_cmd(ctx, slide_dir, scorers_path, kinds, patch, stride,
                    downsample, batch_size, black_fix, out_dir) -> None:
    wanted = [k.strip() for k in kinds.split(",") if k.strip()]
    pyr, mask, ensemble, cfg = _run_job(ctx, slide_dir, scorers_path, patch,
                                        stride, downsample, 0.5, batch_size,
                                        black_fix)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        aleatorics = []
        if {"aleatoric", "combined"} & set(wanted):
            aleatorics = [aleatoric_map(pyr, mask, m, cfg, TTA_DEFAULT,
                                        workers=ctx.obj["threads"])
                          for m in ensemble.members]
            for i, am in enumerate(aleatorics):
                save_map(am.as_probability_map(), out / f"aleatoric_member_{i}",
                         kind="aleatoric")
        epis = None
        if {"epistemic", "combined"} & set(wanted):
            members, _ = run_segmentation(pyr, mask, ensemble, cfg,
                                          workers=ctx.obj["threads"])
            if len(members) < 2:
                raise click.UsageError("epistemic uncertainty needs >= 2 scorers")
            epis = epistemic_map(members)
            if "epistemic" in wanted:
                save_map(epis.as_probability_map(), out / "epistemic", kind="epistemic")
        if "combined" in wanted:
            comb = combined_map(aleatorics, epis)
            save_map(comb.as_probability_map(), out / "combined", kind="combined")
    finally:
        ensemble.close()
    click.echo(f"uncertainty kinds {wanted} -> {out}")


@main.command("features")
@click.option("--map", "map_base", type=click.Path(), required=True,
              help="probability map base path (without extension)")
@click.option("--mask", "mask_path", type=click.Path(exists=True), required=True)
@click.option("--mpp", type=float, required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--regions-out", type=click.Path(), default=None,
              help="also dump the p=0.9 region list as JSON")
def features_cmd(map_base: str, mask_path: str, mpp: float, out_path: str,
                 regions_out: str | None) -> None:
    from .inference import load_map
    pmap = load_map(map_base)
    mask = preproc.load_mask(mask_path)
    fv = analysis.extract_features(pmap, mask, mpp)
    analysis.save_features_csv([(pmap.slide_id, fv)], out_path)
    if regions_out:
        regions = analysis.regions_of(threshold_map(pmap, 0.9), pmap.values,
                                      mpp, pmap.downsample)
        analysis.save_regions_json(regions, regions_out)
    click.echo(f"32 features -> {out_path} (negative={fv.negative})")


@main.group("classify")
def classify_group() -> None:
    """Random-forest metastasis-type classifiers."""


def _load_feature_table(path: str) -> staging.Dataset:
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise click.UsageError(f"no rows in {path}")
    feat_cols = [c for c in rows[0] if c not in ("slide_id", "label", "negative")]
    X = np.array([[float(r[c]) for c in feat_cols] for r in rows])
    y = np.array([staging.SlideLabel[r["label"]].value for r in rows])
    return staging.Dataset(X, y)


@classify_group.command("train")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True,
              help="features CSV with a 'label' column")
@click.option("--trees", type=int, default=100, show_default=True)
@click.option("--balance/--no-balance", default=False,
              help="apply SMOTE+Tomek before training")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
def classify_train(ctx, data_path, trees, balance, seed, out_path) -> None:
    seed = ctx.obj["seed"] if seed is None else seed
    data = _load_feature_table(data_path)
    if balance:
        data = staging.smote_tomek(data, seed=seed)
    forest = staging.rf_train(data, n_trees=trees, seed=seed)
    staging.save_forest(forest, out_path)
    click.echo(f"forest of {trees} trees on {len(data)} rows -> {out_path}")


@classify_group.command("predict")
@click.option("--forest", "forest_paths", type=click.Path(exists=True),
              multiple=True, required=True, help="forest JSON (repeat to ensemble)")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def classify_predict(forest_paths, data_path, out_path) -> None:
    forests = [staging.load_forest(p) for p in forest_paths]
    with open(data_path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.DictReader(lines))
    feat_cols = [c for c in rows[0] if c not in ("slide_id", "label", "negative")]
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "label"])
        for r in rows:
            x = np.array([float(r[c]) for c in feat_cols])
            label = staging.ensemble_classify(forests, x)
            writer.writerow([r.get("slide_id", ""), staging.SlideLabel(label).name])
    click.echo(f"{len(rows)} predictions -> {out_path}")


@main.command("stage")
@click.option("--per-patient", "per_patient", type=click.Path(exists=True),
              required=True, help="CSV patient_id,label (five rows per patient)")
@click.option("--out", "out_path", type=click.Path(), required=True)
def stage_cmd(per_patient: str, out_path: str) -> None:
    by_patient: dict[str, list[staging.SlideLabel]] = {}
    with open(per_patient, newline="") as fh:
        for r in csv.DictReader(fh):
            by_patient.setdefault(r["patient_id"], []).append(
                staging.SlideLabel[r["label"]])
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "pn_stage"])
        for patient, labels in sorted(by_patient.items()):
            writer.writerow([patient, staging.pn_stage(labels).value])
    click.echo(f"{len(by_patient)} patients -> {out_path}")


@main.command("burden")
@click.option("--map", "map_base", type=click.Path(), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), required=True)
@click.option("--mpp", type=float, required=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def burden_cmd(map_base, mask_path, mpp, threshold, out_path) -> None:
    from .inference import load_map
    pmap = load_map(map_base)
    mask = preproc.load_mask(mask_path)
    viable = threshold_map(pmap, threshold)
    if not viable.any():
        raise click.ClickException("no viable tumour above threshold")
    whole = analysis.whole_tumor_approx(viable, mask, pmap.downsample)
    result = analysis.tumor_burden(viable, whole, mpp, pmap.downsample)
    Path(out_path).write_text(json.dumps(
        {"slide_id": pmap.slide_id, "burden": result.burden,
         "viable_area_mm2": result.viable_area_mm2,
         "whole_area_mm2": result.whole_area_mm2}, indent=2))
    click.echo(f"burden {result.burden:.4f} -> {out_path}")


@main.command("froc")
@click.option("--detections", "det_path", type=click.Path(exists=True), required=True)
@click.option("--lesions", "lesions_dir", type=click.Path(exists=True), required=True,
              help="directory of {slide_id}.png binary lesion masks")
@click.option("--lesions-downsample", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def froc_cmd(det_path, lesions_dir, lesions_downsample, out_path) -> None:
    dets = metrics.load_detections_csv(det_path)
    by_slide: dict[str, list[metrics.Detection]] = {}
    for d in dets:
        by_slide.setdefault(d.slide_id, []).append(d)
    lesions = {}
    for png in sorted(Path(lesions_dir).glob("*.png")):
        bits = load_annotation(png)
        labels, _ = analysis.connected_components(bits, 8)
        lesions[png.stem] = (labels, lesions_downsample)
    try:
        curve = metrics.froc(by_slide, lesions)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    metrics.save_froc_json(curve, out_path)
    click.echo(f"FROC score {curve.score:.4f} -> {out_path}")


@main.command("kappa")
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--col-a", default="a", show_default=True)
@click.option("--col-b", default="b", show_default=True)
def kappa_cmd(csv_path: str, col_a: str, col_b: str) -> None:
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    a = [int(r[col_a]) for r in rows]
    b = [int(r[col_b]) for r in rows]
    click.echo(f"{metrics.kappa_quadratic(a, b):.6f}")


@main.command("dice")
@click.argument("mask_a", type=click.Path(exists=True))
@click.argument("mask_b", type=click.Path(exists=True))
def dice_cmd(mask_a: str, mask_b: str) -> None:
    a = load_annotation(mask_a)
    b = load_annotation(mask_b)
    click.echo(f"dice {metrics.dice(a, b):.6f} jaccard {metrics.jaccard(a, b):.6f}")


@main.command("serve")
@click.argument("root", type=click.Path(exists=True))
@click.option("--port", type=int, default=8008, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--workers", type=int, default=2, show_default=True)
@click.option("--frontend", "frontend_dir", type=click.Path(exists=True), default=None,
              help="static viewer bundle to mount at /")
def serve_cmd(root: str, port: int, host: str, workers: int,
              frontend_dir: str | None) -> None:
    import uvicorn
    from .service import create_app
    app = create_app(root, workers=workers)
    if frontend_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="viewer")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    sys.exit(main())
