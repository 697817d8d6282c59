"""HTTP tile/job service backing the viewer.

A thin view over the library: tiles and overlays are rendered on demand from
the same calls the CLI uses, so every byte served equals the corresponding
library output. Jobs run on a bounded worker pool, at most one active job per
slide; artifacts are written to a temp directory and renamed into place on
completion.

The published heatmap colormap ("heat", byte value v in 0..255):
    r = min(255, 3*v), g = min(255, max(0, 3*v - 255)), b = min(255, max(0, 3*v - 510))
Overlay tiles are RGBA with alpha 255 where the map is defined (for the
segmentation kind: where the thresholded mask is on) and 0 elsewhere; layer
opacity belongs to the client.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import shutil
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.middleware.cors import CORSMiddleware

from .analysis import extract_features, regions_of, tumor_burden, whole_tumor_approx
from .inference import (InferenceConfig, ProbabilityMap, run_segmentation,
                        save_map, threshold_map)
from .preproc import TissueMask, mask_png_bytes, save_mask, tissue_mask
from .pyramid import SlidePyramid, list_slides, open_pyramid, to_png_bytes
from .sampler import TTA_DEFAULT
from .scorer import EnsembleHandle
from .staging import classify_rule
from .uncertainty import aleatoric_map, combined_map, epistemic_map

log = logging.getLogger(__name__)

OVERLAY_KINDS = ("heatmap", "segmentation", "aleatoric", "epistemic", "combined")


def heat_colormap() -> np.ndarray:
    """The fixed 256-entry colormap documented in the module docstring."""
    v = np.arange(256, dtype=np.int32)
    r = np.minimum(255, 3 * v)
    g = np.clip(3 * v - 255, 0, 255)
    b = np.clip(3 * v - 510, 0, 255)
    return np.stack([r, g, b], axis=1).astype(np.uint8)


def gray_colormap() -> np.ndarray:
    v = np.arange(256, dtype=np.uint8)
    return np.stack([v, v, v], axis=1)


COLORMAPS = {"heat": heat_colormap(), "gray": gray_colormap()}
SEGMENTATION_RGBA = (0, 200, 0, 255)


def render_overlay_tile(pmap: ProbabilityMap, kind: str, level: int,
                        tx: int, ty: int, tile_size: int,
                        threshold: float = 0.5, colormap: str = "heat",
                        value_scale: float = 1.0) -> np.ndarray:
    """RGBA tile of a stored map resampled (nearest) to a pyramid level.

    `value_scale` maps the plane onto [0,1] before the colormap (uncertainty
    planes pass 1/0.25). Alpha is 0 wherever the map has no coverage.
    """
    if colormap not in COLORMAPS:
        raise KeyError(f"unknown colormap {colormap!r}")
    ds = 1 << level
    xs = ((tx * tile_size + np.arange(tile_size) + 0.5) * ds / pmap.downsample).astype(int)
    ys = ((ty * tile_size + np.arange(tile_size) + 0.5) * ds / pmap.downsample).astype(int)
    inside_x = (xs >= 0) & (xs < pmap.width)
    inside_y = (ys >= 0) & (ys < pmap.height)
    xs_c = np.clip(xs, 0, pmap.width - 1)
    ys_c = np.clip(ys, 0, pmap.height - 1)
    values = pmap.values[np.ix_(ys_c, xs_c)]
    covered = (pmap.coverage[np.ix_(ys_c, xs_c)] > 0) \
        & inside_y[:, None] & inside_x[None, :]
    out = np.zeros((tile_size, tile_size, 4), dtype=np.uint8)
    if kind == "segmentation":
        on = covered & (values >= threshold)
        out[on] = SEGMENTATION_RGBA
        return out
    byte = np.clip(np.rint(values * value_scale * 255.0), 0, 255).astype(np.uint8)
    out[..., :3] = COLORMAPS[colormap][byte]
    out[..., 3] = np.where(covered, 255, 0)
    return out


@dataclass
class JobRecord:
    job_id: str
    slide_id: str
    config: dict
    state: str = "queued"
    progress: float = 0.0
    error: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    maps: dict[str, ProbabilityMap] = field(default_factory=dict)
    tissue: TissueMask | None = None

    def public(self) -> dict:
        return {"job_id": self.job_id, "slide_id": self.slide_id,
                "config": self.config, "state": self.state,
                "progress": self.progress, "error": self.error,
                "outputs": self.outputs}


def validate_job_config(config: dict) -> tuple[list[dict], InferenceConfig | None]:
    """Per-field validation errors for a job config payload."""
    errors = []
    if not isinstance(config, dict):
        return [{"field": "config", "message": "must be an object"}], None
    try:
        cfg = InferenceConfig.from_dict(config)
    except (ValueError, TypeError) as exc:
        errors.append({"field": "inference", "message": str(exc)})
        cfg = None
    scorers = config.get("scorers")
    if not isinstance(scorers, list) or not scorers:
        errors.append({"field": "scorers", "message": "need a non-empty list"})
    else:
        for i, spec in enumerate(scorers):
            if not isinstance(spec, dict) or "kind" not in spec:
                errors.append({"field": f"scorers[{i}]",
                               "message": "each scorer needs a 'kind'"})
    for kind in config.get("uncertainty", []):
        if kind not in ("aleatoric", "epistemic", "combined"):
            errors.append({"field": "uncertainty", "message": f"unknown kind {kind!r}"})
    return errors, cfg


class SlideService:
    """State shared by the endpoints: open slides, jobs, worker pool."""

    def __init__(self, root: str | Path, jobs_dir: str | Path | None = None,
                 workers: int = 2):
        self.root = Path(root)
        self.jobs_dir = Path(jobs_dir) if jobs_dir else self.root / "_jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self.lock = threading.Lock()
        self.jobs: dict[str, JobRecord] = {}
        self.slides: dict[str, SlidePyramid] = {}
        self._ids = itertools.count(1)

    def slide(self, slide_id: str) -> SlidePyramid:
        with self.lock:
            if slide_id not in self.slides:
                path = self.root / slide_id
                if not (path / "manifest.json").exists():
                    raise KeyError(slide_id)
                self.slides[slide_id] = open_pyramid(path)
            return self.slides[slide_id]

    def manifests(self) -> list[dict]:
        return [s.manifest() for s in list_slides(self.root)]

    def submit(self, slide_id: str, config: dict) -> JobRecord:
        try:
            self.slide(slide_id)
        except KeyError:
            raise LookupError(f"unknown slide {slide_id!r}") from None
        errors, cfg = validate_job_config(config)
        if errors:
            raise ValueError(json.dumps(errors))
        with self.lock:
            for job in self.jobs.values():
                if job.slide_id == slide_id and job.state in ("queued", "running"):
                    raise RuntimeError(job.job_id)
            job = JobRecord(f"job-{next(self._ids):04d}", slide_id, config)
            self.jobs[job.job_id] = job
        self.pool.submit(self._run, job, cfg)
        return job

    def _run(self, job: JobRecord, cfg: InferenceConfig) -> None:
        with self.lock:
            job.state = "running"
        try:
            self._execute(job, cfg)
            with self.lock:
                job.state = "done"
                job.progress = 1.0
        except Exception as exc:  # noqa: BLE001 - job state carries the failure
            log.exception("job %s failed", job.job_id)
            with self.lock:
                job.state = "failed"
                job.error = str(exc)

    def _execute(self, job: JobRecord, cfg: InferenceConfig) -> None:
        pyramid = self.slide(job.slide_id)
        config = job.config
        mask = tissue_mask(pyramid, level=config.get("mask_level"),
                           black_fix=bool(config.get("black_fix", False)))
        ensemble = EnsembleHandle.from_specs(config["scorers"])
        kinds = list(config.get("uncertainty", []))
        want_aleatoric = bool({"aleatoric", "combined"} & set(kinds))
        n_members = len(ensemble.members)
        total_units = 1 + (n_members if want_aleatoric else 0)

        def seg_progress(done: int, total: int) -> None:
            with self.lock:
                job.progress = done / max(total, 1) / total_units

        try:
            member_maps, ens_map = run_segmentation(
                pyramid, mask, ensemble, cfg, progress=seg_progress)
            maps: dict[str, ProbabilityMap] = {"heatmap": ens_map}
            for i, m in enumerate(member_maps):
                maps[f"member_{i}"] = m

            aleatorics = []
            if want_aleatoric:
                for i, member in enumerate(ensemble.members):
                    def al_progress(done: int, total: int, base=i) -> None:
                        with self.lock:
                            job.progress = (1 + base + done / max(total, 1)) / total_units
                    aleatorics.append(aleatoric_map(pyramid, mask, member, cfg,
                                                    TTA_DEFAULT, progress=al_progress))
                maps["aleatoric"] = _mean_uncertainty(aleatorics).as_probability_map()
            epis = None
            if n_members >= 2 and ({"epistemic", "combined"} & set(kinds)):
                epis = epistemic_map(member_maps)
                if "epistemic" in kinds:
                    maps["epistemic"] = epis.as_probability_map()
            if "combined" in kinds:
                if epis is None or not aleatorics:
                    raise ValueError("combined uncertainty needs >= 2 members "
                                     "and aleatoric maps")
                maps["combined"] = combined_map(aleatorics, epis).as_probability_map()
        finally:
            ensemble.close()

        job_dir = self.jobs_dir / job.job_id
        tmp_dir = Path(tempfile.mkdtemp(prefix=f"{job.job_id}.", dir=self.jobs_dir))
        try:
            save_mask(mask, tmp_dir / "tissue.png")
            for name, pmap in maps.items():
                kind = name if name in ("aleatoric", "epistemic", "combined") else None
                save_map(pmap, tmp_dir / name, kind=kind)
            seg = threshold_map(ens_map, cfg.threshold)
            (tmp_dir / "segmentation.png").write_bytes(mask_png_bytes(seg))
            os.replace(tmp_dir, job_dir)
        except Exception:
            shutil.rmtree(tmp_dir, ignore_errors=True)
            raise
        with self.lock:
            job.maps = maps
            job.tissue = mask
            job.outputs = {name: str(job_dir / name) for name in maps}
            job.outputs["segmentation"] = str(job_dir / "segmentation.png")
            job.outputs["tissue"] = str(job_dir / "tissue.png")

    def job(self, job_id: str) -> JobRecord:
        with self.lock:
            if job_id not in self.jobs:
                raise LookupError(f"unknown job {job_id!r}")
            return self.jobs[job_id]

    def close(self) -> None:
        self.pool.shutdown(wait=True)


def _mean_uncertainty(maps):
    """Mean of member aleatoric maps, kept as an UncertaintyMap."""
    from .uncertainty import UncertaintyMap
    first = maps[0]
    covered = np.ones_like(first.values, dtype=bool)
    for m in maps:
        covered &= m.coverage > 0
    values = np.where(covered, np.mean(np.stack([m.values for m in maps]), axis=0), 0.0)
    return UncertaintyMap(first.slide_id, "aleatoric", first.downsample,
                          first.width, first.height, values,
                          covered.astype(np.uint32))


def create_app(root: str | Path, jobs_dir: str | Path | None = None,
               workers: int = 2) -> FastAPI:
    service = SlideService(root, jobs_dir, workers)
    app = FastAPI(title="wsikit slide service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    app.state.service = service

    def _parse_xy(name: str) -> tuple[int, int]:
        stem = name.removesuffix(".png")
        try:
            x, y = stem.split("_")
            return int(x), int(y)
        except ValueError:
            raise HTTPException(400, f"bad tile name {name!r}") from None

    @app.get("/api/slides")
    def slides() -> list[dict]:
        return service.manifests()

    @app.get("/api/tiles/{slide_id}/{level}/{name}")
    def tile(slide_id: str, level: int, name: str) -> Response:
        tx, ty = _parse_xy(name)
        try:
            pyr = service.slide(slide_id)
        except KeyError:
            raise HTTPException(404, f"unknown slide {slide_id!r}") from None
        if not 0 <= level < len(pyr.levels):
            raise HTTPException(404, f"unknown level {level}")
        return Response(to_png_bytes(pyr.tile(level, tx, ty)), media_type="image/png")

    @app.post("/api/jobs", status_code=201)
    def submit_job(payload: dict) -> dict:
        slide_id = payload.get("slide_id")
        config = payload.get("config", {})
        if not slide_id:
            raise HTTPException(400, "slide_id is required")
        try:
            return service.submit(slide_id, config).public()
        except LookupError as exc:
            raise HTTPException(404, str(exc)) from None
        except ValueError as exc:
            raise HTTPException(400, detail=json.loads(str(exc))) from None
        except RuntimeError as exc:
            raise HTTPException(409, f"job {exc} already running for this slide") from None

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str) -> dict:
        try:
            return service.job(job_id).public()
        except LookupError as exc:
            raise HTTPException(404, str(exc)) from None

    def _done_job(job_id: str) -> JobRecord:
        try:
            job = service.job(job_id)
        except LookupError as exc:
            raise HTTPException(404, str(exc)) from None
        if job.state != "done":
            raise HTTPException(409, f"job {job_id} is {job.state}")
        return job

    @app.get("/api/overlays/{job_id}/{kind}/{level}/{name}")
    def overlay(job_id: str, kind: str, level: int, name: str,
                threshold: float | None = Query(None),
                colormap: str = Query("heat")) -> Response:
        tx, ty = _parse_xy(name)
        job = _done_job(job_id)
        if kind not in OVERLAY_KINDS:
            raise HTTPException(400, f"unknown overlay kind {kind!r}")
        source = "heatmap" if kind == "segmentation" else kind
        pmap = job.maps.get(source)
        if pmap is None:
            raise HTTPException(404, f"artifact kind {kind!r} not computed")
        pyr = service.slide(job.slide_id)
        if not 0 <= level < len(pyr.levels):
            raise HTTPException(404, f"unknown level {level}")
        t = job.config.get("threshold", 0.5) if threshold is None else threshold
        scale = 1.0 if kind in ("heatmap", "segmentation") else 4.0  # 1/0.25
        try:
            tile_rgba = render_overlay_tile(pmap, kind, level, tx, ty,
                                            pyr.tile_size, threshold=t,
                                            colormap=colormap, value_scale=scale)
        except KeyError as exc:
            raise HTTPException(400, str(exc)) from None
        return Response(to_png_bytes(tile_rgba), media_type="image/png")

    @app.get("/api/jobs/{job_id}/features")
    def job_features(job_id: str) -> dict:
        job = _done_job(job_id)
        pyr = service.slide(job.slide_id)
        fv = extract_features(job.maps["heatmap"], job.tissue, pyr.mpp)
        return {"features": fv.as_dict(), "negative": fv.negative}

    @app.get("/api/jobs/{job_id}/staging")
    def job_staging(job_id: str) -> dict:
        job = _done_job(job_id)
        pyr = service.slide(job.slide_id)
        pmap = job.maps["heatmap"]
        mask09 = threshold_map(pmap, 0.9)
        regions = regions_of(mask09, pmap.values, pyr.mpp, pmap.downsample)
        label = classify_rule(regions)
        return {"slide_id": job.slide_id, "label": label.name,
                "regions": len(regions)}

    @app.get("/api/jobs/{job_id}/burden")
    def job_burden(job_id: str) -> dict:
        job = _done_job(job_id)
        pyr = service.slide(job.slide_id)
        pmap = job.maps["heatmap"]
        viable = threshold_map(pmap, job.config.get("threshold", 0.5))
        if not viable.any():
            raise HTTPException(409, "no viable tumour detected; burden undefined")
        whole = whole_tumor_approx(viable, job.tissue, pmap.downsample)
        result = tumor_burden(viable, whole, pyr.mpp, pmap.downsample)
        return {"slide_id": job.slide_id, "burden": result.burden,
                "viable_area_mm2": result.viable_area_mm2,
                "whole_area_mm2": result.whole_area_mm2}

    return app
