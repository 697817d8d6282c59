from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner
from PIL import Image

from wsikit.cli import main
from wsikit.synthetic import make_synthetic_slide


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    img, ann = make_synthetic_slide(512, 2, seed=3)
    Image.fromarray(img).save(root / "slide.png")
    np.save(root / "ann.npy", ann)
    (root / "scorers.json").write_text(json.dumps(
        [{"kind": "oracle", "annotation": str(root / "ann.npy"), "sigma": 0.0}]))
    return root


def run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    assert result.exit_code == 0, result.output
    return result.output


@pytest.fixture(scope="module")
def slide_dir(workspace):
    out = workspace / "slide_dir"
    run("pyramid", "build", workspace / "slide.png", "--tile-size", 256,
        "--mpp", 0.25, "--slide-id", "demo", "--out", out)
    return out


def test_pyramid_build(slide_dir):
    assert (slide_dir / "manifest.json").exists()
    assert (slide_dir / "level_1" / "0_0.png").exists()


def test_mask_grid_sample(workspace, slide_dir):
    run("mask", slide_dir, "--out", workspace / "mask.png")
    assert (workspace / "mask.png").exists()
    assert (workspace / "mask.json").exists()
    out = run("grid", slide_dir, "--mask", workspace / "mask.png",
              "--patch", 256, "--stride", 256, "--out", workspace / "grid.csv")
    assert "centres" in out
    run("sample", "--slide", slide_dir, "--annotation", workspace / "ann.npy",
        "--patch", 128, "--per-class", 10, "--folds", 2,
        "--out", workspace / "coords.csv")
    rows = list(csv.DictReader((workspace / "coords.csv").open()))
    assert len(rows) == 20
    assert sum(r["label"] == "tumour" for r in rows) == 10


@pytest.fixture(scope="module")
def seg_dir(workspace, slide_dir):
    out = workspace / "seg"
    run("segment", slide_dir, "--scorers", workspace / "scorers.json",
        "--patch", 256, "--stride", 256, "--downsample", 1,
        "--threshold", 0.5, "--out", out)
    return out


def test_segment_outputs(seg_dir, workspace):
    assert (seg_dir / "heatmap.f32").exists()
    assert (seg_dir / "segmentation.png").exists()
    seg = np.asarray(Image.open(seg_dir / "segmentation.png")) > 0
    ann = np.load(workspace / "ann.npy")
    from wsikit.metrics import dice
    assert dice(seg, ann) == 1.0


def test_features_and_burden(workspace, seg_dir):
    run("features", "--map", seg_dir / "heatmap", "--mask", seg_dir / "tissue.png",
        "--mpp", 0.25, "--out", workspace / "features.csv")
    with (workspace / "features.csv").open() as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = list(csv.DictReader(lines))
    assert len(rows) == 1 and rows[0]["slide_id"] == "demo"
    run("burden", "--map", seg_dir / "heatmap", "--mask", seg_dir / "tissue.png",
        "--mpp", 0.25, "--out", workspace / "burden.json")
    burden = json.loads((workspace / "burden.json").read_text())
    assert 0 < burden["burden"] <= 1


def test_uncertainty_cli(workspace, slide_dir):
    (workspace / "two.json").write_text(json.dumps(
        [{"kind": "constant", "value": 0.3}, {"kind": "constant", "value": 0.6}]))
    run("uncertainty", slide_dir, "--scorers", workspace / "two.json",
        "--kinds", "aleatoric,epistemic,combined", "--patch", 256,
        "--stride", 256, "--downsample", 1, "--out", workspace / "unc")
    from wsikit.inference import load_map
    epis = load_map(workspace / "unc" / "epistemic")
    covered = epis.coverage > 0
    assert np.allclose(epis.values[covered], np.var([0.3, 0.6]))
    sidecar = json.loads((workspace / "unc" / "epistemic.json").read_text())
    assert sidecar["kind"] == "epistemic"


def test_classify_and_stage(workspace, rng=np.random.default_rng(0)):
    # tiny feature table: two separable classes
    from wsikit.analysis import FEATURE_NAMES
    rows = []
    for i in range(30):
        label = "Negative" if i < 15 else "Macro"
        base = 0.0 if i < 15 else 5.0
        rows.append([f"s{i}"] + list(rng.normal(base, 0.3, len(FEATURE_NAMES)))
                    + [label])
    table = workspace / "train.csv"
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", *FEATURE_NAMES, "label"])
        writer.writerows(rows)
    run("classify", "train", "--data", table, "--trees", 10,
        "--out", workspace / "forest.json")
    run("classify", "predict", "--forest", workspace / "forest.json",
        "--data", table, "--out", workspace / "preds.csv")
    preds = list(csv.DictReader((workspace / "preds.csv").open()))
    want = ["Negative"] * 15 + ["Macro"] * 15
    assert [p["label"] for p in preds] == want

    staged = workspace / "patients.csv"
    with staged.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "label"])
        for i in range(5):
            writer.writerow(["p1", "Negative"])
            writer.writerow(["p2", "Macro" if i < 2 else "Micro"])
    run("stage", "--per-patient", staged, "--out", workspace / "stages.csv")
    stages = {r["patient_id"]: r["pn_stage"]
              for r in csv.DictReader((workspace / "stages.csv").open())}
    assert stages == {"p1": "pN0", "p2": "pN2"}


def test_kappa_and_dice_cli(workspace):
    table = workspace / "kappa.csv"
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a", "b"])
        for pair in [(0, 0), (1, 1), (2, 3), (4, 4), (0, 1)]:
            writer.writerow(pair)
    out = run("kappa", table)
    assert float(out.strip()) <= 1.0
    m = np.zeros((32, 32), dtype=bool)
    m[4:20, 4:20] = True
    Image.fromarray(m).save(workspace / "m1.png")
    Image.fromarray(m).save(workspace / "m2.png")
    out = run("dice", workspace / "m1.png", workspace / "m2.png")
    assert "dice 1.000000" in out


def test_froc_cli(workspace):
    lesions = workspace / "lesions"
    lesions.mkdir(exist_ok=True)
    m = np.zeros((64, 64), dtype=bool)
    m[10:20, 10:20] = True
    Image.fromarray(m).save(lesions / "s1.png")
    det = workspace / "dets.csv"
    with det.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y", "confidence"])
        writer.writerow(["s1", 15, 15, 0.9])
    run("froc", "--detections", det, "--lesions", lesions,
        "--out", workspace / "froc.json")
    froc = json.loads((workspace / "froc.json").read_text())
    assert froc["score"] == 1.0
