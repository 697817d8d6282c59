"""Segmentation and detection metrics.

The loss functions are evaluation utilities (no gradients): a Dice-style
overlap loss with foreground/background polarity, pixel-wise cross-entropy,
and their weighted combination. FROC follows the lesion-based rules: a
detection inside an annotated lesion is a true positive, several hits on one
lesion count once, strays count as false positives per slide, and the score
averages sensitivity at six FP rates. Cohen's kappa uses quadratic weights
over five ordinal classes.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .analysis import connected_components
from .inference import ProbabilityMap

log = logging.getLogger(__name__)

FROC_DEFAULT_RATES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CE_EPS = 1e-7


def _check_congruent(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_congruent(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_congruent(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.25

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def dice_loss(p: np.ndarray, g: np.ndarray, polarity: str = "FG") -> float:
    """1 - 2*sum(p*g) / (sum(p^2) + sum(g^2)); BG polarity complements both.

    An all-zero denominator (empty plane on both sides) returns 0 with a
    logged flag.
    """
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_congruent(p, g)
    if polarity == "BG":
        p, g = 1.0 - p, 1.0 - g
    elif polarity != "FG":
        raise ValueError("polarity must be 'FG' or 'BG'")
    denom = float((p * p).sum() + (g * g).sum())
    if denom == 0.0:
        log.warning("dice_loss: empty denominator, returning 0")
        return 0.0
    return 1.0 - 2.0 * float((p * g).sum()) / denom


def cross_entropy(p: np.ndarray, g: np.ndarray) -> float:
    """Mean pixel-wise -[g log p + (1-g) log(1-p)], p clamped to [eps, 1-eps]."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_congruent(p, g)
    pc = np.clip(p, CE_EPS, 1.0 - CE_EPS)
    return float(-np.mean(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)))


def hybrid_loss(p: np.ndarray, g: np.ndarray,
                w: LossWeights = LossWeights()) -> float:
    """alpha*CE + beta*DiceLoss_BG + gamma*DiceLoss_FG."""
    return (w.alpha * cross_entropy(p, g)
            + w.beta * dice_loss(p, g, "BG")
            + w.gamma * dice_loss(p, g, "FG"))


@dataclass(frozen=True)
class Detection:
    slide_id: str
    x: float  # level-0
    y: float
    confidence: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.confidence):
            raise ValueError("confidence must be finite")


def detections_from_map(pmap: ProbabilityMap, t: float) -> list[Detection]:
    """One detection per connected component of map >= t, placed at the
    component centroid with the component's max probability as confidence."""
    if not 0.0 < t < 1.0:
        raise ValueError("detection threshold must be in (0, 1)")
    mask = (pmap.values >= t) & (pmap.coverage > 0)
    labels, n = connected_components(mask, 8)
    out = []
    d = pmap.downsample
    for lbl in range(1, n + 1):
        ys, xs = np.nonzero(labels == lbl)
        conf = float(pmap.values[ys, xs].max())
        out.append(Detection(pmap.slide_id,
                             (float(xs.mean()) + 0.5) * d,
                             (float(ys.mean()) + 0.5) * d,
                             conf))
    return out


@dataclass
class FrocCurve:
    points: list[tuple[float, float]]  # (avg FPs/slide, sensitivity), FP ascending
    rate_sensitivities: dict[float, float]
    score: float


LesionGT = tuple[np.ndarray, int]  # labelled lesion mask, downsample


def _hit_lesion(det: Detection, labels: np.ndarray, ds: int,
                tolerance: float, dist: np.ndarray | None,
                nearest: tuple[np.ndarray, ...] | None) -> int:
    mx = min(max(int(det.x // ds), 0), labels.shape[1] - 1)
    my = min(max(int(det.y // ds), 0), labels.shape[0] - 1)
    lbl = int(labels[my, mx])
    if lbl or tolerance <= 0 or dist is None:
        return lbl
    if dist[my, mx] * ds <= tolerance:
        iy, ix = nearest[0][my, mx], nearest[1][my, mx]
        return int(labels[iy, ix])
    return 0


def froc(detections: dict[str, list[Detection]], lesions: dict[str, LesionGT],
         fp_rates: tuple[float, ...] = FROC_DEFAULT_RATES,
         distance_tolerance: float = 0.0,
         interpolation: str = "step") -> FrocCurve:
    """Sweep unique confidences from high to low, building the FROC curve.

    `lesions` maps every evaluated slide (including negatives) to a labelled
    lesion mask and its downsample. The optional distance tolerance (level-0
    pixels) admits detections near, not inside, a lesion; the default 0 is the
    strict point-in-region rule. The score averages sensitivity at `fp_rates`
    using the step convention (value at the largest achieved FP rate at or
    below the target; 0 if the curve never gets there); "linear" interpolation
    is available as an alternative convention.
    """
    if interpolation not in ("step", "linear"):
        raise ValueError("interpolation must be 'step' or 'linear'")
    n_slides = len(lesions)
    if n_slides == 0:
        raise ValueError("no ground truth slides")
    total_lesions = 0
    aux: dict[str, tuple] = {}
    for slide_id, (labels, ds) in lesions.items():
        labels = np.asarray(labels)
        total_lesions += len(np.unique(labels[labels > 0]))
        dist = nearest = None
        if distance_tolerance > 0:
            dist, idx = ndimage.distance_transform_edt(labels == 0,
                                                       return_indices=True)
            nearest = (idx[0], idx[1])
        aux[slide_id] = (labels, ds, dist, nearest)

    flat: list[tuple[float, str, int]] = []  # confidence, slide, lesion (0 = FP)
    for slide_id, dets in detections.items():
        if slide_id not in lesions:
            raise ValueError(f"detections reference unknown slide {slide_id!r}")
        labels, ds, dist, nearest = aux[slide_id]
        for det in dets:
            flat.append((det.confidence, slide_id,
                         _hit_lesion(det, labels, ds, distance_tolerance,
                                     dist, nearest)))

    points: list[tuple[float, float]] = []
    thresholds = sorted({c for c, _, _ in flat}, reverse=True)
    for t in thresholds:
        surviving = [(s, lbl) for c, s, lbl in flat if c >= t]
        hits = {(s, lbl) for s, lbl in surviving if lbl > 0}
        fps = sum(1 for _, lbl in surviving if lbl == 0)
        sens = len(hits) / total_lesions if total_lesions else 0.0
        points.append((fps / n_slides, sens))

    per_rate: dict[float, float] = {}
    for rate in fp_rates:
        if interpolation == "step":
            reachable = [s for fp, s in points if fp <= rate]
            per_rate[rate] = max(reachable) if reachable else 0.0
        else:
            if not points:
                per_rate[rate] = 0.0
                continue
            xs = np.array([fp for fp, _ in points])
            ys = np.array([s for _, s in points])
            order = np.argsort(xs, kind="stable")
            per_rate[rate] = float(np.interp(rate, xs[order], ys[order],
                                             left=0.0, right=ys[order][-1]))
    score = float(np.mean(list(per_rate.values()))) if per_rate else 0.0
    return FrocCurve(points, per_rate, score)


def kappa_quadratic(a, b, k: int = 5) -> float:
    """Quadratic-weighted Cohen's kappa over labels 0..k-1.

    Perfect agreement on a single class leaves no chance disagreement to
    normalize by; that degenerate case returns 1.0 with a logged flag.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label sequences must be 1-d and equally long")
    if len(a) < 1:
        raise ValueError("need at least one rating")
    if a.min() < 0 or a.max() >= k or b.min() < 0 or b.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")
    n = len(a)
    observed = np.zeros((k, k), dtype=np.float64)
    np.add.at(observed, (a, b), 1.0)
    observed /= n
    expected = np.outer(np.bincount(a, minlength=k),
                        np.bincount(b, minlength=k)).astype(np.float64) / (n * n)
    ij = np.arange(k, dtype=np.float64)
    weights = (ij[:, None] - ij[None, :]) ** 2 / (k - 1) ** 2
    denom = float((weights * expected).sum())
    if denom == 0.0:
        log.warning("kappa: degenerate single-class agreement, returning 1.0")
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


def save_detections_csv(detections: list[Detection], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "x", "y", "confidence"])
        for d in detections:
            writer.writerow([d.slide_id, repr(d.x), repr(d.y), repr(d.confidence)])


def load_detections_csv(path: str | Path) -> list[Detection]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Detection(r["slide_id"], float(r["x"]), float(r["y"]),
                      float(r["confidence"])) for r in rows]


def save_froc_json(curve: FrocCurve, path: str | Path) -> None:
    payload = {"points": [[fp, s] for fp, s in curve.points],
               "rate_sensitivities": {str(r): s
                                      for r, s in curve.rate_sensitivities.items()},
               "score": curve.score}
    Path(path).write_text(json.dumps(payload, indent=2))
