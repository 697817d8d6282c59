"""Slide-level metastasis typing and patient pN-staging.

The rule-based classifier applies the 0.2 mm / 2 mm size criteria to the
largest detected region's major axis. The learned path is a from-scratch
random forest (Gini CART trees on bootstrap samples with per-node feature
subsets) over the 32 heatmap features, optionally rebalanced with SMOTE
followed by Tomek-link removal. Ties everywhere resolve toward the higher
metastasis category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np

from .analysis import Region

ITC_MAX_MM = 0.2
MICRO_MAX_MM = 2.0


class SlideLabel(IntEnum):
    Negative = 0
    ITC = 1
    Micro = 2
    Macro = 3


class PNStage(Enum):
    pN0 = "pN0"
    pN0i_plus = "pN0(i+)"
    pN1mi = "pN1mi"
    pN1 = "pN1"
    pN2 = "pN2"


def classify_rule(regions: list[Region]) -> SlideLabel:
    """Metastasis type from the largest region's major axis length."""
    if not regions:
        return SlideLabel.Negative
    largest = max(regions, key=lambda r: (r.n_pixels, -r.label))
    length = largest.major_axis_mm
    if length <= ITC_MAX_MM:
        return SlideLabel.ITC
    if length <= MICRO_MAX_MM:
        return SlideLabel.Micro
    return SlideLabel.Macro


def pn_stage(labels: list[SlideLabel], count_itc_as_node: bool = False) -> PNStage:
    """Patient stage from exactly five slide labels.

    ITC slides do not count toward the pN1/pN2 node count unless
    `count_itc_as_node` (the alternative reading) is enabled.
    """
    if len(labels) != 5:
        raise ValueError(f"expected 5 slide labels, got {len(labels)}")
    labels = [SlideLabel(l) for l in labels]
    floor = SlideLabel.ITC if count_itc_as_node else SlideLabel.Micro
    n = sum(1 for l in labels if l >= floor)
    any_macro = any(l == SlideLabel.Macro for l in labels)
    any_itc = any(l == SlideLabel.ITC for l in labels)
    if all(l == SlideLabel.Negative for l in labels):
        return PNStage.pN0
    if n == 0:
        return PNStage.pN0i_plus if any_itc else PNStage.pN0
    if not any_macro:
        return PNStage.pN1mi
    return PNStage.pN1 if n <= 3 else PNStage.pN2


@dataclass
class Dataset:
    """Feature rows with integer class labels."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError("X must be (n, d) with one label per row")

    def __len__(self) -> int:
        return len(self.y)

    def class_counts(self) -> dict[int, int]:
        classes, counts = np.unique(self.y, return_counts=True)
        return dict(zip(classes.tolist(), counts.tolist()))


@dataclass
class _Tree:
    # parallel node arrays; children < 0 mark leaves
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    counts: list[list[int]] = field(default_factory=list)

    def add_node(self) -> int:
        for arr, empty in ((self.feature, -1), (self.threshold, 0.0),
                           (self.left, -1), (self.right, -1), (self.counts, [])):
            arr.append(empty)
        return len(self.feature) - 1

    def predict_counts(self, x: np.ndarray) -> np.ndarray:
        node = 0
        while self.left[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] \
                else self.right[node]
        return np.asarray(self.counts[node])


def _gini_best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray,
                     n_classes: int) -> tuple[int, float, float] | None:
    """Best (feature, threshold, gain) by Gini over candidate midpoints."""
    n = len(y)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    gini_parent = 1.0 - ((total / n) ** 2).sum()
    best: tuple[int, float, float] | None = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        prefix = np.cumsum(onehot[order], axis=0)
        # split after position i (1-based size of the left side)
        cut = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(cut) == 0:
            continue
        nl = (cut + 1).astype(np.float64)
        nr = n - nl
        lc = prefix[cut]
        rc = total - lc
        gini_l = 1.0 - ((lc / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((rc / nr[:, None]) ** 2).sum(axis=1)
        gain = gini_parent - (nl / n) * gini_l - (nr / n) * gini_r
        i = int(np.argmax(gain))
        if gain[i] > 1e-12 and (best is None or gain[i] > best[2]):
            thr = (xs[cut[i]] + xs[cut[i] + 1]) / 2.0
            best = (int(f), float(thr), float(gain[i]))
    return best


def _grow(tree: _Tree, X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
          m: int, n_classes: int) -> int:
    node = tree.add_node()
    counts = np.bincount(y, minlength=n_classes)
    tree.counts[node] = counts.tolist()
    if len(y) < 2 or counts.max() == len(y):
        return node
    features = rng.choice(X.shape[1], size=m, replace=False)
    split = _gini_best_split(X, y, features, n_classes)
    if split is None:
        return node
    f, thr, _ = split
    tree.feature[node] = f
    tree.threshold[node] = thr
    go_left = X[:, f] <= thr
    tree.left[node] = _grow(tree, X[go_left], y[go_left], rng, m, n_classes)
    tree.right[node] = _grow(tree, X[~go_left], y[~go_left], rng, m, n_classes)
    return node


@dataclass
class Forest:
    trees: list[_Tree]
    n_classes: int
    features_per_split: int
    seed: int


def rf_train(data: Dataset, n_trees: int = 100,
             features_per_split: int | None = None, seed: int = 0,
             bootstrap: bool = True) -> Forest:
    """Fit a random forest: per-tree bootstrap, per-node seeded feature
    subsets, Gini splits, growth until purity or fewer than two samples."""
    counts = data.class_counts()
    if len(counts) < 2:
        raise ValueError("training data must contain at least two classes")
    n_classes = int(data.y.max()) + 1
    d = data.X.shape[1]
    m = features_per_split or max(1, int(np.sqrt(d)))
    m = min(m, d)
    trees = []
    n = len(data)
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        tree = _Tree()
        _grow(tree, data.X[idx], data.y[idx], rng, m, n_classes)
        trees.append(tree)
    return Forest(trees, n_classes, m, seed)


def _argmax_tie_high(counts: np.ndarray) -> int:
    best = counts.max()
    return int(np.nonzero(counts == best)[0].max())


def rf_predict(forest: Forest, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Majority vote over trees; ties resolve to the higher class."""
    x = np.asarray(x, dtype=np.float64)
    votes = np.zeros(forest.n_classes, dtype=np.int64)
    for tree in forest.trees:
        votes[_argmax_tie_high(tree.predict_counts(x))] += 1
    return _argmax_tie_high(votes), votes


def rf_predict_many(forest: Forest, X: np.ndarray) -> np.ndarray:
    return np.array([rf_predict(forest, row)[0] for row in np.asarray(X)])


def ensemble_classify(forests: list[Forest], x: np.ndarray) -> int:
    """Majority over forest predictions; ties go to the higher category."""
    if not forests:
        raise ValueError("need at least one forest")
    n_classes = max(f.n_classes for f in forests)
    votes = np.zeros(n_classes, dtype=np.int64)
    for forest in forests:
        votes[rf_predict(forest, x)[0]] += 1
    return _argmax_tie_high(votes)


def smote(data: Dataset, k_neighbors: int = 5,
          target_counts: dict[int, int] | None = None,
          seed: int = 0) -> Dataset:
    """Oversample minority classes by interpolating toward same-class
    nearest neighbours: x + u * (x_nn - x), u ~ U(0, 1)."""
    counts = data.class_counts()
    if target_counts is None:
        top = max(counts.values())
        target_counts = {c: top for c in counts}
    rng = np.random.default_rng(seed)
    new_X, new_y = [data.X], [data.y]
    for c in sorted(counts):
        need = target_counts.get(c, counts[c]) - counts[c]
        if need <= 0:
            continue
        Xc = data.X[data.y == c]
        if len(Xc) < 2:
            raise ValueError(f"class {c} has {len(Xc)} sample(s); cannot interpolate")
        dist = np.linalg.norm(Xc[:, None, :] - Xc[None, :, :], axis=2)
        np.fill_diagonal(dist, np.inf)
        k = min(k_neighbors, len(Xc) - 1)
        nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
        base = rng.integers(0, len(Xc), size=need)
        pick = rng.integers(0, k, size=need)
        u = rng.uniform(0.0, 1.0, size=need)
        x0 = Xc[base]
        x1 = Xc[nn[base, pick]]
        new_X.append(x0 + u[:, None] * (x1 - x0))
        new_y.append(np.full(need, c, dtype=np.int64))
    return Dataset(np.concatenate(new_X), np.concatenate(new_y))


def tomek_links(data: Dataset) -> list[tuple[int, int]]:
    """Cross-class mutual-nearest-neighbour pairs (a < b)."""
    dist = np.linalg.norm(data.X[:, None, :] - data.X[None, :, :], axis=2)
    np.fill_diagonal(dist, np.inf)
    nn = np.argmin(dist, axis=1)  # ties: lowest index, numpy's argmin rule
    links = []
    for a in range(len(data)):
        b = int(nn[a])
        if a < b and int(nn[b]) == a and data.y[a] != data.y[b]:
            links.append((a, b))
    return links


def tomek_remove(data: Dataset, majority_only: bool = False) -> Dataset:
    """Drop Tomek links; by default both members of each link go."""
    if len(data.class_counts()) < 2:
        raise ValueError("need at least two classes")
    links = tomek_links(data)
    drop = set()
    counts = data.class_counts()
    for a, b in links:
        if majority_only:
            drop.add(a if counts[int(data.y[a])] >= counts[int(data.y[b])] else b)
        else:
            drop.update((a, b))
    keep = np.array([i for i in range(len(data)) if i not in drop], dtype=np.int64)
    return Dataset(data.X[keep], data.y[keep])


def smote_tomek(data: Dataset, k_neighbors: int = 5,
                target_counts: dict[int, int] | None = None, seed: int = 0,
                majority_only: bool = False) -> Dataset:
    """SMOTE then Tomek-link removal, in that order."""
    return tomek_remove(smote(data, k_neighbors, target_counts, seed),
                        majority_only=majority_only)


def save_forest(forest: Forest, path: str | Path) -> None:
    payload = {
        "n_classes": forest.n_classes,
        "features_per_split": forest.features_per_split,
        "seed": forest.seed,
        "trees": [{"feature": t.feature, "threshold": t.threshold,
                   "left": t.left, "right": t.right, "counts": t.counts}
                  for t in forest.trees],
    }
    Path(path).write_text(json.dumps(payload))


def load_forest(path: str | Path) -> Forest:
    payload = json.loads(Path(path).read_text())
    trees = [_Tree(t["feature"], t["threshold"], t["left"], t["right"], t["counts"])
             for t in payload["trees"]]
    return Forest(trees, payload["n_classes"], payload["features_per_split"],
                  payload["seed"])
