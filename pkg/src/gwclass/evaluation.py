"""Spatial cross-validation and F1 scoring for global and GW models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import SpatialDataset
from .errors import ConfigError, DataError, DegenerateLabelsError, NumericalError
from .forest import ForestParams, fit_forest, predict_forest
from .gw import GwFitSpec, binary_target, cross_validated_probabilities
from .linear import DEFAULT_L2, fit_multinomial_logistic, predict_proba

log = logging.getLogger(__name__)

FOLD_METHODS = ("coordinate_clusters", "grid_blocks")
GLOBAL_MODELS = ("multinomial_lr", "forest")


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    assignment: np.ndarray
    n_folds: int
    method: str
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() >= self.n_folds):
            raise ConfigError("fold index out of range")
        if np.any(np.bincount(a, minlength=self.n_folds) == 0):
            raise ConfigError("every fold must be non-empty")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def test_index(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == f)

    def train_index(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != f)


def _kmeans_pp(xy, k, rng):
    n = len(xy)
    centers = np.empty((k, 2))
    centers[0] = xy[rng.integers(n)]
    d2 = np.sum((xy - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            return None
        j = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        centers[c] = xy[min(j, n - 1)]
        d2 = np.minimum(d2, np.sum((xy - centers[c]) ** 2, axis=1))
    return centers


def kmeans(xy, k: int, rng, max_iter: int = 100):
    """Lloyd's algorithm from k-means++ seeds; returns labels or None if a
    cluster ends up empty."""
    centers = _kmeans_pp(xy, k, rng)
    if centers is None:
        return None
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((xy[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        if np.any(counts == 0):
            return None
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centers[c] = xy[labels == c].mean(axis=0)
    return labels


def _relabel_by_first_unit(labels):
    # folds numbered in order of first appearance, independent of seeding order
    mapping = {}
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping)
    return np.array([mapping[lab] for lab in labels], dtype=np.int64)


def spatial_kfold(dataset, n_folds: int = 5, method: str = "coordinate_clusters",
                  seed: int = 0, tiles_per_side: int | None = None) -> FoldAssignment:
    """Spatially blocked folds.

    ``coordinate_clusters`` runs k-means on the coordinates (one cluster per
    fold, re-seeding up to 10 times on an empty cluster). ``grid_blocks``
    tiles the bounding box and deals non-empty tiles to folds round-robin.
    """
    xy = dataset.coords if isinstance(dataset, SpatialDataset) else np.asarray(dataset, float)
    n = len(xy)
    if n_folds < 2:
        raise ConfigError("need at least two folds")
    if n < n_folds:
        raise ConfigError(f"{n} units cannot fill {n_folds} folds")
    if method == "coordinate_clusters":
        rng = np.random.default_rng(seed)
        for _ in range(10):
            labels = kmeans(xy, n_folds, rng)
            if labels is not None:
                return FoldAssignment(_relabel_by_first_unit(labels), n_folds, method, seed)
        raise NumericalError("k-means left a fold empty after 10 re-seeds")
    if method == "grid_blocks":
        g = tiles_per_side or int(np.ceil(np.sqrt(4 * n_folds)))
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        cell = np.minimum((g * (xy - lo) / span).astype(int), g - 1)
        tile = cell[:, 1] * g + cell[:, 0]
        occupied = np.unique(tile)
        if len(occupied) < n_folds:
            raise ConfigError(f"only {len(occupied)} occupied tiles for {n_folds} folds")
        fold_of_tile = {t: k % n_folds for k, t in enumerate(occupied)}
        return FoldAssignment(np.array([fold_of_tile[t] for t in tile]), n_folds, method, seed)
    raise ConfigError(f"unknown fold method {method!r}; choose from {FOLD_METHODS}")


@dataclass
class ScoreReport:
    """Per-class precision/recall/F1 and their unweighted mean."""

    class_names: tuple[str, ...]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    absent: np.ndarray
    macro_f1: float
    descriptor: dict = field(default_factory=dict)
    per_fold: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": dict(self.descriptor),
            "macro_f1": float(self.macro_f1),
            "classes": [
                {"class": name, "precision": float(self.precision[c]),
                 "recall": float(self.recall[c]), "f1": float(self.f1[c]),
                 "support": int(self.support[c]), "absent": bool(self.absent[c])}
                for c, name in enumerate(self.class_names)
            ],
            "per_fold": list(self.per_fold),
            **{k: v for k, v in self.extra.items()},
        }


def f1_macro(y_true, y_pred, n_classes: int, class_names: Sequence[str] | None = None
             ) -> ScoreReport:
    """Per-class F1 and their unweighted mean over all ``n_classes``.

    Classes that never occur and are never predicted score 0 and are
    flagged as absent.
    """
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DataError(f"{len(y_true)} true labels but {len(y_pred)} predictions")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0
                        or max(y_true.max(), y_pred.max()) >= n_classes):
        raise DataError("label outside 0..n_classes-1")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0).astype(float)
    true_pos = cm.sum(axis=1).astype(float)
    precision = np.divide(tp, pred_pos, out=np.zeros(n_classes), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(n_classes), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    names = tuple(class_names) if class_names is not None else tuple(
        str(c) for c in range(n_classes))
    return ScoreReport(names, precision, recall, f1, true_pos.astype(np.int64),
                       (true_pos == 0) & (pred_pos == 0), float(f1.mean()))


def binary_f1(y_true, y_pred) -> float:
    """F1 of the positive class (label 1)."""
    return float(f1_macro(y_true, y_pred, 2).f1[1])


def _fit_predict_global(kind, X_tr, y_tr, X_te, n_classes, l2, forest_params, keys_tr):
    """Predict class labels for ``X_te``; classes absent from training are
    never predicted."""
    present = np.unique(y_tr)
    remap = np.full(n_classes, -1)
    remap[present] = np.arange(len(present))
    y_local = remap[y_tr]
    if len(present) < 2:
        return np.full(len(X_te), present[0])
    if kind == "multinomial_lr":
        model = fit_multinomial_logistic(X_tr, y_local, None, l2, n_classes=len(present))
        proba = predict_proba(model, X_te)
    elif kind == "forest":
        model = fit_forest(X_tr, y_local, None, forest_params, n_classes=len(present),
                           row_keys=keys_tr)
        proba = predict_forest(model, X_te)
    else:
        raise ConfigError(f"unknown global model {kind!r}; choose from {GLOBAL_MODELS}")
    return present[proba.argmax(axis=1)]


def evaluate_global(dataset: SpatialDataset, model_kind: str, folds: FoldAssignment,
                    l2_lambda: float = DEFAULT_L2,
                    forest_params: ForestParams = ForestParams()):
    """Spatially cross-validated global classifier.

    Every fold's units are predicted by a model trained on the other
    folds. The pooled out-of-fold predictions are scored once; per-fold
    scores are attached.

    Returns ``(report, predictions)``.
    """
    if dataset.labels is None:
        raise ConfigError("dataset has no labels")
    if len(folds.assignment) != dataset.n_units:
        raise ConfigError("fold assignment does not match the dataset")
    C = dataset.n_classes
    X, y = dataset.features, dataset.labels
    keys = np.asarray(dataset.ids)
    pred = np.zeros(dataset.n_units, dtype=np.int64)
    per_fold = []
    for f in range(folds.n_folds):
        te, tr = folds.test_index(f), folds.train_index(f)
        missing = sorted(set(range(C)) - set(np.unique(y[tr]).tolist()))
        if missing:
            log.warning("fold %d: classes %s absent from training", f, missing)
        pred[te] = _fit_predict_global(model_kind, X[tr], y[tr], X[te], C, l2_lambda,
                                       forest_params, keys[tr])
        rep = f1_macro(y[te], pred[te], C)
        per_fold.append({"fold": f, "n_test": int(len(te)), "macro_f1": rep.macro_f1,
                         "f1": rep.f1.tolist(),
                         "missing_training_classes": [dataset.class_names[c] for c in missing]})
    report = f1_macro(y, pred, C, dataset.class_names)
    report.descriptor = {"kind": model_kind, "scope": "global", "n_folds": folds.n_folds,
                         "fold_method": folds.method, "l2_lambda": l2_lambda}
    if model_kind == "forest":
        report.descriptor["forest"] = {"n_trees": forest_params.n_trees,
                                       "max_depth": forest_params.max_depth,
                                       "mtry": forest_params.mtry,
                                       "min_leaf_weight": forest_params.min_leaf_weight,
                                       "seed": forest_params.seed}
    report.per_fold = per_fold
    report.extra["fold_mean_macro_f1"] = float(np.mean([r["macro_f1"] for r in per_fold]))
    return report, pred


@dataclass
class GwClassScore:
    """Cross-validated focal-prediction scores for one class."""

    class_index: int
    class_name: str
    learner: str
    bandwidth: float
    f1_fold_mean: float
    f1_fold_sd: float
    f1_pooled: float
    f1_macro_binary: float
    fold_f1: list
    probabilities: np.ndarray
    skipped: np.ndarray
    evaluable: bool

    @property
    def f1(self) -> float:
        return self.f1_fold_mean

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "class_index": self.class_index,
            "learner": self.learner,
            "bandwidth": float(self.bandwidth),
            "f1": float(self.f1_fold_mean),
            "f1_fold_sd": float(self.f1_fold_sd),
            "f1_pooled": float(self.f1_pooled),
            "f1_macro_binary": float(self.f1_macro_binary),
            "fold_f1": [float(v) for v in self.fold_f1],
            "n_skipped": int(self.skipped.sum()),
            "evaluable": bool(self.evaluable),
        }


@dataclass
class GwEvaluation:
    classes: list[GwClassScore]
    combined: ScoreReport

    @property
    def mean_class_f1(self) -> float:
        return float(np.mean([c.f1 for c in self.classes]))

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "mean_class_f1": self.mean_class_f1,
            "combined": self.combined.to_dict(),
        }


def evaluate_gw_class(dataset: SpatialDataset, spec: GwFitSpec, folds: FoldAssignment,
                      workers: int = 1) -> GwClassScore:
    """Binary F1 of out-of-fold focal predictions for ``spec.target_class``."""
    c = spec.target_class
    y = binary_target(dataset.labels, c)
    prob, skipped = cross_validated_probabilities(dataset, spec, folds, workers)
    pred = (prob >= spec.threshold).astype(np.int64)
    fold_f1 = [binary_f1(y[folds.assignment == f], pred[folds.assignment == f])
               for f in range(folds.n_folds)]
    pooled = f1_macro(y, pred, 2)
    return GwClassScore(
        class_index=c, class_name=dataset.class_names[c], learner=spec.learner,
        bandwidth=float(spec.kernel.bandwidth), f1_fold_mean=float(np.mean(fold_f1)),
        f1_fold_sd=float(np.std(fold_f1, ddof=1)) if len(fold_f1) > 1 else 0.0,
        f1_pooled=float(pooled.f1[1]), f1_macro_binary=pooled.macro_f1, fold_f1=fold_f1,
        probabilities=prob, skipped=skipped, evaluable=not bool(skipped.all()),
    )


def evaluate_gw(dataset: SpatialDataset, specs: Sequence[GwFitSpec], folds: FoldAssignment,
                workers: int = 1) -> GwEvaluation:
    """Cross-validated GW scores for each class in ``specs``.

    Besides the per-class binary scores, the classes' focal probabilities
    are combined by argmax into a multiclass prediction scored like a
    global model (only meaningful when every class is evaluated).
    """
    if dataset.labels is None:
        raise ConfigError("dataset has no labels")
    scores = []
    for spec in specs:
        s = evaluate_gw_class(dataset, spec, folds, workers)
        if not s.evaluable:
            log.warning("class %s: every unit skipped; unevaluable", s.class_name)
        scores.append(s)
    C = dataset.n_classes
    P = np.zeros((dataset.n_units, C))
    for s in scores:
        P[:, s.class_index] = s.probabilities
    combined = f1_macro(dataset.labels, P.argmax(axis=1), C, dataset.class_names)
    combined.descriptor = {"kind": "gw_" + (specs[0].learner if specs else ""),
                           "scope": "one_vs_rest_argmax", "n_folds": folds.n_folds}
    return GwEvaluation(scores, combined)
