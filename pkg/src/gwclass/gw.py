"""Geographically weighted one-vs-rest classification.

For a target class, every focal unit gets its own binary model fitted on
its kernel-weighted neighbours (never including itself), and the model's
positive-class probability at the focal unit is kept as an out-of-sample
prediction. Neighbourhoods with too few positives are skipped and receive
a fallback probability instead.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import SpatialDataset, fmt_float
from .errors import (
    BandwidthError,
    ConfigError,
    DegenerateLabelsError,
    LearnerMismatchError,
)
from .forest import ForestParams, derive_seed, fit_forest, predict_forest
from .kernels import KernelSpec, NeighborGraph, check_graph, neighborhood_graph
from .linear import (
    DEFAULT_L2,
    LogisticModel,
    add_intercept,
    fit_binary_logistic,
    irls_batch,
    predict_proba,
)

LEARNERS = ("logistic", "forest")
FALLBACKS = ("prior_rate", "global_model")

# focal units per work item; fixed so results never depend on the worker count
CHUNK = 128


@dataclass(frozen=True)
class GwFitSpec:
    learner: str = "logistic"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    target_class: int = 0
    min_positive: int = 5
    fallback: str = "prior_rate"
    l2_lambda: float = DEFAULT_L2
    forest: ForestParams = field(default_factory=ForestParams)
    threshold: float = 0.5
    keep_forests: bool = False

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.fallback not in FALLBACKS:
            raise ConfigError(f"unknown fallback {self.fallback!r}; choose from {FALLBACKS}")
        if self.min_positive < 1:
            raise ConfigError("min_positive must be >= 1")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be non-negative")


@dataclass(frozen=True, eq=False)
class GwModelSet:
    """Per-focal-unit local fits for one class.

    ``skip_reason`` is empty for fitted units. For the logistic learner the
    local coefficients and intercepts are kept (NaN where skipped).
    """

    learner: str
    class_index: int
    unit_ids: tuple[str, ...]
    variable_names: tuple[str, ...]
    focal_probability: np.ndarray
    skip_reason: tuple[str, ...]
    bandwidths: np.ndarray
    n_neighbors: np.ndarray
    n_positive: np.ndarray
    converged: np.ndarray
    coefficients: np.ndarray | None = None
    intercepts: np.ndarray | None = None
    l2_lambda: float = DEFAULT_L2
    forests: list | None = None

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def skipped(self) -> np.ndarray:
        return np.array([bool(r) for r in self.skip_reason])

    @property
    def n_skipped(self) -> int:
        return int(self.skipped.sum())

    def skip_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.skip_reason:
            if r:
                out[r] = out.get(r, 0) + 1
        return dict(sorted(out.items()))

    def model(self, i: int):
        """The local model of unit ``i``, or None if it was skipped."""
        if self.skip_reason[i]:
            return None
        if self.learner == "logistic":
            return LogisticModel(self.coefficients[i].copy(), float(self.intercepts[i]),
                                 self.l2_lambda, bool(self.converged[i]), float("nan"))
        return None if self.forests is None else self.forests[i]

    def write_csv(self, path, class_name: str | None = None) -> None:
        header = ["unit_id", "class", "learner", "bandwidth", "n_neighbors", "n_positive",
                  "skipped", "skip_reason", "focal_probability", "converged"]
        if self.coefficients is not None:
            header += ["intercept"] + [f"coef_{v}" for v in self.variable_names]
        cname = class_name if class_name is not None else str(self.class_index)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i in range(self.n_units):
                row = [self.unit_ids[i], cname, self.learner, fmt_float(self.bandwidths[i]),
                       int(self.n_neighbors[i]), int(self.n_positive[i]),
                       int(bool(self.skip_reason[i])), self.skip_reason[i],
                       fmt_float(self.focal_probability[i]), int(self.converged[i])]
                if self.coefficients is not None:
                    vals = [self.intercepts[i], *self.coefficients[i]]
                    row += ["" if not np.isfinite(v) else fmt_float(v) for v in vals]
                writer.writerow(row)


def binary_target(labels: np.ndarray, target_class: int) -> np.ndarray:
    return (np.asarray(labels) == target_class).astype(np.int64)


def _global_probability(X_train, y_bin, X_query, l2):
    try:
        model = fit_binary_logistic(X_train, y_bin, None, max(l2, 1e-8))
    except DegenerateLabelsError:
        return np.full(len(X_query), float(y_bin.mean()))
    return predict_proba(model, X_query)[:, 1]


def _fit_chunk(units, X_train, y_bin, graph: NeighborGraph, X_query, spec: GwFitSpec,
               seed_keys, global_prob):
    """Fit the local models of the focal units in ``units``."""
    m = len(units)
    p = X_train.shape[1]
    counts = graph.counts[units]
    kmax = int(counts.max()) if m else 0
    idx = np.zeros((m, kmax), dtype=np.int64)
    w = np.zeros((m, kmax))
    for a, i in enumerate(units):
        s, e = graph.indptr[i], graph.indptr[i + 1]
        idx[a, :e - s] = graph.indices[s:e]
        w[a, :e - s] = graph.weights[s:e]
    yy = y_bin[idx].astype(float)
    live = w > 0
    n_pos = np.sum(live & (yy > 0), axis=1)
    n_neg = np.sum(live & (yy == 0), axis=1)

    wsum = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        prior = np.where(wsum > 0, np.sum(w * yy, axis=1) / wsum,
                         np.where(counts > 0, yy.sum(axis=1) / np.maximum(counts, 1),
                                  float(y_bin.mean())))
    fallback = global_prob[units] if spec.fallback == "global_model" else prior

    reason = np.full(m, "", dtype=object)
    reason[(n_pos + n_neg) < 2] = "insufficient_weight"
    reason[(reason == "") & (n_pos < spec.min_positive)] = "below_min_positive"
    reason[(reason == "") & (n_neg == 0)] = "degenerate_labels"

    prob = np.array(fallback, dtype=float)
    converged = np.zeros(m, dtype=bool)
    coef = intercept = None
    forests = [None] * m if spec.keep_forests and spec.learner == "forest" else None
    fit = np.flatnonzero(reason == "")

    if spec.learner == "logistic":
        coef = np.full((m, p), np.nan)
        intercept = np.full(m, np.nan)
        if fit.size:
            Xa = add_intercept(X_train[idx[fit]])
            beta, conv, _, singular = irls_batch(Xa, yy[fit], w[fit], spec.l2_lambda)
            ok = ~singular
            reason[fit[singular]] = "singular"
            good = fit[ok]
            beta = beta[ok]
            coef[good] = beta[:, 1:]
            intercept[good] = beta[:, 0]
            converged[good] = conv[ok]
            xq = X_query[units[good]]
            eta = beta[:, 0] + np.sum(xq * beta[:, 1:], axis=1)
            prob[good] = expit(eta)
    else:
        for a in fit:
            nb = idx[a, :counts[a]]
            params = replace(spec.forest, seed=derive_seed(spec.forest.seed, int(seed_keys[units[a]])))
            model = fit_forest(X_train[nb], y_bin[nb], w[a, :counts[a]], params, n_classes=2)
            prob[a] = predict_forest(model, X_query[units[a]:units[a] + 1])[0, 1]
            converged[a] = True
            if forests is not None:
                forests[a] = model
    return dict(units=units, prob=prob, reason=reason, n_pos=n_pos, counts=counts,
                converged=converged, coef=coef, intercept=intercept, forests=forests)


def fit_local(X_train, labels_train, graph: NeighborGraph, X_query, spec: GwFitSpec,
              workers: int = 1, seed_keys=None, query_ids=None,
              variable_names: Sequence[str] = ()) -> GwModelSet:
    """Fit one local model per query point on its graph neighbourhood.

    ``graph`` maps query points (focal units) to rows of ``X_train``.
    ``seed_keys`` are per-query integers that seed local forests.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_query = np.asarray(X_query, dtype=float)
    y_bin = binary_target(labels_train, spec.target_class)
    n_q = len(X_query)
    check_graph(graph, n_q, len(X_train))
    if seed_keys is None:
        seed_keys = np.arange(n_q)
    if query_ids is None:
        query_ids = tuple(str(i) for i in range(n_q))

    global_prob = np.zeros(n_q)
    if spec.fallback == "global_model":
        global_prob = _global_probability(X_train, y_bin, X_query, spec.l2_lambda)

    chunks = [np.arange(s, min(s + CHUNK, n_q)) for s in range(0, n_q, CHUNK)]
    args = (X_train, y_bin, graph, X_query, spec, seed_keys, global_prob)
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda u: _fit_chunk(u, *args), chunks))
    else:
        results = [_fit_chunk(u, *args) for u in chunks]

    p = X_train.shape[1]
    prob = np.zeros(n_q)
    reason = [""] * n_q
    n_pos = np.zeros(n_q, dtype=np.int64)
    n_nb = np.zeros(n_q, dtype=np.int64)
    converged = np.zeros(n_q, dtype=bool)
    coef = np.full((n_q, p), np.nan) if spec.learner == "logistic" else None
    icpt = np.full(n_q, np.nan) if spec.learner == "logistic" else None
    forests = [None] * n_q if spec.keep_forests and spec.learner == "forest" else None
    for r in results:
        u = r["units"]
        prob[u] = r["prob"]
        for a, i in enumerate(u):
            reason[i] = r["reason"][a]
            if forests is not None:
                forests[i] = r["forests"][a]
        n_pos[u] = r["n_pos"]
        n_nb[u] = r["counts"]
        converged[u] = r["converged"]
        if coef is not None:
            coef[u] = r["coef"]
            icpt[u] = r["intercept"]
    bw = graph.bandwidths if graph.bandwidths is not None else np.full(n_q, np.nan)
    return GwModelSet(
        learner=spec.learner, class_index=spec.target_class, unit_ids=tuple(query_ids),
        variable_names=tuple(variable_names), focal_probability=prob,
        skip_reason=tuple(reason), bandwidths=np.asarray(bw, dtype=float), n_neighbors=n_nb,
        n_positive=n_pos, converged=converged, coefficients=coef, intercepts=icpt,
        l2_lambda=spec.l2_lambda, forests=forests,
    )


def fit_gw(dataset: SpatialDataset, spec: GwFitSpec, graph: NeighborGraph | None = None,
           workers: int = 1) -> GwModelSet:
    """Fit the local models of every unit in ``dataset`` for one class."""
    if dataset.labels is None:
        raise ConfigError("dataset has no labels")
    if graph is None:
        graph = neighborhood_graph(dataset, spec.kernel)
    check_graph(graph, dataset.n_units, dataset.n_units)
    return fit_local(dataset.features, dataset.labels, graph, dataset.features, spec,
                     workers=workers, query_ids=dataset.ids,
                     variable_names=dataset.variable_names)


def fit_gw_at(train: SpatialDataset, query: SpatialDataset, spec: GwFitSpec,
              workers: int = 1, seed_keys=None) -> GwModelSet:
    """Local models centred on ``query`` units, fitted on ``train`` units only."""
    graph = neighborhood_graph(train, spec.kernel, query=query)
    return fit_local(train.features, train.labels, graph, query.features, spec,
                     workers=workers, seed_keys=seed_keys, query_ids=query.ids,
                     variable_names=train.variable_names)


def fit_one_vs_rest(dataset: SpatialDataset, specs: Sequence[GwFitSpec],
                    workers: int = 1) -> list[GwModelSet]:
    """One GW fit per class; ``specs[c]`` must target class ``c``."""
    if len(specs) != dataset.n_classes:
        raise ConfigError(f"{len(specs)} specs for {dataset.n_classes} classes")
    out = []
    for c, spec in enumerate(specs):
        if spec.target_class != c:
            raise ConfigError(f"spec {c} targets class {spec.target_class}")
        out.append(fit_gw(dataset, spec, workers=workers))
    return out


def cross_validated_probabilities(dataset: SpatialDataset, spec: GwFitSpec, folds,
                                  workers: int = 1):
    """Out-of-fold focal probabilities for one class.

    Test units are fitted on neighbourhoods drawn from the training units
    of their fold only. Returns ``(probabilities, skipped)`` in dataset order.
    """
    fold_of = np.asarray(folds.assignment if hasattr(folds, "assignment") else folds)
    prob = np.zeros(dataset.n_units)
    skipped = np.zeros(dataset.n_units, dtype=bool)
    for f in np.unique(fold_of):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        kernel = spec.kernel
        if kernel.adaptive and kernel.bandwidth > len(train):
            kernel = kernel.with_bandwidth(len(train))
        local_spec = replace(spec, kernel=kernel)
        res = fit_gw_at(dataset.subset(train), dataset.subset(test), local_spec,
                        workers=workers, seed_keys=test)
        prob[test] = res.focal_probability
        skipped[test] = res.skipped
    return prob, skipped


def default_candidates(n: int, p: int, count: int = 12) -> list[int]:
    """Geometrically spaced adaptive k from max(30, 5p) to n - 1."""
    lo, hi = max(30, 5 * p), n - 1
    if lo >= hi:
        return [hi]
    ks = np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))
    return [int(k) for k in ks]


@dataclass
class BandwidthSelection:
    best: float
    table: list[dict]

    def to_rows(self) -> list[dict]:
        return [dict(r) for r in self.table]


def select_bandwidth(dataset: SpatialDataset, spec: GwFitSpec, candidates: Sequence,
                     folds, workers: int = 1) -> BandwidthSelection:
    """Pick the bandwidth with the best cross-validated focal F1.

    Ties go to the smaller bandwidth. Every candidate's fold-averaged and
    pooled binary F1 are reported.
    """
    from .evaluation import binary_f1

    if len(candidates) < 2:
        raise ConfigError("bandwidth selection needs at least two candidates")
    fold_of = np.asarray(folds.assignment if hasattr(folds, "assignment") else folds)
    y = binary_target(dataset.labels, spec.target_class)
    table = []
    for pos, b in enumerate(candidates):
        s = replace(spec, kernel=spec.kernel.with_bandwidth(b))
        prob, skipped = cross_validated_probabilities(dataset, s, fold_of, workers)
        pred = (prob >= spec.threshold).astype(int)
        per_fold = [binary_f1(y[fold_of == f], pred[fold_of == f]) for f in np.unique(fold_of)]
        table.append({
            "candidate": pos,
            "bandwidth": float(s.kernel.bandwidth),
            "f1": float(np.mean(per_fold)),
            "f1_pooled": binary_f1(y, pred),
            "n_skipped": int(skipped.sum()),
            "all_skipped": bool(skipped.all()),
        })
    usable = [r for r in table if not r["all_skipped"]]
    if not usable:
        raise BandwidthError("every bandwidth candidate skipped every unit")
    best = max(usable, key=lambda r: (r["f1"], -r["bandwidth"], -r["candidate"]))
    for r in table:
        r["selected"] = r is best
    return BandwidthSelection(best=best["bandwidth"], table=table)


@dataclass(frozen=True, eq=False)
class CoefficientSurface:
    class_index: int
    variable_names: tuple[str, ...]
    unit_ids: tuple[str, ...]
    coefficients: np.ndarray
    mask: np.ndarray
    mean_abs: np.ndarray
    sd: np.ndarray
    sign_agreement: np.ndarray
    n_units: int

    def ordering(self) -> list[str]:
        """Variables by descending mean absolute coefficient."""
        order = sorted(range(len(self.variable_names)), key=lambda j: (-self.mean_abs[j], j))
        return [self.variable_names[j] for j in order]

    def summary(self) -> list[dict]:
        pos = {v: j for j, v in enumerate(self.variable_names)}
        return [{
            "variable": v,
            "mean_abs": float(self.mean_abs[pos[v]]),
            "sd": float(self.sd[pos[v]]),
            "sign_agreement": float(self.sign_agreement[pos[v]]),
            "n_units": int(self.n_units),
        } for v in self.ordering()]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["unit_id", *self.variable_names])
            for i, uid in enumerate(self.unit_ids):
                if self.mask[i]:
                    writer.writerow([uid, *(fmt_float(v) for v in self.coefficients[i])])
                else:
                    writer.writerow([uid, *([""] * len(self.variable_names))])


def extract_coefficients(models: GwModelSet, variable_names: Sequence[str] | None = None
                         ) -> CoefficientSurface:
    """Local coefficient surface with per-variable summaries over fitted units."""
    if models.learner != "logistic" or models.coefficients is None:
        raise LearnerMismatchError("coefficients exist only for the logistic learner")
    names = tuple(variable_names) if variable_names is not None else models.variable_names
    if len(names) != models.coefficients.shape[1]:
        raise ConfigError("variable name count does not match the coefficients")
    mask = ~models.skipped
    B = models.coefficients[mask]
    n = B.shape[0]
    if n:
        mean_abs = np.mean(np.abs(B), axis=0)
        sd = np.std(B, axis=0, ddof=1) if n > 1 else np.zeros(B.shape[1])
        agree = np.maximum(np.mean(B > 0, axis=0), np.mean(B < 0, axis=0))
    else:
        mean_abs = sd = agree = np.full(len(names), np.nan)
    return CoefficientSurface(models.class_index, names, models.unit_ids,
                              models.coefficients, mask, mean_abs, sd, agree, n)


def coefficient_dispersion_by_class(surfaces, class_names: Sequence[str] | None = None
                                    ) -> list[dict]:
    """Five-number summary of per-variable coefficient sds, one row per class."""
    if isinstance(surfaces, dict):
        class_names = list(surfaces)
        surfaces = list(surfaces.values())
    if not surfaces:
        raise ConfigError("no coefficient surfaces given")
    rows = []
    for k, s in enumerate(surfaces):
        name = class_names[k] if class_names is not None else str(s.class_index)
        sd = np.asarray(s.sd, dtype=float)
        sd = sd[np.isfinite(sd)]
        if sd.size:
            q = np.quantile(sd, [0.0, 0.25, 0.5, 0.75, 1.0])
        else:
            q = [math.nan] * 5
        rows.append({"class": name, "min": float(q[0]), "q1": float(q[1]),
                     "median": float(q[2]), "q3": float(q[3]), "max": float(q[4]),
                     "n_variables": int(sd.size), "n_units": int(s.n_units)})
    return rows
