"""Automated variable selection.

Three stages run in order: manual exclusion, a factor-analysis communality
filter, and pruning of highly correlated pairs on a minimum spanning tree
of the correlation graph.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SpatialDataset
from .errors import DataError, DegenerateVariableError, SchemaError

log = logging.getLogger(__name__)

# absolute slack for floating-point comparisons against the Kaiser cutoff and
# the mean communality
COMPARE_ATOL = 1e-10


def correlation_matrix(dataset) -> np.ndarray:
    """Pearson correlation between the dataset's variables."""
    X = dataset.features if isinstance(dataset, SpatialDataset) else np.asarray(dataset, float)
    names = getattr(dataset, "variable_names", None)
    if X.shape[0] < 2:
        raise DataError("correlation needs at least two units")
    Z = X - X.mean(axis=0)
    ss = np.sqrt(np.einsum("ij,ij->j", Z, Z))
    zero = np.flatnonzero(ss == 0)
    if zero.size:
        j = int(zero[0])
        raise DegenerateVariableError(
            f"variable {names[j] if names else j!r} has zero variance")
    Z = Z / ss
    R = Z.T @ Z
    R = (R + R.T) / 2
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


@dataclass
class FactorModel:
    eigenvalues: np.ndarray
    n_factors: int
    loadings: np.ndarray
    communalities: np.ndarray
    mean_communality: float
    converged: bool
    n_iter: int
    heywood: list[int] = field(default_factory=list)


def _initial_communalities(R: np.ndarray) -> np.ndarray:
    """Squared multiple correlations, or max |r| per row when R is singular."""
    off = np.abs(R - np.eye(len(R))).max(axis=1)
    try:
        if np.linalg.cond(R) > 1e12:
            raise np.linalg.LinAlgError
        smc = 1.0 - 1.0 / np.diag(np.linalg.inv(R))
    except np.linalg.LinAlgError:
        log.info("singular correlation matrix; using max |r| as initial communalities")
        return off
    if not np.all(np.isfinite(smc)):
        return off
    return np.clip(smc, 0.0, 1.0)


def principal_axis(R: np.ndarray, n_factors: int, max_iter: int = 100, tol: float = 1e-4):
    """Iterated principal-axis factoring of a correlation matrix.

    Returns ``(loadings, communalities, converged, n_iter)``.
    """
    h2 = _initial_communalities(R)
    converged = False
    n_iter = 0
    loadings = np.zeros((len(R), n_factors))
    for n_iter in range(1, max_iter + 1):
        reduced = R.copy()
        np.fill_diagonal(reduced, h2)
        vals, vecs = np.linalg.eigh(reduced)
        order = np.argsort(vals)[::-1][:n_factors]
        vals, vecs = vals[order], vecs[:, order]
        loadings = vecs * np.sqrt(np.clip(vals, 0.0, None))
        new = np.sum(loadings ** 2, axis=1)
        change = np.max(np.abs(new - h2))
        h2 = new
        if change < tol:
            converged = True
            break
    # column signs are arbitrary; fix them so the largest loading is positive
    flip = np.sign(loadings[np.abs(loadings).argmax(axis=0), np.arange(n_factors)])
    loadings = loadings * np.where(flip == 0, 1.0, flip)
    return loadings, h2, converged, n_iter


def fit_factor_model(dataset, max_iter: int = 100, tol: float = 1e-4) -> FactorModel:
    """Factor model with the number of factors set by Kaiser's criterion.

    ``dataset`` is a SpatialDataset or an ``(n, p)`` data array. See
    :func:`factor_model_from_corr` for the estimator.
    """
    X = dataset.features if isinstance(dataset, SpatialDataset) else np.asarray(dataset, float)
    n, p = X.shape
    if p < 2:
        raise DataError("factor analysis needs at least two variables")
    if n <= p:
        warnings.warn(f"{n} units for {p} variables; factor solution may be unstable",
                      stacklevel=2)
    return factor_model_from_corr(correlation_matrix(dataset), max_iter, tol)


def factor_model_from_corr(R: np.ndarray, max_iter: int = 100, tol: float = 1e-4) -> FactorModel:
    """Retain factors for eigenvalues >= 1 of R, estimate loadings by
    iterated principal-axis factoring (no rotation)."""
    R = np.asarray(R, dtype=float)
    eigenvalues = np.sort(np.linalg.eigvalsh(R))[::-1]
    n_factors = max(1, int(np.sum(eigenvalues >= 1.0 - COMPARE_ATOL)))
    loadings, h2, converged, n_iter = principal_axis(R, n_factors, max_iter, tol)
    if not converged:
        warnings.warn(f"principal-axis factoring did not converge in {max_iter} iterations",
                      stacklevel=2)
    heywood = [int(j) for j in np.flatnonzero(h2 > 1 + 1e-8)]
    if heywood:
        warnings.warn(f"Heywood case for variables {heywood}; communalities clipped to 1",
                      stacklevel=2)
        # shrink the offending rows so communality stays the row sum of squares
        loadings = loadings.copy()
        loadings[heywood] /= np.sqrt(h2[heywood])[:, None]
        h2 = np.minimum(h2, 1.0)
    return FactorModel(eigenvalues=eigenvalues, n_factors=n_factors, loadings=loadings,
                       communalities=h2, mean_communality=float(np.mean(h2)),
                       converged=converged, n_iter=n_iter, heywood=heywood)


def communality_filter(model: FactorModel, variables: Sequence[str]):
    """Drop variables whose communality is below the mean communality.

    Returns ``(kept, removed)`` name lists in input order.
    """
    if len(variables) != len(model.communalities):
        raise SchemaError("variable count does not match the factor model")
    kept, removed = [], []
    for name, c in zip(variables, model.communalities):
        (removed if c < model.mean_communality - COMPARE_ATOL else kept).append(name)
    return kept, removed


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def minimum_spanning_tree(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Kruskal MST of a complete graph given a symmetric weight matrix.

    Equal weights are taken in lexicographic order of the index pair.
    """
    p = len(weights)
    edges = sorted((weights[i, j], i, j) for i in range(p) for j in range(i + 1, p))
    ds = _DisjointSet(p)
    tree = []
    for w, i, j in edges:
        if ds.union(i, j):
            tree.append((i, j, float(w)))
            if len(tree) == p - 1:
                break
    return tree


@dataclass
class PruneResult:
    mst_edges: list[tuple[str, str, float]]
    high_corr_pairs: list[tuple[str, str, float]]
    removed: list[dict]
    retained: list[str]


def mst_prune(corr: np.ndarray, variables: Sequence[str], threshold: float = 0.75) -> PruneResult:
    """Remove the less connected member of each highly correlated pair.

    The tree is built on edge weights ``1 - |r|``; connectivity is a node's
    degree in it. Pairs with ``|r| >= threshold`` are visited in descending
    ``|r|`` and skipped once either member is gone. Degree ties remove the
    variable with the larger mean absolute correlation to the others, then
    the one with the larger index.
    """
    variables = list(variables)
    p = len(variables)
    A = np.abs(np.asarray(corr, dtype=float))
    tree = minimum_spanning_tree(1.0 - A)
    degree = np.zeros(p, dtype=int)
    for i, j, _ in tree:
        degree[i] += 1
        degree[j] += 1
    off = A - np.diag(np.diag(A))
    mean_abs = off.sum(axis=1) / max(p - 1, 1)

    pairs = [(A[i, j], i, j) for i in range(p) for j in range(i + 1, p) if A[i, j] >= threshold]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))

    alive = np.ones(p, dtype=bool)
    removed = []
    for r, i, j in pairs:
        if not (alive[i] and alive[j]):
            continue
        if degree[i] != degree[j]:
            drop, keep, rule = (i, j, "degree") if degree[i] < degree[j] else (j, i, "degree")
        elif mean_abs[i] != mean_abs[j]:
            drop, keep = (i, j) if mean_abs[i] > mean_abs[j] else (j, i)
            rule = "mean_abs_corr"
        else:
            drop, keep, rule = j, i, "index"
        alive[drop] = False
        removed.append({
            "variable": variables[drop],
            "partner": variables[keep],
            "abs_r": float(r),
            "degree": int(degree[drop]),
            "partner_degree": int(degree[keep]),
            "rule": rule,
        })
    return PruneResult(
        mst_edges=[(variables[i], variables[j], float(A[i, j])) for i, j, _ in tree],
        high_corr_pairs=[(variables[i], variables[j], float(r)) for r, i, j in pairs],
        removed=removed,
        retained=[v for v, a in zip(variables, alive) if a],
    )


@dataclass
class SelectionTrace:
    input_variables: list[str]
    excluded: list[str]
    eigenvalues: list[float]
    n_factors: int
    communalities: dict[str, float]
    mean_communality: float
    factor_converged: bool
    stage1_removed: dict[str, float]
    mst_edges: list[tuple[str, str, float]]
    high_corr_pairs: list[tuple[str, str, float]]
    stage2_removed: list[dict]
    retained_variables: list[str]
    threshold: float = 0.75

    def to_dict(self) -> dict:
        return {
            "input_variables": list(self.input_variables),
            "excluded": list(self.excluded),
            "factor_analysis": {
                "eigenvalues": [float(v) for v in self.eigenvalues],
                "n_factors": int(self.n_factors),
                "converged": bool(self.factor_converged),
                "communalities": {k: float(v) for k, v in self.communalities.items()},
                "mean_communality": float(self.mean_communality),
            },
            "stage1_removed": [
                {"variable": k, "communality": float(v), "reason": "below_mean_communality"}
                for k, v in self.stage1_removed.items()
            ],
            "mst": {
                "threshold": float(self.threshold),
                "edges": [{"a": a, "b": b, "abs_r": float(r)} for a, b, r in self.mst_edges],
                "high_corr_pairs": [{"a": a, "b": b, "abs_r": float(r)}
                                    for a, b, r in self.high_corr_pairs],
            },
            "stage2_removed": [dict(r) for r in self.stage2_removed],
            "retained_variables": list(self.retained_variables),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionTrace":
        fa, mst = d["factor_analysis"], d["mst"]
        return cls(
            input_variables=list(d["input_variables"]),
            excluded=list(d["excluded"]),
            eigenvalues=list(fa["eigenvalues"]),
            n_factors=int(fa["n_factors"]),
            communalities=dict(fa["communalities"]),
            mean_communality=float(fa["mean_communality"]),
            factor_converged=bool(fa["converged"]),
            stage1_removed={r["variable"]: r["communality"] for r in d["stage1_removed"]},
            mst_edges=[(e["a"], e["b"], e["abs_r"]) for e in mst["edges"]],
            high_corr_pairs=[(e["a"], e["b"], e["abs_r"]) for e in mst["high_corr_pairs"]],
            stage2_removed=list(d["stage2_removed"]),
            retained_variables=list(d["retained_variables"]),
            threshold=float(mst["threshold"]),
        )


TRACE_SCHEMA = {
    "type": "object",
    "required": ["input_variables", "excluded", "factor_analysis", "stage1_removed",
                 "mst", "stage2_removed", "retained_variables"],
    "properties": {
        "input_variables": {"type": "array", "items": {"type": "string"}},
        "excluded": {"type": "array", "items": {"type": "string"}},
        "factor_analysis": {
            "type": "object",
            "required": ["eigenvalues", "n_factors", "communalities", "mean_communality"],
        },
        "stage1_removed": {"type": "array"},
        "mst": {"type": "object", "required": ["threshold", "edges", "high_corr_pairs"]},
        "stage2_removed": {"type": "array"},
        "retained_variables": {"type": "array", "items": {"type": "string"}},
    },
}


def select_variables(dataset: SpatialDataset, exclusions: Sequence[str] = (),
                     threshold: float = 0.75) -> SelectionTrace:
    """Run exclusion, communality filtering and MST pruning in sequence."""
    if not dataset.standardized:
        raise DataError("variable selection expects a standardized dataset")
    names = list(dataset.variable_names)
    unknown = [v for v in exclusions if v not in names]
    if unknown:
        raise SchemaError(f"cannot exclude unknown variables: {unknown}")
    stage0 = [v for v in names if v not in set(exclusions)]
    ds = dataset.select_variables(stage0)

    model = fit_factor_model(ds)
    kept, removed = communality_filter(model, stage0)
    h2 = dict(zip(stage0, model.communalities))

    if len(kept) >= 2:
        R = correlation_matrix(ds.select_variables(kept))
        pruned = mst_prune(R, kept, threshold)
    else:
        pruned = PruneResult([], [], [], list(kept))

    return SelectionTrace(
        input_variables=names,
        excluded=[v for v in names if v in set(exclusions)],
        eigenvalues=model.eigenvalues.tolist(),
        n_factors=model.n_factors,
        communalities={k: float(v) for k, v in h2.items()},
        mean_communality=model.mean_communality,
        factor_converged=model.converged,
        stage1_removed={v: float(h2[v]) for v in removed},
        mst_edges=pruned.mst_edges,
        high_corr_pairs=pruned.high_corr_pairs,
        stage2_removed=pruned.removed,
        retained_variables=pruned.retained,
        threshold=threshold,
    )
