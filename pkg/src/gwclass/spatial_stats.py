"""Getis-Ord global G and local G* with permutation inference."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import SpatialDataset, fmt_float
from .errors import ConfigError, DataError, DegenerateFieldError
from .kernels import NeighborGraph

# permutations are drawn in blocks, each from its own derived seed
PERM_BLOCK = 128


def _check_values(values, graph: NeighborGraph) -> np.ndarray:
    x = np.asarray(values, dtype=float).reshape(-1)
    if len(x) != graph.n_focal or graph.n_reference != graph.n_focal:
        raise DataError(f"{len(x)} values for a graph over {graph.n_focal} units")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise DataError("values must be finite and non-negative")
    if np.all(x == x[0]):
        raise DegenerateFieldError("values are constant; the statistic is undefined")
    return x


def _block_rngs(seed: int, n_perm: int):
    for b, start in enumerate(range(0, n_perm, PERM_BLOCK)):
        yield np.random.default_rng([int(seed), b]), min(PERM_BLOCK, n_perm - start)


@dataclass(frozen=True)
class GResult:
    g_observed: float
    g_expected: float
    z_score: float
    p_value: float
    n_permutations: int
    permutation_mean: float
    permutation_sd: float

    def to_dict(self) -> dict:
        return {
            "g_observed": self.g_observed,
            "g_expected": self.g_expected,
            "z_score": self.z_score,
            "p_value": self.p_value,
            "n_permutations": self.n_permutations,
            "permutation_mean": self.permutation_mean,
            "permutation_sd": self.permutation_sd,
        }


def global_g(values, graph: NeighborGraph, n_perm: int = 999, seed: int = 0) -> GResult:
    """Global G = sum_ij w_ij x_i x_j / sum_ij x_i x_j over i != j.

    The pseudo p-value is one-sided (clustering of high values):
    ``(#{G_perm >= G} + 1) / (n_perm + 1)``.
    """
    x = _check_values(values, graph)
    if n_perm < 1:
        raise ConfigError("n_perm must be >= 1")
    n = len(x)
    W = graph.to_sparse().tocsr()
    W.setdiag(0)
    W.eliminate_zeros()
    denom = x.sum() ** 2 - np.sum(x * x)
    g = float(x @ (W @ x)) / denom
    g_exp = float(W.sum()) / (n * (n - 1))

    sims = []
    for rng, size in _block_rngs(seed, n_perm):
        perm = np.stack([rng.permutation(x) for _ in range(size)], axis=1)
        sims.append(np.sum(perm * (W @ perm), axis=0) / denom)
    sims = np.concatenate(sims)
    tol = 1e-12 * max(abs(g), 1e-300)
    larger = int(np.sum(sims >= g - tol))
    mean, sd = float(sims.mean()), float(sims.std(ddof=1)) if n_perm > 1 else 0.0
    z = (g - mean) / sd if sd > 0 else 0.0
    return GResult(g, g_exp, float(z), (larger + 1) / (n_perm + 1), n_perm, mean, sd)


def global_g_statistic(values, graph: NeighborGraph) -> float:
    """Observed global G without inference."""
    x = _check_values(values, graph)
    W = graph.to_sparse().tocsr()
    W.setdiag(0)
    return float(x @ (W @ x)) / (x.sum() ** 2 - np.sum(x * x))


@dataclass(frozen=True, eq=False)
class LocalGResult:
    g_star: np.ndarray
    z_score: np.ndarray
    p_value: np.ndarray
    hotspot: np.ndarray
    significance: float
    correction: str
    n_permutations: int

    @property
    def n_hotspots(self) -> int:
        return int(self.hotspot.sum())

    def write_csv(self, path, unit_ids) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["unit_id", "g_star", "z", "p", "flag"])
            for i, uid in enumerate(unit_ids):
                writer.writerow([uid, fmt_float(self.g_star[i]), fmt_float(self.z_score[i]),
                                 fmt_float(self.p_value[i]), int(self.hotspot[i])])


def local_g_star_statistic(values, graph: NeighborGraph) -> np.ndarray:
    """G*_i = (x_i + sum_j w_ij x_j) / sum_j x_j with binary weights."""
    x = np.asarray(values, dtype=float)
    W = graph.to_sparse().tocsr()
    W.setdiag(0)
    return (x + W @ x) / x.sum()


def local_g_star(values, graph: NeighborGraph, n_perm: int = 999, seed: int = 0,
                 significance: float = 0.05, correction: str = "none") -> LocalGResult:
    """Local G* with conditional-permutation pseudo p-values.

    Each unit keeps its own value while its neighbours' values are drawn
    from the remaining units. The same random draws are shared by all
    units. P-values are folded (the tail the observation falls in); a unit
    is a hotspot when its z-score is positive and ``p < significance``
    (divided by n under Bonferroni).
    """
    x = _check_values(values, graph)
    if correction not in ("none", "bonferroni"):
        raise ConfigError("correction must be 'none' or 'bonferroni'")
    n = len(x)
    total = x.sum()
    W = graph.to_sparse().tocsr()
    W.setdiag(0)
    W.eliminate_zeros()
    obs = (x + W @ x) / total
    k = np.diff(W.indptr)
    k_max = int(k.max()) if n else 0

    draws = []
    for rng, size in _block_rngs(seed, n_perm):
        draws.extend(rng.choice(n - 1, size=k_max, replace=False) for _ in range(size))
    R = np.array(draws, dtype=np.int64).reshape(n_perm, k_max)

    p = np.ones(n)
    z = np.zeros(n)
    for i in range(n):
        ki = k[i]
        if ki == 0:
            continue
        idx = R[:, :ki]
        idx = idx + (idx >= i)
        sims = (x[i] + x[idx].sum(axis=1)) / total
        larger = np.sum(sims >= obs[i] - 1e-12 * abs(obs[i]))
        if n_perm - larger < larger:
            larger = n_perm - larger
        p[i] = (larger + 1) / (n_perm + 1)
        sd = sims.std(ddof=1) if n_perm > 1 else 0.0
        z[i] = (obs[i] - sims.mean()) / sd if sd > 0 else 0.0
    level = significance / n if correction == "bonferroni" else significance
    flags = (z > 0) & (p < level)
    return LocalGResult(obs, z, p, flags, significance, correction, n_perm)


def error_surface(predictions, dataset: SpatialDataset) -> np.ndarray:
    """1 where the predicted class differs from the unit's label, else 0."""
    pred = np.asarray(predictions).reshape(-1)
    if dataset.labels is None:
        raise DataError("dataset has no labels")
    if len(pred) != dataset.n_units:
        raise DataError(f"{len(pred)} predictions for {dataset.n_units} units")
    return (pred != dataset.labels).astype(np.int64)
