"""Neighbour graphs and distance-decay kernels.

Graphs are stored in compressed sparse row layout: the neighbours of focal
unit ``i`` are ``indices[indptr[i]:indptr[i + 1]]``, sorted by ascending
distance with ties going to the smaller unit index.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .data import SpatialDataset, fmt_float
from .errors import BandwidthError, ConfigError, DegenerateBandwidthError, IntegrityError

log = logging.getLogger(__name__)

SHAPES = ("bisquare", "gaussian", "tricube", "boxcar")
MODES = ("adaptive_k", "fixed_distance")

# fixed-distance gaussian kernels are truncated at this multiple of the bandwidth
GAUSSIAN_CUTOFF = 3.0


@dataclass(frozen=True)
class KernelSpec:
    shape: str = "bisquare"
    bandwidth_mode: str = "adaptive_k"
    bandwidth: float = 50

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown kernel shape {self.shape!r}; choose from {SHAPES}")
        if self.bandwidth_mode not in MODES:
            raise ConfigError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.adaptive:
            if float(self.bandwidth) != int(self.bandwidth) or int(self.bandwidth) < 2:
                raise ConfigError("adaptive bandwidth must be an integer >= 2")
            object.__setattr__(self, "bandwidth", int(self.bandwidth))
        elif not self.bandwidth > 0:
            raise ConfigError("fixed bandwidth must be positive")

    @property
    def adaptive(self) -> bool:
        return self.bandwidth_mode == "adaptive_k"

    def with_bandwidth(self, bandwidth) -> "KernelSpec":
        return replace(self, bandwidth=bandwidth)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    indptr: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    weights: np.ndarray
    symmetric: bool = False
    n_reference: int = 0
    bandwidths: np.ndarray | None = None
    kernel: KernelSpec | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_focal(self) -> int:
        return len(self.indptr) - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def neighbor_distances(self, i: int) -> np.ndarray:
        return self.distances[self.indptr[i]:self.indptr[i + 1]]

    def neighbor_weights(self, i: int) -> np.ndarray:
        return self.weights[self.indptr[i]:self.indptr[i + 1]]

    def to_sparse(self):
        from scipy.sparse import csr_matrix
        return csr_matrix((self.weights, self.indices, self.indptr),
                          shape=(self.n_focal, self.n_reference))


def _coords(obj) -> np.ndarray:
    if isinstance(obj, SpatialDataset):
        return obj.coords
    return np.asarray(obj, dtype=float).reshape(-1, 2)


def _pair_distances(query_xy, ref_xy, q, idx):
    d = ref_xy[idx] - query_xy[q][:, None, :] if idx.ndim == 2 else ref_xy[idx] - query_xy[q]
    return np.sqrt(np.sum(d * d, axis=-1))


def _sorted_rows(dist, idx):
    # lexsort: last key is primary
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(dist, order, -1), np.take_along_axis(idx, order, -1)


def knn_arrays(ref_xy, query_xy, k: int, exclude_self: bool):
    """k nearest reference points for every query point.

    With ``exclude_self`` the query set is the reference set and point ``i``
    never neighbours itself. Equal distances go to the smaller reference
    index. Returns ``(indices, distances)``, both ``(n_query, k)``.
    """
    ref_xy = np.asarray(ref_xy, dtype=float)
    query_xy = np.asarray(query_xy, dtype=float)
    n_ref, n_q = len(ref_xy), len(query_xy)
    available = n_ref - 1 if exclude_self else n_ref
    if k < 1 or k > available:
        raise BandwidthError(f"k={k} neighbours requested but only {available} available")
    tree = cKDTree(ref_xy)
    need = k + 1 if exclude_self else k
    m = min(need + 8, n_ref)
    _, cand = tree.query(query_xy, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(n_q, m)
    dist = _pair_distances(query_xy, ref_xy, np.arange(n_q), cand)
    if exclude_self:
        dist = np.where(cand == np.arange(n_q)[:, None], np.inf, dist)
    dist, cand = _sorted_rows(dist, cand)

    out_idx = cand[:, :k].copy()
    out_dist = dist[:, :k].copy()
    # rows whose k-th distance is not strictly below the worst candidate may
    # have ties just outside the candidate set; resolve them exactly
    worst = dist[:, -2] if exclude_self else dist[:, -1]
    if m < n_ref:
        suspicious = np.flatnonzero(out_dist[:, -1] >= worst)
    else:
        suspicious = np.array([], dtype=np.int64)
    for q in suspicious:
        r = out_dist[q, -1]
        ball = np.asarray(tree.query_ball_point(query_xy[q], r * (1 + 1e-9) + 1e-12),
                          dtype=np.int64)
        if exclude_self:
            ball = ball[ball != q]
        d = _pair_distances(query_xy, ref_xy, q, ball)
        d, ball = _sorted_rows(d, ball)
        out_idx[q] = ball[:k]
        out_dist[q] = d[:k]
    return out_idx, out_dist


def _from_dense(idx, dist, n_ref, symmetric=False, **meta) -> NeighborGraph:
    n, k = idx.shape
    return NeighborGraph(
        indptr=np.arange(0, n * k + 1, k, dtype=np.int64),
        indices=idx.reshape(-1),
        distances=dist.reshape(-1),
        weights=np.ones(n * k),
        symmetric=symmetric,
        n_reference=n_ref,
        metadata=dict(meta),
    )


def build_knn(dataset, k: int, query=None) -> NeighborGraph:
    """k-nearest-neighbour graph.

    Without ``query`` the focal units are the dataset's own units and self
    is excluded; otherwise each query point gets its k nearest dataset
    units.
    """
    ref = _coords(dataset)
    k = int(k)
    if query is None:
        idx, dist = knn_arrays(ref, ref, k, exclude_self=True)
    else:
        idx, dist = knn_arrays(ref, _coords(query), k, exclude_self=False)
    return _from_dense(idx, dist, len(ref), k=k)


def build_distance_band(dataset, d_max: float, query=None, include_self: bool = False) -> NeighborGraph:
    """Binary graph linking units with ``0 < distance <= d_max``.

    Coincident units (distance 0) are not linked. Isolated units are
    listed in ``metadata['isolates']`` with a warning.
    """
    if not d_max > 0:
        raise ConfigError("d_max must be positive")
    ref = _coords(dataset)
    q_xy = ref if query is None else _coords(query)
    tree = cKDTree(ref)
    balls = tree.query_ball_point(q_xy, d_max * (1 + 1e-12))
    indptr = [0]
    indices, distances = [], []
    for q, ball in enumerate(balls):
        ball = np.asarray(ball, dtype=np.int64)
        d = _pair_distances(q_xy, ref, q, ball) if ball.size else np.empty(0)
        keep = (d <= d_max) & (d > 0)
        if include_self and query is None:
            keep |= ball == q
        ball, d = ball[keep], d[keep]
        d, ball = _sorted_rows(d, ball)
        indices.append(ball)
        distances.append(d)
        indptr.append(indptr[-1] + len(ball))
    indices = np.concatenate(indices) if indices else np.empty(0, dtype=np.int64)
    distances = np.concatenate(distances) if distances else np.empty(0)
    counts = np.diff(indptr)
    isolates = np.flatnonzero(counts == 0).tolist()
    if isolates:
        log.warning("%d units have no neighbours within %g", len(isolates), d_max)
    return NeighborGraph(
        indptr=np.asarray(indptr, dtype=np.int64),
        indices=indices.astype(np.int64),
        distances=distances,
        weights=np.ones(len(indices)),
        symmetric=query is None,
        n_reference=len(ref),
        metadata={"d_max": float(d_max), "isolates": isolates},
    )


def max_nearest_neighbor_distance(dataset) -> float:
    """Smallest band that leaves no unit isolated."""
    xy = _coords(dataset)
    _, dist = knn_arrays(xy, xy, 1, exclude_self=True)
    return float(dist.max())


def kernel_function(shape: str, u: np.ndarray) -> np.ndarray:
    """Kernel weight as a function of scaled distance ``u = d / b``."""
    u = np.asarray(u, dtype=float)
    if shape == "bisquare":
        return np.where(u < 1, (1 - u ** 2) ** 2, 0.0)
    if shape == "tricube":
        return np.where(u < 1, (1 - u ** 3) ** 3, 0.0)
    if shape == "gaussian":
        return np.exp(-0.5 * u ** 2)
    if shape == "boxcar":
        return np.where(u <= 1, 1.0, 0.0)
    raise ConfigError(f"unknown kernel shape {shape!r}")


def kernel_weights(graph: NeighborGraph, spec: KernelSpec, ids=None) -> NeighborGraph:
    """Attach kernel weights to a graph.

    Adaptive bandwidths are the distance to each unit's farthest (k-th)
    neighbour; fixed bandwidths are ``spec.bandwidth`` everywhere.
    """
    counts = graph.counts
    n = graph.n_focal
    if spec.adaptive:
        last = graph.indptr[1:] - 1
        b = np.where(counts > 0, graph.distances[np.maximum(last, 0)], 0.0)
        bad = np.flatnonzero((counts > 0) & (b <= 0))
        if bad.size:
            i = int(bad[0])
            name = ids[i] if ids is not None else i
            raise DegenerateBandwidthError(
                f"unit {name}: all neighbours coincide with the focal point (bandwidth 0)")
    else:
        b = np.full(n, float(spec.bandwidth))
    u = graph.distances / np.repeat(b, counts) if graph.distances.size else graph.distances
    w = kernel_function(spec.shape, u)
    return replace(graph, weights=w, bandwidths=b, kernel=spec)


def neighborhood_graph(dataset, spec: KernelSpec, query=None) -> NeighborGraph:
    """Build the kernel-weighted neighbourhoods a local model is fitted on."""
    if spec.adaptive:
        graph = build_knn(dataset, spec.bandwidth, query=query)
    else:
        reach = spec.bandwidth * (GAUSSIAN_CUTOFF if spec.shape == "gaussian" else 1.0)
        graph = build_distance_band(dataset, reach, query=query)
        if query is None:
            # distance bands drop coincident units; local fits keep them
            graph = _with_coincident(graph, _coords(dataset))
    ids = dataset.ids if isinstance(dataset, SpatialDataset) and query is None else None
    return kernel_weights(graph, spec, ids=ids)


def _with_coincident(graph: NeighborGraph, xy: np.ndarray) -> NeighborGraph:
    tree = cKDTree(xy)
    pairs = tree.query_pairs(0.0, output_type="ndarray")
    if len(pairs) == 0:
        return graph
    extra = [[] for _ in range(graph.n_focal)]
    for a, b in pairs:
        extra[a].append(b)
        extra[b].append(a)
    indptr, indices, distances = [0], [], []
    for i in range(graph.n_focal):
        idx = np.concatenate([np.asarray(sorted(extra[i]), dtype=np.int64), graph.neighbors(i)])
        d = np.concatenate([np.zeros(len(extra[i])), graph.neighbor_distances(i)])
        indices.append(idx)
        distances.append(d)
        indptr.append(indptr[-1] + len(idx))
    return replace(graph, indptr=np.asarray(indptr, dtype=np.int64),
                   indices=np.concatenate(indices), distances=np.concatenate(distances),
                   weights=np.ones(indptr[-1]))


def check_graph(graph: NeighborGraph, n_focal: int, n_reference: int) -> None:
    if graph.n_focal != n_focal or graph.n_reference != n_reference:
        raise IntegrityError(
            f"graph has {graph.n_focal} focal / {graph.n_reference} reference units, "
            f"expected {n_focal} / {n_reference}")


def write_graph_csv(graph: NeighborGraph, path, focal_ids, neighbor_ids=None) -> None:
    neighbor_ids = focal_ids if neighbor_ids is None else neighbor_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["focal_id", "neighbor_id", "distance", "weight"])
        for i in range(graph.n_focal):
            s, e = graph.indptr[i], graph.indptr[i + 1]
            for j in range(s, e):
                writer.writerow([focal_ids[i], neighbor_ids[graph.indices[j]],
                                 fmt_float(graph.distances[j]), fmt_float(graph.weights[j])])
