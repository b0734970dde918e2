"""Synthetic georeferenced data with known, spatially varying coefficients.

Labels are drawn from a softmax over class-specific linear predictors whose
coefficients vary over space according to a field per (class, variable).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .data import SpatialDataset, fmt_float
from .errors import ConfigError

FIELDS = ("constant", "linear_gradient", "east_west_sign_flip", "radial")


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    ``coefficient_field`` is either one field name for every (class,
    variable) or a C x p nested sequence of names. ``base_coefficients``
    (C x p) scales each field; when omitted it is drawn as
    ``amplitude * N(0, 1)`` from the seed. ``redundancy_plan`` lists
    ``(source variable index, correlation)`` clones appended after the p
    model variables. ``n_latent > 0`` draws the model variables from a
    block factor structure with the given ``loading`` instead of
    independently.
    """

    n_units: int = 500
    extent: float = 10_000.0
    n_classes: int = 3
    n_variables: int = 5
    coefficient_field: object = "constant"
    amplitude: float = 2.0
    base_coefficients: tuple | None = None
    intercepts: tuple | None = None
    noise_sd: float = 0.0
    redundancy_plan: tuple = ()
    n_latent: int = 0
    loading: float = 0.8
    flip_at: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 50:
            raise ConfigError("n_units must be >= 50")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.n_variables < 1:
            raise ConfigError("need at least one variable")
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")
        for src, rho in self.redundancy_plan:
            if not 0 <= int(src) < self.n_variables:
                raise ConfigError(f"clone source {src} is not a model variable")
            if not -1 < rho <= 1:
                raise ConfigError(f"clone correlation {rho} outside (-1, 1]")
        if self.n_latent < 0 or self.n_latent > self.n_variables:
            raise ConfigError("n_latent must be between 0 and n_variables")
        if self.n_latent and not 0 < abs(self.loading) < 1:
            raise ConfigError("loading must be in (-1, 1)")
        fields = self.field_matrix()
        for name in fields.ravel():
            if name not in FIELDS:
                raise ConfigError(f"unknown coefficient field {name!r}; choose from {FIELDS}")
        if self.base_coefficients is not None:
            b = np.asarray(self.base_coefficients, dtype=float)
            if b.shape != (self.n_classes, self.n_variables):
                raise ConfigError("base_coefficients must be n_classes x n_variables")
        if self.intercepts is not None and len(self.intercepts) != self.n_classes:
            raise ConfigError("intercepts must have one entry per class")

    def field_matrix(self) -> np.ndarray:
        f = self.coefficient_field
        if isinstance(f, str):
            return np.full((self.n_classes, self.n_variables), f, dtype=object)
        arr = np.array(f, dtype=object)
        if arr.shape != (self.n_classes, self.n_variables):
            raise ConfigError("coefficient_field must be a name or an n_classes x n_variables grid")
        return arr


@dataclass(frozen=True, eq=False)
class GroundTruth:
    coefficients: np.ndarray  # (n, C, p_total)
    intercepts: np.ndarray
    probabilities: np.ndarray  # (n, C)
    variable_names: tuple[str, ...]
    fields: np.ndarray
    clones: list = field(default_factory=list)


def field_value(kind: str, xy: np.ndarray, extent: float, flip_at: float = 0.5) -> np.ndarray:
    """Spatial multiplier in [-1, 1] applied to a base coefficient."""
    x, y = xy[:, 0] / extent, xy[:, 1] / extent
    if kind == "constant":
        return np.ones(len(xy))
    if kind == "linear_gradient":
        return 2.0 * x - 1.0
    if kind == "east_west_sign_flip":
        return np.where(x < flip_at, 1.0, -1.0)
    if kind == "radial":
        r2 = (x - 0.5) ** 2 + (y - 0.5) ** 2
        return np.exp(-r2 / (2 * 0.2 ** 2))
    raise ConfigError(f"unknown coefficient field {kind!r}")


def _model_features(spec: SynthSpec, rng) -> np.ndarray:
    n, p = spec.n_units, spec.n_variables
    if not spec.n_latent:
        return rng.standard_normal((n, p))
    factors = rng.standard_normal((n, spec.n_latent))
    unique = rng.standard_normal((n, p))
    block = np.arange(p) % spec.n_latent
    lam = spec.loading
    return lam * factors[:, block] + np.sqrt(1 - lam ** 2) * unique


def generate(spec: SynthSpec):
    """Draw a dataset and its ground truth; bit-reproducible given the seed."""
    rng = np.random.default_rng(spec.seed)
    n, C, p = spec.n_units, spec.n_classes, spec.n_variables
    xy = rng.uniform(0.0, spec.extent, size=(n, 2))
    X = _model_features(spec, rng)

    clones = []
    clone_cols = []
    for k, (src, rho) in enumerate(spec.redundancy_plan):
        src = int(src)
        noise = rng.standard_normal(n)
        clone_cols.append(rho * X[:, src] + np.sqrt(max(1.0 - rho ** 2, 0.0)) * noise)
        clones.append((f"x{p + k}", f"x{src}", float(rho)))
    features = np.column_stack([X, *clone_cols]) if clone_cols else X
    names = tuple(f"x{j}" for j in range(features.shape[1]))

    if spec.base_coefficients is None:
        base = spec.amplitude * rng.standard_normal((C, p))
    else:
        base = np.asarray(spec.base_coefficients, dtype=float)
    intercepts = np.zeros(C) if spec.intercepts is None else np.asarray(spec.intercepts, float)
    fields = spec.field_matrix()
    beta = np.zeros((n, C, features.shape[1]))
    for c in range(C):
        for j in range(p):
            beta[:, c, j] = base[c, j] * field_value(fields[c, j], xy, spec.extent, spec.flip_at)

    eta = intercepts + np.einsum("ncj,nj->nc", beta[:, :, :p], X)
    if spec.noise_sd > 0:
        eta = eta + spec.noise_sd * rng.standard_normal((n, C))
    P = softmax(eta, axis=1)
    u = rng.random(n)
    labels = np.minimum((P.cumsum(axis=1) < u[:, None]).sum(axis=1), C - 1)

    width = len(str(n - 1))
    ids = tuple(f"u{i:0{width}d}" for i in range(n))
    dataset = SpatialDataset(ids=ids, coords=xy, features=features, variable_names=names,
                             labels=labels, class_names=tuple(f"class{c}" for c in range(C)))
    truth = GroundTruth(coefficients=beta, intercepts=intercepts, probabilities=P,
                        variable_names=names, fields=fields, clones=clones)
    return dataset, truth


def write_ground_truth_csv(dataset: SpatialDataset, truth: GroundTruth, path) -> None:
    """Long format: unit_id, class, variable, true_coefficient."""
    n, C, p = truth.coefficients.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "class", "variable", "true_coefficient"])
        for i in range(n):
            for c in range(C):
                for j in range(p):
                    writer.writerow([dataset.ids[i], dataset.class_names[c],
                                     truth.variable_names[j],
                                     fmt_float(truth.coefficients[i, c, j])])
