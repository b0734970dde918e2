"""Georeferenced unit datasets: CSV ingestion, label aggregation, scaling."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateVariableError,
    IntegrityError,
    ParseError,
    SchemaError,
)

log = logging.getLogger(__name__)


def fmt_float(value: float) -> str:
    """Serialize a float with 17 significant digits (exact round trip)."""
    return format(float(value), ".17g")


class UnitRecord(NamedTuple):
    unit_id: str
    x: float
    y: float
    features: np.ndarray
    label: int | None


@dataclass(frozen=True)
class UnitSchema:
    """Column mapping for a unit table.

    ``features=None`` means every column not mapped to id/x/y/label.
    """

    id: str = "id"
    x: str = "x"
    y: str = "y"
    label: str | None = "label"
    features: tuple[str, ...] | None = None


@dataclass(frozen=True, eq=False)
class SpatialDataset:
    """Units with planar coordinates, a feature matrix and optional labels.

    Unit order is canonical: every per-unit output downstream follows it.
    """

    ids: tuple[str, ...]
    coords: np.ndarray
    features: np.ndarray
    variable_names: tuple[str, ...]
    labels: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    standardized: bool = False
    scaling: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        n = len(self.ids)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if coords.shape[0] != n or features.shape[0] != n:
            raise IntegrityError(
                f"{n} ids but {coords.shape[0]} coordinate rows and "
                f"{features.shape[0]} feature rows"
            )
        if features.shape[1] != len(self.variable_names):
            raise IntegrityError(
                f"{features.shape[1]} feature columns but "
                f"{len(self.variable_names)} variable names"
            )
        if not np.all(np.isfinite(coords)):
            raise DataError("coordinates must be finite")
        if not np.all(np.isfinite(features)):
            raise DataError("features must be finite")
        _check_unique(self.ids, "unit_id")
        _check_unique(self.variable_names, "variable name")
        _check_unique(self.class_names, "class name")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != n:
                raise IntegrityError("label count does not match unit count")
            if n and (labels.min() < 0 or labels.max() >= len(self.class_names)):
                raise IntegrityError("label outside the range of class_names")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        coords.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)

    @property
    def n_units(self) -> int:
        return len(self.ids)

    @property
    def n_variables(self) -> int:
        return len(self.variable_names)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def unit(self, i: int) -> UnitRecord:
        label = None if self.labels is None else int(self.labels[i])
        return UnitRecord(self.ids[i], float(self.coords[i, 0]),
                          float(self.coords[i, 1]), self.features[i], label)

    def __iter__(self) -> Iterator[UnitRecord]:
        return (self.unit(i) for i in range(self.n_units))

    def __len__(self) -> int:
        return self.n_units

    def subset(self, index) -> "SpatialDataset":
        """Rows selected by an integer index array or boolean mask."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in index),
            coords=self.coords[index],
            features=self.features[index],
            labels=None if self.labels is None else self.labels[index],
        )

    def select_variables(self, names: Sequence[str]) -> "SpatialDataset":
        pos = {v: j for j, v in enumerate(self.variable_names)}
        missing = [v for v in names if v not in pos]
        if missing:
            raise SchemaError(f"unknown variables: {', '.join(missing)}")
        cols = [pos[v] for v in names]
        scaling = None
        if self.scaling is not None:
            scaling = {v: self.scaling[v] for v in names}
        return replace(self, features=self.features[:, cols],
                       variable_names=tuple(names), scaling=scaling)

    def with_labels(self, labels, class_names: Sequence[str]) -> "SpatialDataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64),
                       class_names=tuple(class_names))


def _check_unique(values: Sequence[str], what: str) -> None:
    seen = set()
    for v in values:
        if v in seen:
            raise IntegrityError(f"duplicate {what}: {v!r}")
        seen.add(v)


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column {column!r}: not a number: {cell!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {column!r}: non-finite value {cell!r}")
    return value


def _resolve_labels(raw: list[str], class_names: Sequence[str] | None):
    """Map raw label cells to indices.

    Integer cells are taken as indices; anything else is looked up by name.
    """
    if class_names is not None:
        lookup = {name: i for i, name in enumerate(class_names)}
        out = []
        for row, cell in enumerate(raw, start=2):
            if cell in lookup:
                out.append(lookup[cell])
                continue
            try:
                idx = int(cell)
            except ValueError:
                raise ParseError(f"row {row}: unknown class {cell!r}") from None
            if not 0 <= idx < len(class_names):
                raise ParseError(f"row {row}: class index {idx} out of range")
            out.append(idx)
        return np.array(out, dtype=np.int64), tuple(class_names)
    try:
        idx = np.array([int(c) for c in raw], dtype=np.int64)
    except ValueError:
        names = tuple(sorted(set(raw)))
        lookup = {name: i for i, name in enumerate(names)}
        return np.array([lookup[c] for c in raw], dtype=np.int64), names
    if idx.size and idx.min() < 0:
        raise ParseError("negative class index")
    n_classes = int(idx.max()) + 1 if idx.size else 0
    return idx, tuple(str(i) for i in range(n_classes))


def load_units_csv(path, schema: UnitSchema = UnitSchema(),
                   class_names: Sequence[str] | None = None) -> SpatialDataset:
    """Read a unit table.

    The label column is optional: if the schema names one that is absent
    from the header, the dataset is returned unlabelled.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = list(reader)

    header = [h.strip() for h in header]
    for col in (schema.id, schema.x, schema.y):
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    label_col = schema.label if schema.label in header else None
    if schema.features is None:
        mapped = {schema.id, schema.x, schema.y, schema.label}
        feature_cols = [h for h in header if h not in mapped]
    else:
        feature_cols = list(schema.features)
        missing = [c for c in feature_cols if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing feature columns {missing}")
    if not feature_cols:
        raise SchemaError(f"{path}: no feature columns")

    pos = {h: j for j, h in enumerate(header)}
    n = len(rows)
    ids, labels_raw = [], []
    coords = np.empty((n, 2))
    features = np.empty((n, len(feature_cols)))
    for r, cells in enumerate(rows):
        line = r + 2
        if len(cells) != len(header):
            raise ParseError(f"{path}: row {line} has {len(cells)} cells, "
                             f"expected {len(header)}")
        ids.append(cells[pos[schema.id]].strip())
        coords[r, 0] = _parse_float(cells[pos[schema.x]], line, schema.x)
        coords[r, 1] = _parse_float(cells[pos[schema.y]], line, schema.y)
        for j, col in enumerate(feature_cols):
            features[r, j] = _parse_float(cells[pos[col]], line, col)
        if label_col is not None:
            labels_raw.append(cells[pos[label_col]].strip())

    labels, names = None, tuple(class_names or ())
    if label_col is not None:
        labels, names = _resolve_labels(labels_raw, class_names)
    return SpatialDataset(ids=tuple(ids), coords=coords, features=features,
                          variable_names=tuple(feature_cols), labels=labels,
                          class_names=names)


def write_units_csv(dataset: SpatialDataset, path, schema: UnitSchema = UnitSchema()) -> None:
    path = Path(path)
    header = [schema.id, schema.x, schema.y, *dataset.variable_names]
    if dataset.labels is not None:
        header.append(schema.label or "label")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n_units):
            row = [dataset.ids[i], fmt_float(dataset.coords[i, 0]),
                   fmt_float(dataset.coords[i, 1])]
            row.extend(fmt_float(v) for v in dataset.features[i])
            if dataset.labels is not None:
                row.append(str(int(dataset.labels[i])))
            writer.writerow(row)


@dataclass(frozen=True)
class ElementLabelTable:
    element_ids: tuple[str, ...]
    unit_ids: tuple[str, ...]
    labels: np.ndarray

    def __len__(self):
        return len(self.element_ids)


def load_elements_csv(path) -> ElementLabelTable:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"element_id", "unit_id", "label"}
        if reader.fieldnames is None or not need <= {f.strip() for f in reader.fieldnames}:
            raise SchemaError(f"{path}: element table needs columns element_id,unit_id,label")
        eids, uids, labels = [], [], []
        for line, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items()}
            eids.append(row["element_id"].strip())
            uids.append(row["unit_id"].strip())
            try:
                labels.append(int(row["label"]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {line}: label must be a class index") from None
    return ElementLabelTable(tuple(eids), tuple(uids), np.array(labels, dtype=np.int64))


def aggregate_majority(elements: ElementLabelTable, dataset: SpatialDataset,
                       class_names: Sequence[str] | None = None):
    """Label each unit with the modal label of its elements.

    Ties go to the smallest class index. Units without elements are
    dropped.

    Returns
    -------
    dataset : SpatialDataset
        Labelled units that received at least one element, in the
        original order.
    dropped : list of str
        Ids of units without elements.
    """
    if class_names is None:
        class_names = dataset.class_names
    if not class_names:
        n_classes = int(elements.labels.max()) + 1 if len(elements) else 0
        class_names = tuple(str(i) for i in range(n_classes))
    n_classes = len(class_names)

    index = {uid: i for i, uid in enumerate(dataset.ids)}
    counts = np.zeros((dataset.n_units, n_classes), dtype=np.int64)
    for eid, uid, lab in zip(elements.element_ids, elements.unit_ids, elements.labels):
        if uid not in index:
            raise IntegrityError(f"element {eid!r} references unknown unit {uid!r}")
        if not 0 <= lab < n_classes:
            raise IntegrityError(f"element {eid!r} has label {lab} outside 0..{n_classes - 1}")
        counts[index[uid], lab] += 1

    has_elements = counts.sum(axis=1) > 0
    dropped = [dataset.ids[i] for i in np.flatnonzero(~has_elements)]
    if dropped:
        log.warning("dropping %d units without elements", len(dropped))
    # argmax returns the first maximum, i.e. the smallest class index
    labels = counts.argmax(axis=1)
    kept = dataset.subset(has_elements)
    return kept.with_labels(labels[has_elements], class_names), dropped


def standardize_features(dataset: SpatialDataset) -> SpatialDataset:
    """Center each feature and scale it to unit sample standard deviation."""
    if dataset.standardized:
        raise DataError("dataset is already standardized")
    X = dataset.features
    if X.shape[0] < 2:
        raise DegenerateVariableError("need at least two units to standardize")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    for j, name in enumerate(dataset.variable_names):
        if not sd[j] > 0:
            raise DegenerateVariableError(f"variable {name!r} has zero variance")
    Z = (X - mean) / sd
    # second pass removes the O(eps) residual mean/scale left by the first
    Z = (Z - Z.mean(axis=0)) / Z.std(axis=0, ddof=1)
    scaling = {name: (float(mean[j]), float(sd[j]))
               for j, name in enumerate(dataset.variable_names)}
    return replace(dataset, features=Z, standardized=True, scaling=scaling)
