"""Pipeline driver: ``gwclass <stage> --config run.ini``.

Stages read and write files in one output directory so each can be rerun
on its own. The whole configuration is parsed and checked before any
stage does work; every random draw is seeded from it.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    SpatialDataset,
    UnitSchema,
    aggregate_majority,
    fmt_float,
    load_elements_csv,
    load_units_csv,
    standardize_features,
    write_units_csv,
)
from .errors import ConfigError, DataError, GwClassError, MissingStageError, ParseError
from .evaluation import FOLD_METHODS, GLOBAL_MODELS, evaluate_global, evaluate_gw, spatial_kfold
from .forest import ForestParams
from .gw import (
    FALLBACKS,
    LEARNERS,
    GwFitSpec,
    coefficient_dispersion_by_class,
    default_candidates,
    extract_coefficients,
    fit_gw,
    select_bandwidth,
)
from .kernels import MODES, SHAPES, KernelSpec, build_distance_band, build_knn, \
    max_nearest_neighbor_distance
from .linear import DEFAULT_L2
from .spatial_stats import error_surface, global_g, local_g_star
from .synth import SynthSpec, generate, write_ground_truth_csv
from .varsel import SelectionTrace, select_variables

log = logging.getLogger("gwclass")

STAGES = ("synth", "select-vars", "fit-global", "autocorr", "fit-gw", "report")

# stage output files, relative to the output directory
UNITS_FILE = "units.csv"
TRUTH_FILE = "ground_truth.csv"
TRACE_FILE = "selection_trace.json"
GLOBAL_FILE = "global_scores.json"
AUTOCORR_GLOBAL_FILE = "autocorr_global.json"
AUTOCORR_LOCAL_FILE = "autocorr_local.csv"
GW_FILE = "gw_scores.json"
DISPERSION_FILE = "dispersion_by_class.json"
REPORT_FILE = "report.json"

KEYS = {
    "run": {"seed", "out", "workers"},
    "data": {"units", "id", "x", "y", "label", "features", "class_names", "standardize",
             "elements"},
    "synth": {"n_units", "n_classes", "n_variables", "extent", "coefficient_field",
              "amplitude", "base_coefficients", "intercepts", "noise_sd", "redundancy",
              "n_latent", "loading", "flip_at", "seed"},
    "select": {"exclusions", "threshold", "use_selection"},
    "global": {"models", "folds", "fold_method", "fold_seed", "l2_lambda", "n_trees",
               "max_depth", "mtry", "min_leaf_weight", "forest_seed"},
    "autocorr": {"learner", "n_perm", "seed", "significance", "correction", "neighbors"},
    "gw": {"learners", "kernel", "bandwidth_mode", "bandwidths", "folds", "fold_method",
           "fold_seed", "min_positive", "fallback", "l2_lambda", "threshold", "n_trees",
           "max_depth", "mtry", "min_leaf_weight", "forest_seed"},
}


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class DataConfig:
    units: Path
    schema: UnitSchema
    class_names: tuple[str, ...] | None
    standardize: bool
    elements: Path | None


@dataclass(frozen=True)
class SelectConfig:
    exclusions: tuple[str, ...]
    threshold: float
    use_selection: bool


@dataclass(frozen=True)
class GlobalConfig:
    models: tuple[str, ...]
    n_folds: int
    fold_method: str
    fold_seed: int
    l2_lambda: float
    forest: ForestParams


@dataclass(frozen=True)
class AutocorrConfig:
    learner: str
    n_perm: int
    seed: int
    significance: float
    correction: str
    neighbors: int | None  # None: distance band at the largest nearest-neighbour distance


@dataclass(frozen=True)
class GwConfig:
    learners: tuple[str, ...]
    kernel: KernelSpec
    bandwidths: tuple | None  # None: automatic candidate grid
    n_folds: int
    fold_method: str
    fold_seed: int
    min_positive: int
    fallback: str
    l2_lambda: float
    threshold: float
    forest: ForestParams


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    out: Path
    workers: int
    data: DataConfig
    synth: SynthSpec | None
    select: SelectConfig
    global_: GlobalConfig
    autocorr: AutocorrConfig
    gw: GwConfig


class _Section:
    """Typed accessors over one INI section; errors name section and key."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.raw = dict(parser[name]) if parser.has_section(name) else {}

    def has(self, key):
        return key in self.raw and self.raw[key].strip() != ""

    def _fail(self, key, why):
        raise ConfigError(f"[{self.name}] {key}: {why}")

    def str(self, key, default=None, choices=None):
        v = self.raw[key].strip() if self.has(key) else default
        if v is None:
            self._fail(key, "required")
        if choices is not None and v not in choices:
            self._fail(key, f"{v!r} not one of {', '.join(choices)}")
        return v

    def int(self, key, default=None, minimum=None):
        if not self.has(key):
            if default is None:
                self._fail(key, "required")
            return default
        try:
            v = int(self.raw[key])
        except ValueError:
            self._fail(key, f"expected an integer, got {self.raw[key]!r}")
        if minimum is not None and v < minimum:
            self._fail(key, f"must be >= {minimum}")
        return v

    def float(self, key, default=None, low=None, high=None):
        if not self.has(key):
            if default is None:
                self._fail(key, "required")
            return default
        try:
            v = float(self.raw[key])
        except ValueError:
            self._fail(key, f"expected a number, got {self.raw[key]!r}")
        if not math.isfinite(v) or (low is not None and v < low) or (high is not None and v > high):
            self._fail(key, f"{v} outside [{low}, {high}]")
        return v

    def bool(self, key, default):
        if not self.has(key):
            return default
        v = self.raw[key].strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        self._fail(key, f"expected a boolean, got {self.raw[key]!r}")

    def list(self, key, default=(), choices=None):
        if not self.has(key):
            return tuple(default)
        items = tuple(s.strip() for s in self.raw[key].split(",") if s.strip())
        if choices is not None:
            bad = [s for s in items if s not in choices]
            if bad:
                self._fail(key, f"{bad} not in {', '.join(choices)}")
        if len(set(items)) != len(items):
            self._fail(key, "duplicate entries")
        return items

    def matrix(self, key, numeric=True):
        """``a,b;c,d`` rows; None when absent."""
        if not self.has(key):
            return None
        rows = [r for r in self.raw[key].split(";") if r.strip()]
        try:
            out = tuple(tuple(float(c) if numeric else c.strip() for c in r.split(","))
                        for r in rows)
        except ValueError:
            self._fail(key, "expected numbers in 'a,b;c,d' form")
        return out


def _forest_params(sec: _Section, seed: int) -> ForestParams:
    mtry = sec.int("mtry", 0, minimum=0)
    return ForestParams(n_trees=sec.int("n_trees", 100, minimum=1),
                        max_depth=sec.int("max_depth", 12, minimum=1),
                        mtry=mtry or None,
                        min_leaf_weight=sec.float("min_leaf_weight", 1.0, low=1e-12),
                        seed=sec.int("forest_seed", seed, minimum=0))


def _synth_spec(sec: _Section, seed: int) -> SynthSpec:
    field = sec.str("coefficient_field", "constant")
    if ";" in field or "," in field:
        field = sec.matrix("coefficient_field", numeric=False)
    redundancy = []
    for item in sec.list("redundancy"):
        try:
            src, rho = item.split(":")
            redundancy.append((int(src), float(rho)))
        except ValueError:
            sec._fail("redundancy", f"entries look like 'source:correlation', got {item!r}")
    intercepts = sec.list("intercepts") or None
    try:
        intercepts = tuple(float(v) for v in intercepts) if intercepts else None
    except ValueError:
        sec._fail("intercepts", "expected numbers")
    return SynthSpec(
        n_units=sec.int("n_units", 500),
        n_classes=sec.int("n_classes", 3),
        n_variables=sec.int("n_variables", 5),
        extent=sec.float("extent", 10_000.0),
        coefficient_field=field,
        amplitude=sec.float("amplitude", 2.0),
        base_coefficients=sec.matrix("base_coefficients"),
        intercepts=intercepts,
        noise_sd=sec.float("noise_sd", 0.0),
        redundancy_plan=tuple(redundancy),
        n_latent=sec.int("n_latent", 0),
        loading=sec.float("loading", 0.8),
        flip_at=sec.float("flip_at", 0.5, low=0.0, high=1.0),
        seed=sec.int("seed", seed, minimum=0),
    )


def load_config(path, out: str | None = None, workers: int | None = None) -> PipelineConfig:
    """Parse and validate every section of a run configuration.

    Relative paths resolve against the configuration file's directory.
    ``out`` and ``workers`` override the ``[run]`` values.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for name in parser.sections():
        if name not in KEYS:
            raise ConfigError(f"unknown section [{name}]")
        unknown = sorted(set(parser[name]) - KEYS[name])
        if unknown:
            raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    base = path.resolve().parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    run = _Section(parser, "run")
    seed = run.int("seed", minimum=0)
    out_dir = resolve(out if out is not None else run.str("out", "out"))
    n_workers = workers if workers is not None else run.int("workers", 1)
    if n_workers < 1:
        raise ConfigError("workers must be >= 1")

    d = _Section(parser, "data")
    features = d.list("features") or None
    label = d.str("label", "label")
    data = DataConfig(
        units=resolve(d.str("units", str(out_dir / UNITS_FILE))),
        schema=UnitSchema(id=d.str("id", "id"), x=d.str("x", "x"), y=d.str("y", "y"),
                          label=label, features=features),
        class_names=d.list("class_names") or None,
        standardize=d.bool("standardize", True),
        elements=resolve(d.str("elements")) if d.has("elements") else None,
    )
    if data.elements is not None and not data.elements.is_file():
        raise ConfigError(f"[data] elements: {data.elements} not found")

    synth = _synth_spec(_Section(parser, "synth"), seed) if parser.has_section("synth") else None

    s = _Section(parser, "select")
    select = SelectConfig(exclusions=s.list("exclusions"),
                          threshold=s.float("threshold", 0.75, low=0.0, high=1.0),
                          use_selection=s.bool("use_selection", True))

    g = _Section(parser, "global")
    global_ = GlobalConfig(
        models=g.list("models", GLOBAL_MODELS, choices=GLOBAL_MODELS),
        n_folds=g.int("folds", 5, minimum=2),
        fold_method=g.str("fold_method", "coordinate_clusters", choices=FOLD_METHODS),
        fold_seed=g.int("fold_seed", seed, minimum=0),
        l2_lambda=g.float("l2_lambda", DEFAULT_L2, low=0.0),
        forest=_forest_params(g, seed),
    )
    if not global_.models:
        raise ConfigError("[global] models: at least one model required")

    a = _Section(parser, "autocorr")
    nb = a.str("neighbors", "distance_band")
    if nb != "distance_band":
        try:
            nb = int(nb)
        except ValueError:
            raise ConfigError("[autocorr] neighbors: 'distance_band' or a neighbour count") from None
        if nb < 1:
            raise ConfigError("[autocorr] neighbors must be >= 1")
    else:
        nb = None
    autocorr = AutocorrConfig(
        learner=a.str("learner", "forest", choices=GLOBAL_MODELS),
        n_perm=a.int("n_perm", 999, minimum=1),
        seed=a.int("seed", seed, minimum=0),
        significance=a.float("significance", 0.05, low=1e-12, high=1.0),
        correction=a.str("correction", "none", choices=("none", "bonferroni")),
        neighbors=nb,
    )

    w = _Section(parser, "gw")
    mode = w.str("bandwidth_mode", "adaptive_k", choices=MODES)
    bw_raw = w.list("bandwidths", ("auto",))
    if bw_raw == ("auto",):
        if mode != "adaptive_k":
            raise ConfigError("[gw] bandwidths: 'auto' needs bandwidth_mode = adaptive_k")
        bandwidths = None
    else:
        try:
            bandwidths = tuple(float(b) for b in bw_raw)
        except ValueError:
            raise ConfigError(f"[gw] bandwidths: expected numbers or 'auto', got {bw_raw}") from None
        if mode == "adaptive_k":
            bandwidths = tuple(int(b) if b == int(b) else b for b in bandwidths)
        for b in bandwidths:
            KernelSpec(bandwidth_mode=mode, bandwidth=b)
    gw = GwConfig(
        learners=w.list("learners", LEARNERS, choices=LEARNERS),
        kernel=KernelSpec(shape=w.str("kernel", "bisquare", choices=SHAPES),
                          bandwidth_mode=mode,
                          bandwidth=bandwidths[0] if bandwidths else 50),
        bandwidths=bandwidths,
        n_folds=w.int("folds", global_.n_folds, minimum=2),
        fold_method=w.str("fold_method", global_.fold_method, choices=FOLD_METHODS),
        fold_seed=w.int("fold_seed", global_.fold_seed, minimum=0),
        min_positive=w.int("min_positive", 5, minimum=1),
        fallback=w.str("fallback", "prior_rate", choices=FALLBACKS),
        l2_lambda=w.float("l2_lambda", DEFAULT_L2, low=0.0),
        threshold=w.float("threshold", 0.5, low=0.0, high=1.0),
        forest=_forest_params(w, seed),
    )
    if not gw.learners:
        raise ConfigError("[gw] learners: at least one learner required")

    return PipelineConfig(seed=seed, out=out_dir, workers=n_workers, data=data, synth=synth,
                          select=select, global_=global_, autocorr=autocorr, gw=gw)


# ---------------------------------------------------------------- file helpers

def _clean(obj):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj) -> None:
    text = json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False)
    path.write_text(text + "\n", encoding="utf-8")


def read_stage_json(path: Path, stage: str):
    if not path.is_file():
        raise MissingStageError(stage, path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None


def slug(name: str) -> str:
    """File-name-safe form of a class name."""
    s = re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_")
    return s or "class"


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])


def _check_class_files(names) -> None:
    slugs = [slug(n) for n in names]
    if len(set(slugs)) != len(slugs):
        raise ConfigError(f"class names collide after file-name cleaning: {list(names)}")


# ---------------------------------------------------------------- datasets

def load_dataset(cfg: PipelineConfig, apply_selection: bool = True) -> SpatialDataset:
    """Units as the modelling stages see them: labelled, standardized, selected."""
    if not cfg.data.units.is_file():
        if cfg.data.units == cfg.out / UNITS_FILE:
            raise MissingStageError("synth", cfg.data.units)
        raise DataError(f"units file {cfg.data.units} not found")
    ds = load_units_csv(cfg.data.units, cfg.data.schema, cfg.data.class_names)
    if cfg.data.elements is not None:
        ds, dropped = aggregate_majority(load_elements_csv(cfg.data.elements), ds,
                                         cfg.data.class_names)
        if dropped:
            log.info("%d units had no elements and were dropped", len(dropped))
    if cfg.data.standardize:
        ds = standardize_features(ds)
    if apply_selection and cfg.select.use_selection:
        trace = read_stage_json(cfg.out / TRACE_FILE, "select-vars")
        ds = ds.select_variables(trace["retained_variables"])
    return ds


def _require_labels(ds: SpatialDataset) -> None:
    if ds.labels is None:
        raise DataError("the units have no label column; labels are required for this stage")


# ---------------------------------------------------------------- stages

def cmd_synth(cfg: PipelineConfig) -> list[Path]:
    if cfg.synth is None:
        raise ConfigError("the synth stage needs a [synth] section")
    ds, truth = generate(cfg.synth)
    units, gt = cfg.out / UNITS_FILE, cfg.out / TRUTH_FILE
    write_units_csv(ds, units)
    write_ground_truth_csv(ds, truth, gt)
    log.info("wrote %d units with %d variables", ds.n_units, ds.n_variables)
    return [units, gt]


def cmd_select_vars(cfg: PipelineConfig) -> list[Path]:
    ds = load_dataset(cfg, apply_selection=False)
    trace = select_variables(ds, cfg.select.exclusions, cfg.select.threshold)
    path = cfg.out / TRACE_FILE
    write_json(path, trace.to_dict())
    log.info("retained %d of %d variables", len(trace.retained_variables),
             len(trace.input_variables))
    return [path]


def cmd_fit_global(cfg: PipelineConfig) -> list[Path]:
    ds = load_dataset(cfg)
    _require_labels(ds)
    g = cfg.global_
    folds = spatial_kfold(ds, g.n_folds, g.fold_method, g.fold_seed)
    reports, written = {}, []
    for kind in g.models:
        rep, pred = evaluate_global(ds, kind, folds, l2_lambda=g.l2_lambda,
                                    forest_params=g.forest)
        reports[kind] = rep.to_dict()
        err = error_surface(pred, ds)
        path = cfg.out / f"error_surface_{kind}.csv"
        _write_rows(path, ["unit_id", "x", "y", "label", "predicted", "fold", "error"],
                    ([ds.ids[i], float(ds.coords[i, 0]), float(ds.coords[i, 1]),
                      ds.class_names[ds.labels[i]], ds.class_names[pred[i]],
                      int(folds.assignment[i]), int(err[i])] for i in range(ds.n_units)))
        written.append(path)
        log.info("%s: macro F1 %.3f", kind, rep.macro_f1)
    path = cfg.out / GLOBAL_FILE
    write_json(path, {"variables": list(ds.variable_names), "class_names": list(ds.class_names),
                      "n_units": ds.n_units, "models": reports})
    return [path, *written]


def _read_error_surface(path: Path):
    if not path.is_file():
        raise MissingStageError("fit-global", path)
    ids, xy, err = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["unit_id"])
            xy.append((float(row["x"]), float(row["y"])))
            err.append(float(row["error"]))
    return tuple(ids), np.array(xy, dtype=float), np.array(err)


def cmd_autocorr(cfg: PipelineConfig) -> list[Path]:
    a = cfg.autocorr
    ids, xy, err = _read_error_surface(cfg.out / f"error_surface_{a.learner}.csv")
    if a.neighbors is None:
        d = max_nearest_neighbor_distance(xy)
        graph = build_distance_band(xy, d)
        graph_desc = {"kind": "distance_band", "distance": d}
    else:
        graph = build_knn(xy, a.neighbors)
        graph_desc = {"kind": "knn", "k": a.neighbors}
    g = global_g(err, graph, n_perm=a.n_perm, seed=a.seed)
    local = local_g_star(err, graph, n_perm=a.n_perm, seed=a.seed,
                         significance=a.significance, correction=a.correction)
    gpath, lpath = cfg.out / AUTOCORR_GLOBAL_FILE, cfg.out / AUTOCORR_LOCAL_FILE
    write_json(gpath, {"learner": a.learner, "graph": graph_desc, "seed": a.seed,
                       "error_rate": float(err.mean()), "global_g": g.to_dict(),
                       "local": {"n_hotspots": local.n_hotspots,
                                 "significance": a.significance,
                                 "correction": a.correction}})
    local.write_csv(lpath, ids)
    log.info("global G p=%.4f, %d local hotspots", g.p_value, local.n_hotspots)
    return [gpath, lpath]


def _gw_spec(cfg: PipelineConfig, learner: str, c: int) -> GwFitSpec:
    w = cfg.gw
    return GwFitSpec(learner=learner, kernel=w.kernel, target_class=c,
                     min_positive=w.min_positive, fallback=w.fallback, l2_lambda=w.l2_lambda,
                     forest=w.forest, threshold=w.threshold)


def cmd_fit_gw(cfg: PipelineConfig) -> list[Path]:
    ds = load_dataset(cfg)
    _require_labels(ds)
    _check_class_files(ds.class_names)
    w = cfg.gw
    folds = spatial_kfold(ds, w.n_folds, w.fold_method, w.fold_seed)
    candidates = list(w.bandwidths) if w.bandwidths else default_candidates(ds.n_units,
                                                                            ds.n_variables)
    written, learners, surfaces, coefs = [], {}, {}, {}
    for learner in w.learners:
        specs = []
        for c, cname in enumerate(ds.class_names):
            spec = _gw_spec(cfg, learner, c)
            if len(candidates) > 1:
                sel = select_bandwidth(ds, spec, candidates, folds, workers=cfg.workers)
                table, best = sel.table, sel.best
            else:
                table, best = [], candidates[0]
            spec = replace(spec, kernel=spec.kernel.with_bandwidth(
                int(best) if w.kernel.adaptive else best))
            specs.append(spec)
            path = cfg.out / f"bandwidth_{learner}_{slug(cname)}.csv"
            _write_rows(path, ["candidate", "bandwidth", "f1", "f1_pooled", "n_skipped",
                               "selected"],
                        ([r["candidate"], float(r["bandwidth"]), float(r["f1"]),
                          float(r["f1_pooled"]), r["n_skipped"], int(r["selected"])]
                         for r in table))
            written.append(path)

            models = fit_gw(ds, spec, workers=cfg.workers)
            path = cfg.out / f"gw_{learner}_{slug(cname)}.csv"
            models.write_csv(path, cname)
            written.append(path)
            if learner == "logistic":
                surf = extract_coefficients(models)
                surfaces[cname] = surf
                coefs[cname] = surf.summary()
                path = cfg.out / f"coefficients_{slug(cname)}.csv"
                surf.write_csv(path)
                written.append(path)
            specs[-1] = (spec, models.skip_counts())

        ev = evaluate_gw(ds, [s for s, _ in specs], folds, workers=cfg.workers)
        out = ev.to_dict()
        for row, (_, skips) in zip(out["classes"], specs):
            row["full_fit_skip_counts"] = skips
        learners[learner] = out
        log.info("GW %s: mean class F1 %.3f", learner, ev.mean_class_f1)

    dispersion = coefficient_dispersion_by_class(surfaces) if surfaces else []
    gpath, dpath = cfg.out / GW_FILE, cfg.out / DISPERSION_FILE
    write_json(gpath, {
        "variables": list(ds.variable_names), "class_names": list(ds.class_names),
        "kernel": {"shape": w.kernel.shape, "bandwidth_mode": w.kernel.bandwidth_mode,
                   "candidates": [float(b) for b in candidates]},
        "folds": {"n_folds": w.n_folds, "method": w.fold_method, "seed": w.fold_seed},
        "learners": learners, "coefficients": coefs,
    })
    write_json(dpath, {"classes": dispersion})
    return [gpath, dpath, *written]


REPORT_SCHEMA = {
    "type": "object",
    "required": ["version", "selection", "global", "autocorrelation", "gw", "coefficients",
                 "dispersion"],
    "properties": {
        "version": {"type": "string"},
        "selection": {"type": ["object", "null"],
                      "required": ["retained_variables", "removed"]},
        "global": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["macro_f1", "per_class_f1"]}},
        "autocorrelation": {"type": "object", "required": ["learner", "p_value", "z_score"]},
        "gw": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["mean_class_f1", "classes"]}},
        "coefficients": {"type": "object", "additionalProperties": {
            "type": "array", "items": {"type": "object",
                                       "required": ["variable", "mean_abs", "sd"]}}},
        "dispersion": {"type": "array"},
    },
}


def cmd_report(cfg: PipelineConfig) -> list[Path]:
    out = cfg.out
    trace = (SelectionTrace.from_dict(read_stage_json(out / TRACE_FILE, "select-vars"))
             if cfg.select.use_selection else None)
    glob = read_stage_json(out / GLOBAL_FILE, "fit-global")
    auto = read_stage_json(out / AUTOCORR_GLOBAL_FILE, "autocorr")
    gw = read_stage_json(out / GW_FILE, "fit-gw")
    disp = read_stage_json(out / DISPERSION_FILE, "fit-gw")

    selection = None
    if trace is not None:
        removed = [{"variable": v, "stage": "communality", "communality": h}
                   for v, h in trace.stage1_removed.items()]
        removed += [{"variable": r["variable"], "stage": "mst", **{k: v for k, v in r.items()
                                                                   if k != "variable"}}
                    for r in trace.stage2_removed]
        selection = {"retained_variables": trace.retained_variables, "removed": removed,
                     "n_factors": trace.n_factors, "excluded": trace.excluded}

    gw_summary = {}
    for learner, res in gw["learners"].items():
        gw_summary[learner] = {
            "mean_class_f1": res["mean_class_f1"],
            "combined_macro_f1": res["combined"]["macro_f1"],
            "classes": [{k: row[k] for k in ("class", "f1", "f1_fold_sd", "bandwidth",
                                             "n_skipped", "evaluable")}
                        for row in res["classes"]],
        }
    coefficients = {}
    for cname, rows in gw["coefficients"].items():
        coefficients[cname] = sorted(rows, key=lambda r: -(r["mean_abs"] or 0.0))

    report = {
        "version": __version__,
        "selection": selection,
        "global": {kind: {"macro_f1": r["macro_f1"],
                          "per_class_f1": {c["class"]: c["f1"] for c in r["classes"]}}
                   for kind, r in glob["models"].items()},
        "autocorrelation": {"learner": auto["learner"],
                            "p_value": auto["global_g"]["p_value"],
                            "z_score": auto["global_g"]["z_score"],
                            "n_hotspots": auto["local"]["n_hotspots"]},
        "gw": gw_summary,
        "coefficients": coefficients,
        "dispersion": disp["classes"],
    }
    if {"logistic", "forest"} <= set(gw_summary):
        lr = {r["class"]: r["f1"] for r in gw_summary["logistic"]["classes"]}
        rf = {r["class"]: r["f1"] for r in gw_summary["forest"]["classes"]}
        report["learner_gap"] = {c: abs(lr[c] - rf[c]) for c in lr if c in rf}
    path = out / REPORT_FILE
    write_json(path, report)
    return [path]


COMMANDS = {
    "synth": cmd_synth,
    "select-vars": cmd_select_vars,
    "fit-global": cmd_fit_global,
    "autocorr": cmd_autocorr,
    "fit-gw": cmd_fit_gw,
    "report": cmd_report,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gwclass", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    helps = {
        "synth": "generate a synthetic dataset with known coefficients",
        "select-vars": "factor-analysis and spanning-tree variable selection",
        "fit-global": "spatially cross-validated global classifiers and error surfaces",
        "autocorr": "Getis-Ord G / G* on a global model's error surface",
        "fit-gw": "geographically weighted models per class and learner",
        "report": "merge the stage outputs into report.json",
    }
    for name in STAGES:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--workers", type=int, default=None, help="worker threads")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, out=args.out, workers=args.workers)
        cfg.out.mkdir(parents=True, exist_ok=True)
        for path in COMMANDS[args.stage](cfg):
            print(path)
    except GwClassError as exc:
        print(f"gwclass {args.stage}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
