"""Geographically weighted classification of categorical outcomes over spatial units."""

__version__ = "0.1.0"

from .data import SpatialDataset, UnitSchema, load_units_csv, standardize_features  # noqa: E402
from .errors import GwClassError  # noqa: E402
from .evaluation import evaluate_global, evaluate_gw, f1_macro, spatial_kfold  # noqa: E402
from .forest import ForestParams, fit_forest, predict_forest  # noqa: E402
from .gw import GwFitSpec, fit_gw, select_bandwidth  # noqa: E402
from .kernels import KernelSpec, NeighborGraph, neighborhood_graph  # noqa: E402
from .linear import fit_binary_logistic, fit_multinomial_logistic  # noqa: E402
from .spatial_stats import global_g, local_g_star  # noqa: E402
from .synth import SynthSpec, generate  # noqa: E402
from .varsel import select_variables  # noqa: E402

__all__ = [
    "ForestParams", "GwClassError", "GwFitSpec", "KernelSpec", "NeighborGraph",
    "SpatialDataset", "SynthSpec", "UnitSchema", "evaluate_global", "evaluate_gw",
    "f1_macro", "fit_binary_logistic", "fit_forest", "fit_gw", "fit_multinomial_logistic",
    "generate", "global_g", "load_units_csv", "local_g_star", "neighborhood_graph",
    "predict_forest", "select_bandwidth", "select_variables", "spatial_kfold",
    "standardize_features",
]
