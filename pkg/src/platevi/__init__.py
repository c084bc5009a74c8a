"""Plate-amortized stochastic variational inference for hierarchical models."""

from .diffcore import Array, Parameter, Tape
from .distributions import LogNormal, Normal
from .estimator import PAVI
from .family import FamilyConfig, VariationalFamily, build_family
from .model import PlateBatch, PlateDecl, TemplateDecl, TemplateGraph, gre_model, hv_model
from .modelfile import load_bundled, parse_model, serialize_model
from .oracle import GreSpec, empirical_mean_elbo_baseline, gre_exact_posterior, gre_log_evidence
from .trainer import TrainConfig, Trace, build_svi_baseline, detect_plateau, full_elbo, train

__version__ = "0.1.0"

__all__ = [
    "Array",
    "Parameter",
    "Tape",
    "Normal",
    "LogNormal",
    "PAVI",
    "FamilyConfig",
    "VariationalFamily",
    "build_family",
    "build_svi_baseline",
    "PlateBatch",
    "PlateDecl",
    "TemplateDecl",
    "TemplateGraph",
    "gre_model",
    "hv_model",
    "load_bundled",
    "parse_model",
    "serialize_model",
    "GreSpec",
    "gre_exact_posterior",
    "gre_log_evidence",
    "empirical_mean_elbo_baseline",
    "TrainConfig",
    "Trace",
    "detect_plateau",
    "full_elbo",
    "train",
]
