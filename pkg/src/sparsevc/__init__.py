"""Sparse varying-coefficient regression for irregular longitudinal data."""

__version__ = "0.1.0"

from .datamodel import (
    LongitudinalDataset,
    MissingPolicy,
    Subject,
    Visit,
    ingest_csv,
    restrict_waves,
    summarize,
)
from .kernel import KernelSpec, build_blocks
from .solver import FitConfig, FittedModel, fit_one_step

__all__ = [
    "FitConfig",
    "FittedModel",
    "KernelSpec",
    "LongitudinalDataset",
    "MissingPolicy",
    "Subject",
    "Visit",
    "build_blocks",
    "fit_one_step",
    "ingest_csv",
    "restrict_waves",
    "summarize",
]
