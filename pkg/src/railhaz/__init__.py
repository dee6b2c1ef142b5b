"""Hazard models for train delays.

Recurrent primary delays are modelled with a stratified Cox model and the
punctual/delayed arrival status with a panel-observed continuous-time Markov
chain, optionally with a changepoint along the line.
"""

__version__ = "0.1.0"

from .ctmc import CtmcFit, CtmcParams, IntensitySpec, PanelPath, fit_ctmc, panel_loglik
from .errors import DataError, JoinError, RailhazError, SchemaError, SingularInformationError, ValidationError
from .inference import LrtResult, lr_test
from .ingest import SectionRecord, ingest
from .simgen import SimConfig, simulate_cox, simulate_ctmc
from .survival import CoxDataset, CoxFit, fit_cox, partial_loglik, predict_survival

__all__ = [
    "__version__",
    "CoxDataset",
    "CoxFit",
    "CtmcFit",
    "CtmcParams",
    "DataError",
    "IntensitySpec",
    "JoinError",
    "LrtResult",
    "PanelPath",
    "RailhazError",
    "SchemaError",
    "SectionRecord",
    "SimConfig",
    "SingularInformationError",
    "ValidationError",
    "fit_cox",
    "fit_ctmc",
    "ingest",
    "lr_test",
    "panel_loglik",
    "partial_loglik",
    "predict_survival",
    "simulate_cox",
    "simulate_ctmc",
]
