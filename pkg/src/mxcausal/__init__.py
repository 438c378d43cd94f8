"""Treatment-effect and LATE estimation with exposures missing at random."""

from .data import Dataset, ObservedSample, PositivityConfig, summarize, validate
from .estimator import crossfit_estimate, eif_evaluate, make_folds, plugin_estimate
from .learners import LearnerChoice
from .nuisance import LearnerSpec, NuisanceModel, OracleNuisances, fit_all
from .smoothing import BACKEND

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "ObservedSample",
    "PositivityConfig",
    "validate",
    "summarize",
    "LearnerChoice",
    "LearnerSpec",
    "NuisanceModel",
    "OracleNuisances",
    "fit_all",
    "crossfit_estimate",
    "plugin_estimate",
    "eif_evaluate",
    "make_folds",
    "BACKEND",
    "__version__",
]
