"""Sequential data assimilation with particle filters, ensemble Kalman
methods and Schroedinger-bridge couplings."""
from .ensemble import Ensemble, RunRecord, effective_sample_size, empirical_moments, normalize_weights
from .exceptions import ConfigError, ConvergenceError, DegeneracyError, ModelError, StepError
from .models import GaussianMapModel, ObservationModel, SdeModel, builtin_models, make_rng
from .transport import Coupling, MarkovChain, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "Ensemble", "RunRecord", "effective_sample_size", "empirical_moments", "normalize_weights",
    "ConfigError", "ConvergenceError", "DegeneracyError", "ModelError", "StepError",
    "GaussianMapModel", "ObservationModel", "SdeModel", "builtin_models", "make_rng",
    "Coupling", "MarkovChain", "sinkhorn",
]
