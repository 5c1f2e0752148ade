"""Importance-sampling active learning for lognormal seismic fragility curves."""
from .model import FragilityParams, ParamBounds, RegularizerConfig, fragility_prob, quad_loss, regularizer
from .estimators import ISALFragility, LeastSquaresFragility, MLEFragility

__version__ = "0.1.0"

__all__ = [
    "FragilityParams",
    "ParamBounds",
    "RegularizerConfig",
    "fragility_prob",
    "quad_loss",
    "regularizer",
    "ISALFragility",
    "LeastSquaresFragility",
    "MLEFragility",
    "__version__",
]
