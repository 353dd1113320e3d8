"""Fairness-aware, domain-generalizing diffusion generator for tabular data."""

from .errors import (
    ConfigError, DataError, EvaluationError, FairDiffError, FitError, LoadError, MetricError,
    NumericError, SchemaError, UsageError,
)
from .estimator import FairDiffusionGenerator
from .fairness import DownstreamClassifier, FairnessReport, PredictionSet, r_dp, r_eop
from .guidance import GuidanceWeights, LabelRequest, generate, guided_score
from .meta import MetaHyperparams
from .nn import MlpParams, MlpSpec
from .sde import NoiseSchedule
from .tabular import EncodedDataset, TabularEncoder, TabularSchema

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DownstreamClassifier", "EncodedDataset", "EvaluationError",
    "FairDiffError", "FairDiffusionGenerator", "FairnessReport", "FitError", "GuidanceWeights",
    "LabelRequest", "LoadError", "MetaHyperparams", "MetricError", "MlpParams", "MlpSpec",
    "NoiseSchedule", "NumericError", "PredictionSet", "SchemaError", "TabularEncoder",
    "TabularSchema", "UsageError", "generate", "guided_score", "r_dp", "r_eop",
]
