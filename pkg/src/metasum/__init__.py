"""Metadata-conditioned abstractive summarization at desk scale."""

__version__ = "0.1.0"

from .metadata import FeatureAssignment, FeatureKind  # noqa: F401
from .model import ModelConfig, ModelParams  # noqa: F401
from .synthgen import Case, CorpusSpec  # noqa: F401
from .training import TrainConfig  # noqa: F401
