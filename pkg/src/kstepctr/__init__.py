"""k-step Adam training for sparse CTR models on a simulated multi-GPU node."""

from . import ledger, optimizer, store, topology, trainer
from .config import ConfigError, ExperimentConfig, validate
from .trainer.estimator import KStepCTRClassifier

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "KStepCTRClassifier", "ledger", "optimizer", "store",
    "topology", "trainer", "validate",
]
