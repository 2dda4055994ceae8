from .data import (
    Batch,
    Instance,
    PlantedCTRModel,
    batched,
    generate_synthetic_ctr,
    planted_model,
    read_instances,
    shard_batch,
    write_instances,
)
from .metrics import compute_auc
from .model import Activation, Minibatch, ModelConfig, Pooling, backward, bce_loss, forward
from .workflow import (
    BatchMetrics,
    OnlineResult,
    TrainerConfig,
    TrainingContext,
    online_eval,
    predict_proba,
    train_batch,
)

__all__ = [
    "Activation", "Batch", "BatchMetrics", "Instance", "Minibatch", "ModelConfig", "OnlineResult",
    "PlantedCTRModel", "Pooling", "TrainerConfig", "TrainingContext", "backward", "batched",
    "bce_loss", "compute_auc", "forward", "generate_synthetic_ctr", "online_eval", "planted_model",
    "predict_proba", "read_instances", "shard_batch", "train_batch", "write_instances",
]
