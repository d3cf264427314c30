from .harness import (
    ClassWeights,
    LrPlan,
    Partition,
    ScenarioConfig,
    TrainResult,
    assign_learning_rates,
    compute_class_weights,
    depth_decay_rates,
    evaluate,
    make_predictions,
    select_trainable,
    tier_of_layer,
    train,
)
from .model import (
    CogAdaptModel,
    Head,
    ModelConfig,
    ResidualBlock,
    ToyEncoder,
    model_forward,
    predict_proba,
    toy_encoder_forward,
)

__all__ = [
    "ClassWeights", "LrPlan", "Partition", "ScenarioConfig", "TrainResult",
    "assign_learning_rates", "compute_class_weights", "depth_decay_rates", "evaluate",
    "make_predictions", "select_trainable", "tier_of_layer", "train", "CogAdaptModel",
    "Head", "ModelConfig", "ResidualBlock", "ToyEncoder", "model_forward",
    "predict_proba", "toy_encoder_forward",
]
