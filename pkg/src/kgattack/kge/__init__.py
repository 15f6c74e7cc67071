"""Knowledge graph embedding models, training and filtered evaluation."""
from .checkpoint import load_model, save_model
from .evaluation import EvalResult, RankResult, evaluate, rank_targets, select_attack_targets, summarize
from .models import ARCHITECTURES, ComplEx, ConvE, DistMult, KgeModel, TransE, build_model
from .training import TrainConfig, TrainingDiverged, default_config, train

__all__ = [
    "ARCHITECTURES", "ComplEx", "ConvE", "DistMult", "EvalResult", "KgeModel", "RankResult",
    "TrainConfig", "TrainingDiverged", "TransE", "build_model", "default_config", "evaluate",
    "load_model", "rank_targets", "save_model", "select_attack_targets", "summarize", "train",
]
