"""End-to-end orchestration: extraction, encoding, classification, ablation."""

from .ablation import AblationResult, ablation_matrix, run_ablation
from .config import PipelineConfig, config_from_dict, load_config
from .extract import PartialFailure, run_extract
from .train import Encoders, LeakageError, fit_encoders, run_train_eval

__all__ = [
    "AblationResult", "Encoders", "LeakageError", "PartialFailure", "PipelineConfig",
    "ablation_matrix", "config_from_dict", "fit_encoders", "load_config", "run_ablation",
    "run_extract", "run_train_eval",
]
