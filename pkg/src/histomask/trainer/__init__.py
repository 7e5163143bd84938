"""Training orchestration: pretraining, fine-tuning, baselines, cross-validation."""

from .common import (
    DataError,
    EarlyStopState,
    SplitSpec,
    sample_slide_regions,
    split_fractions,
    stratified_folds,
    systematic_slide_regions,
)
from .crossval import CrossValResult, cross_validate
from .finetune import (
    FinetuneConfig,
    FinetuneResult,
    baseline_mil,
    evaluate_model,
    finetune,
    predict,
)
from .models import MilModel, TransformerSlideModel, build_model
from .pretrain import PretrainConfig, PretrainResult, monitor_restoration_loss, pretrain

__all__ = [
    "CrossValResult",
    "DataError",
    "EarlyStopState",
    "FinetuneConfig",
    "FinetuneResult",
    "MilModel",
    "PretrainConfig",
    "PretrainResult",
    "SplitSpec",
    "TransformerSlideModel",
    "baseline_mil",
    "build_model",
    "cross_validate",
    "evaluate_model",
    "finetune",
    "monitor_restoration_loss",
    "predict",
    "pretrain",
    "sample_slide_regions",
    "split_fractions",
    "stratified_folds",
    "systematic_slide_regions",
]
