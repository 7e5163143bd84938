"""Named configuration presets.

``paper`` is the full-scale recipe (L=12, H=8, d=512, n=20, 400k steps at a
4e-5 peak); ``desk`` shrinks everything so a run finishes on a laptop CPU in
minutes (L=2, H=4, d=64, n=8) and raises the learning rates to match the
short schedules.
"""

from __future__ import annotations

from dataclasses import replace

from .encoder import EncoderConfig
from .trainer.finetune import FinetuneConfig
from .trainer.pretrain import PretrainConfig

__all__ = [
    "desk_encoder",
    "desk_finetune",
    "desk_pretrain",
    "paper_encoder",
    "paper_finetune",
    "paper_pretrain",
    "no_finetune_arm",
]


def desk_encoder() -> EncoderConfig:
    return EncoderConfig(layers=2, heads=4, model_dim=64, region_side=8)


def paper_encoder() -> EncoderConfig:
    return EncoderConfig(layers=12, heads=8, model_dim=512, region_side=20)


def desk_pretrain(seed: int = 0) -> PretrainConfig:
    return PretrainConfig(
        total_steps=2000,
        warmup_steps=200,
        batch_size=8,
        peak_lr=1e-3,
        eval_interval=200,
        seed=seed,
    )


def paper_pretrain(seed: int = 0) -> PretrainConfig:
    return PretrainConfig(
        total_steps=400_000,
        warmup_steps=8000,
        batch_size=64,
        peak_lr=4e-5,
        eval_interval=2000,
        seed=seed,
    )


def desk_finetune(task: str, seed: int = 0) -> FinetuneConfig:
    return FinetuneConfig(
        task=task,
        regions_train=4,
        regions_eval=8,
        backend_lr=3e-4,
        max_epochs=30,
        patience=5,
        batch_size=8,
        seed=seed,
    )


def paper_finetune(task: str, seed: int = 0) -> FinetuneConfig:
    return FinetuneConfig(task=task, seed=seed)


def no_finetune_arm(config: FinetuneConfig) -> FinetuneConfig:
    """Freeze the transformer backend; only the head trains."""
    return replace(config, backend_lr=0.0)
