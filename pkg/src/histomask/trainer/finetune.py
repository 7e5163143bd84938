"""Fine-tuning loop with dual learning rates, early stopping, and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..encoder import EncoderConfig
from ..featstore import ClassLabel, FeatureStore, SurvivalLabel
from ..losses import cox_loss, cross_entropy
from ..metrics import EvalReport, c_index, macro_auc
from .common import (
    DataError,
    EarlyStopState,
    SplitSpec,
    class_ids,
    sample_slide_regions,
    survival_arrays,
    systematic_slide_regions,
)
from .models import build_model

__all__ = ["FinetuneConfig", "FinetuneResult", "baseline_mil", "evaluate_model", "finetune", "predict"]

HEAD_LR_SURVIVAL = 1e-3
HEAD_LR_CLASSIFICATION = 3e-3


@dataclass(frozen=True)
class FinetuneConfig:
    task: str  # "survival" | "classification"
    regions_train: int = 4
    regions_eval: int = 8
    coverage_train: float = 1.0
    coverage_eval: float = 1.0
    head_lr: float | None = None
    backend_lr: float = 1e-5
    weight_decay: float = 0.01
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 8
    max_overlap: float = 0.5
    monitor: str = "loss"  # "loss" | "metric"
    n_classes: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.task not in ("survival", "classification"):
            raise ValueError(f"unknown task '{self.task}'")
        if self.regions_train < 1 or self.regions_eval < 1:
            raise ValueError("region counts must be >= 1")
        if not (0.0 < self.coverage_train <= 1.0 and 0.0 < self.coverage_eval <= 1.0):
            raise ValueError("coverage fractions must lie in (0, 1]")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("patience, max_epochs and batch_size must be >= 1")
        if self.monitor not in ("loss", "metric"):
            raise ValueError("monitor must be 'loss' or 'metric'")

    def resolved_head_lr(self) -> float:
        if self.head_lr is not None:
            return self.head_lr
        return HEAD_LR_SURVIVAL if self.task == "survival" else HEAD_LR_CLASSIFICATION

    def frozen_backend(self) -> "FinetuneConfig":
        """The no-fine-tuning ablation arm: backend stays at its checkpoint."""
        return replace(self, backend_lr=0.0)


@dataclass
class FinetuneResult:
    model: object
    report: EvalReport
    best_epoch: int
    epochs_run: int
    monitor_log: list[tuple[int, float]] = field(default_factory=list)
    test_scores: dict[str, np.ndarray] = field(default_factory=dict)


def _out_dim(store: FeatureStore, config: FinetuneConfig) -> int:
    if config.task == "survival":
        return 1
    if config.n_classes is not None:
        return config.n_classes
    classes = {
        s.label.class_id for s in store if isinstance(s.label, ClassLabel)
    }
    if not classes:
        raise DataError("classification task but the store has no class labels")
    return max(classes) + 1


def _task_loss(scores: nc.Tensor, store: FeatureStore, ids, config: FinetuneConfig) -> nc.Tensor:
    if config.task == "survival":
        times, events = survival_arrays(store, ids)
        return cox_loss(scores, times, events)
    return cross_entropy(scores, class_ids(store, ids))


def _task_metric(scores: np.ndarray, store: FeatureStore, ids, config: FinetuneConfig) -> float:
    if config.task == "survival":
        times, events = survival_arrays(store, ids)
        return c_index(scores, times, events)
    return macro_auc(scores, class_ids(store, ids))


def predict(
    store: FeatureStore,
    model,
    ids,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
) -> np.ndarray:
    """Deterministic per-slide scores via systematic region sampling."""
    scores = []
    for slide_id in ids:
        regions = systematic_slide_regions(
            store,
            slide_id,
            encoder_config.region_side,
            config.regions_eval,
            config.coverage_eval,
            config.max_overlap,
        )
        out = model.forward([regions])
        scores.append(out.data[0] if out.ndim == 1 else out.data[0, :])
    return np.asarray(scores)


def evaluate_model(
    store: FeatureStore,
    model,
    ids,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
) -> tuple[np.ndarray, float]:
    scores = predict(store, model, ids, encoder_config, config)
    return scores, _task_metric(scores, store, ids, config)


def _monitor_value(
    store: FeatureStore, model, ids, encoder_config, config
) -> tuple[float, float]:
    """(value to minimize, metric) on the monitor split."""
    scores = predict(store, model, ids, encoder_config, config)
    scores_t = nc.constant(scores)
    loss = float(_task_loss(scores_t, store, ids, config).data)
    metric = _task_metric(scores, store, ids, config)
    return (loss if config.monitor == "loss" else -metric), metric


def _train_slide_model(
    model,
    store: FeatureStore,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
    split: SplitSpec,
    run_dir: str | Path | None = None,
) -> FinetuneResult:
    config.validate()
    train_ids = list(split.train)
    if not train_ids or not split.monitor:
        raise DataError("need non-empty train and monitor splits")
    if config.task == "survival":
        _, train_events = survival_arrays(store, train_ids)
        if not train_events.any():
            raise DataError("no events in the survival training fold")
        _, monitor_events = survival_arrays(store, split.monitor)
        if not monitor_events.any():
            raise DataError("no events in the survival monitor fold")
    else:
        class_ids(store, train_ids)  # validates label kinds

    head_names = set(model.head_param_names())
    head_params = {n: p for n, p in model.params.items() if n in head_names}
    backend_params = {n: p for n, p in model.params.items() if n not in head_names}
    head_state = nc.AdamWState(weight_decay=config.weight_decay)
    backend_state = nc.AdamWState(weight_decay=config.weight_decay)
    head_lr = config.resolved_head_lr()

    root = np.random.SeedSequence([config.seed, 0xF17E])
    epoch_seq, dropout_seq = root.spawn(2)
    epoch_rng = np.random.default_rng(epoch_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    stopper = EarlyStopState(patience=config.patience)
    best_arrays = {n: p.data.copy() for n, p in model.params.items()}
    monitor_log: list[tuple[int, float]] = []
    epochs_run = 0

    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = [train_ids[i] for i in epoch_rng.permutation(len(train_ids))]
        for start in range(0, len(order), config.batch_size):
            chunk = order[start : start + config.batch_size]
            if config.task == "survival":
                _, events = survival_arrays(store, chunk)
                if not events.any():
                    continue  # Cox normalizer undefined without an event
            slide_regions = [
                sample_slide_regions(
                    store,
                    slide_id,
                    encoder_config.region_side,
                    config.regions_train,
                    config.coverage_train,
                    epoch_rng,
                    config.max_overlap,
                )
                for slide_id in chunk
            ]
            with nc.GradGraph() as graph:
                scores = model.forward(slide_regions, train_rng=dropout_rng)
                loss = _task_loss(scores, store, chunk, config)
                grads = nc.grads_by_name(nc.backward(graph, loss), model.params)
            if head_params and head_lr > 0.0:
                nc.adamw_step(head_state, head_params, grads, head_lr)
            if backend_params and config.backend_lr > 0.0:
                nc.adamw_step(backend_state, backend_params, grads, config.backend_lr)
        value, _metric = _monitor_value(store, model, split.monitor, encoder_config, config)
        monitor_log.append((epoch, value))
        improved = value < stopper.best_value
        should_stop = stopper.update(value, epoch)
        if improved:
            best_arrays = {n: p.data.copy() for n, p in model.params.items()}
        if should_stop:
            break

    for name, p in model.params.items():
        p.data = best_arrays[name]

    if split.test:
        test_scores, metric = evaluate_model(store, model, split.test, encoder_config, config)
        metric_name = "c_index" if config.task == "survival" else "macro_auc"
        report = EvalReport.single(metric_name, metric)
        scores_by_id = {sid: test_scores[i] for i, sid in enumerate(split.test)}
    else:
        report = EvalReport.single("monitor", stopper.best_value)
        scores_by_id = {}

    result = FinetuneResult(
        model=model,
        report=report,
        best_epoch=stopper.best_epoch,
        epochs_run=epochs_run,
        monitor_log=monitor_log,
        test_scores=scores_by_id,
    )
    if run_dir is not None:
        _write_finetune_logs(Path(run_dir), model, result)
    return result


def finetune(
    store: FeatureStore,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
    split: SplitSpec,
    pretrained: dict[str, np.ndarray] | None = None,
    run_dir: str | Path | None = None,
) -> FinetuneResult:
    """Train the transformer slide model, optionally from a pretrained checkpoint."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x10DE1]))
    model = build_model("transformer", encoder_config, _out_dim(store, config), rng, pretrained)
    return _train_slide_model(model, store, encoder_config, config, split, run_dir)


def baseline_mil(
    store: FeatureStore,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
    split: SplitSpec,
    variant: str,
    run_dir: str | Path | None = None,
) -> FinetuneResult:
    """MIL baselines on the identical sampling pipeline ('ap' or 'attn')."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB45E]))
    kind = "mil-ap" if variant == "ap" else "mil-attn"
    model = build_model(kind, encoder_config, _out_dim(store, config), rng)
    return _train_slide_model(model, store, encoder_config, config, split, run_dir)


def _write_finetune_logs(run_dir: Path, model, result: FinetuneResult) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "monitor_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\tmonitor_value\n")
        for epoch, value in result.monitor_log:
            fh.write(f"{epoch}\t{value!r}\n")
    nc.write_checkpoint(
        run_dir / "checkpoint_best.mhck", nc.params_to_arrays(model.params), {}
    )
    with open(run_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(result.report.to_json() + "\n")
    with open(run_dir / "report.tsv", "w", encoding="utf-8") as fh:
        fh.write(result.report.to_tsv())
