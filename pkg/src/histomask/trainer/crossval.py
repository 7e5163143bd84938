"""Repeated stratified k-fold cross-validation over slides."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..encoder import EncoderConfig
from ..featstore import FeatureStore, SurvivalLabel
from ..metrics import EvalReport
from .common import DataError, SplitSpec, stratified_folds, stratum_of
from .finetune import FinetuneConfig, baseline_mil, finetune

__all__ = ["CrossValResult", "cross_validate"]


@dataclass
class CrossValResult:
    report: EvalReport
    fold_assignments: list[dict[str, list[str]]] = field(default_factory=list)
    per_run: list[dict] = field(default_factory=list)


def cross_validate(
    store: FeatureStore,
    encoder_config: EncoderConfig,
    config: FinetuneConfig,
    n_folds: int = 5,
    repeats: int = 1,
    pretrained: dict[str, np.ndarray] | None = None,
    model_kind: str = "transformer",
    mil_variant: str = "ap",
) -> CrossValResult:
    """Per repeat: reshuffled stratified folds; per fold: test = fold i,
    monitor = fold i+1, train = the rest (a 20/20/60 split at five folds).
    """
    ids = store.slide_ids()
    _check_stratification(store, ids, n_folds, config)
    values: list[float] = []
    result = CrossValResult(report=EvalReport.single("pending", float("nan")))
    for repeat in range(repeats):
        fold_rng = np.random.default_rng(np.random.SeedSequence([config.seed, repeat, 0xF01D]))
        folds = stratified_folds(store, ids, n_folds, fold_rng)
        result.fold_assignments.append(
            {f"fold{i}": list(fold) for i, fold in enumerate(folds)}
        )
        for i in range(n_folds):
            test = folds[i]
            monitor = folds[(i + 1) % n_folds]
            train = [
                s
                for j, fold in enumerate(folds)
                if j != i and j != (i + 1) % n_folds
                for s in fold
            ]
            split = SplitSpec(train=tuple(train), monitor=tuple(monitor), test=tuple(test))
            run_config = replace(config, seed=config.seed + 1000 * repeat + i)
            if model_kind == "transformer":
                run = finetune(store, encoder_config, run_config, split, pretrained)
            else:
                run = baseline_mil(store, encoder_config, run_config, split, mil_variant)
            values.append(run.report.value)
            result.per_run.append(
                {
                    "repeat": repeat,
                    "fold": i,
                    "metric": run.report.metric,
                    "value": run.report.value,
                    "best_epoch": run.best_epoch,
                    "epochs_run": run.epochs_run,
                }
            )
    metric_name = "c_index" if config.task == "survival" else "macro_auc"
    result.report = EvalReport.from_folds(metric_name, values)
    return result


def _check_stratification(
    store: FeatureStore, ids: list[str], n_folds: int, config: FinetuneConfig
) -> None:
    counts: dict[int, int] = {}
    for slide_id in ids:
        stratum = stratum_of(store.slide(slide_id).label)
        counts[stratum] = counts.get(stratum, 0) + 1
    if config.task == "survival":
        label = store.slide(ids[0]).label
        if not isinstance(label, SurvivalLabel):
            raise DataError("survival task on a store without survival labels")
        if counts.get(1, 0) < n_folds:
            raise DataError(f"need at least {n_folds} events for stratified folds")
    else:
        for stratum, count in counts.items():
            if count < n_folds:
                raise DataError(
                    f"class {stratum} has {count} slides, fewer than {n_folds} folds"
                )
