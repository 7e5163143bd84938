"""Masked patch-prediction pretraining loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..encoder import EncoderConfig, init_encoder_params
from ..featstore import FeatureStore, gather_region, sample_region
from ..losses import restoration_loss
from ..masking import blockwise_mask
from .common import DataError, encode_regions, split_fractions, stack_regions

__all__ = ["PretrainConfig", "PretrainResult", "pretrain", "monitor_restoration_loss"]


@dataclass(frozen=True)
class PretrainConfig:
    """Pretraining knobs; defaults follow the full-scale recipe, desk presets shrink them."""

    total_steps: int
    warmup_steps: int
    mask_rate: float = 0.4
    batch_size: int = 64
    peak_lr: float = 4e-5
    floor_lr: float = 0.0
    weight_decay: float = 0.01
    train_fraction: float = 0.8
    alpha: float = 2.0
    beta: float = 1.0
    tau: float = 0.1
    score_mode: str = "negated"
    eval_interval: int = 200
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.mask_rate < 1.0):
            raise ValueError("mask rate must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch size and total steps must be >= 1")
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError("train fraction must lie strictly between 0 and 1")
        if self.eval_interval < 1:
            raise ValueError("eval interval must be >= 1")


@dataclass
class PretrainResult:
    params: dict[str, nc.Tensor]
    optimizer: nc.AdamWState
    train_ids: list[str]
    monitor_ids: list[str]
    train_log: list[tuple[int, float, float, float, float]] = field(default_factory=list)
    monitor_log: list[tuple[int, float]] = field(default_factory=list)
    initial_monitor_loss: float = float("nan")
    final_monitor_loss: float = float("nan")
    best_monitor_loss: float = float("nan")
    diverged: bool = False

    def param_arrays(self) -> dict[str, np.ndarray]:
        return nc.params_to_arrays(self.params)


def _pretrain_batch(
    store: FeatureStore,
    slide_ids: list[str],
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    rng: np.random.Generator,
):
    """Sample one region per slot, mask it, and collect target rows."""
    regions = []
    plans = []
    for slide_id in slide_ids:
        spec = sample_region(store.slide(slide_id), encoder_config.region_side, rng)
        region = gather_region(store, spec)
        plan = blockwise_mask(region, config.mask_rate, rng)
        regions.append(region)
        plans.append(plan)
    targets = np.concatenate(
        [r.features[list(p.masked_positions)] for r, p in zip(regions, plans)]
    )
    batch = stack_regions(regions, [p.masked_positions for p in plans])
    return batch, plans, targets


def _masked_token_rows(output_tokens: nc.Tensor, plans, seq_len: int) -> nc.Tensor:
    """Gather transformer outputs at every masked grid cell, batch-mixed."""
    flat_idx = np.concatenate(
        [
            region_idx * seq_len + 1 + np.asarray(plan.masked_positions, dtype=np.int64)
            for region_idx, plan in enumerate(plans)
        ]
    )
    r, s, d = output_tokens.shape
    return nc.take(output_tokens.reshape(r * s, d), flat_idx)


def monitor_restoration_loss(
    store: FeatureStore,
    monitor_ids: list[str],
    params: dict[str, nc.Tensor],
    config: PretrainConfig,
    encoder_config: EncoderConfig,
) -> float:
    """Restoration loss on the monitor split with frozen sampling.

    The sampling stream is rebuilt from the run seed on every call, so each
    evaluation sees the same regions, masks and chunking and the values are
    directly comparable across training steps.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x40A17]))
    total = 0.0
    count = 0
    for start in range(0, len(monitor_ids), config.batch_size):
        chunk = monitor_ids[start : start + config.batch_size]
        batch, plans, targets = _pretrain_batch(store, chunk, config, encoder_config, rng)
        out = encode_regions(batch, encoder_config, params)
        rows = _masked_token_rows(out.tokens, plans, encoder_config.seq_len)
        _, terms = restoration_loss(
            rows, targets, config.alpha, config.beta, config.tau, config.score_mode
        )
        k = len(targets)
        total += terms.total * k
        count += k
    return total / count


def pretrain(
    store: FeatureStore,
    encoder_config: EncoderConfig,
    config: PretrainConfig,
    run_dir: str | Path | None = None,
    init_arrays: dict[str, np.ndarray] | None = None,
) -> PretrainResult:
    """Full pretraining run; deterministic in (store, configs, seed).

    On numerical divergence the parameters snapshotted at the last monitor
    evaluation are restored and the result is flagged, never re-raised.
    """
    config.validate()
    if len(store) < 2:
        raise DataError("pretraining needs at least 2 slides for a train/monitor split")
    root = np.random.SeedSequence(config.seed)
    init_seq, split_seq, sample_seq = root.spawn(3)
    params = init_encoder_params(encoder_config, np.random.default_rng(init_seq))
    if init_arrays is not None:
        nc.load_params_into(params, init_arrays)
    train_ids, monitor_ids = split_fractions(
        store.slide_ids(),
        (config.train_fraction, 1.0 - config.train_fraction),
        np.random.default_rng(split_seq),
    )
    if not monitor_ids:
        raise DataError("monitor split is empty; lower train_fraction or add slides")

    optimizer = nc.AdamWState(weight_decay=config.weight_decay)
    schedule = nc.LrSchedule(
        peak_lr=config.peak_lr,
        warmup_steps=config.warmup_steps,
        total_steps=config.total_steps,
        floor_lr=config.floor_lr,
    )
    result = PretrainResult(
        params=params, optimizer=optimizer, train_ids=train_ids, monitor_ids=monitor_ids
    )

    def snapshot() -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in params.items()}

    initial = monitor_restoration_loss(store, monitor_ids, params, config, encoder_config)
    result.initial_monitor_loss = initial
    result.best_monitor_loss = initial
    result.monitor_log.append((0, initial))
    best_arrays = snapshot()
    last_good = snapshot()

    sample_rng = np.random.default_rng(sample_seq)
    train_rng_seq = root.spawn(1)[0]
    dropout_rng = np.random.default_rng(train_rng_seq)
    seq_len = encoder_config.seq_len

    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            chosen = [
                train_ids[i]
                for i in sample_rng.integers(len(train_ids), size=config.batch_size)
            ]
            batch, plans, targets = _pretrain_batch(
                store, chosen, config, encoder_config, sample_rng
            )
            lr = nc.lr_at(schedule, step)
            with nc.GradGraph() as graph:
                out = encode_regions(batch, encoder_config, params, train_rng=dropout_rng)
                rows = _masked_token_rows(out.tokens, plans, seq_len)
                loss, terms = restoration_loss(
                    rows, targets, config.alpha, config.beta, config.tau, config.score_mode
                )
                grads = nc.grads_by_name(nc.backward(graph, loss), params)
            nc.adamw_step(optimizer, params, grads, lr)
            result.train_log.append((step, lr, terms.l2, terms.contrastive, terms.total))
            if step % config.eval_interval == 0 or step == config.total_steps:
                value = monitor_restoration_loss(
                    store, monitor_ids, params, config, encoder_config
                )
                result.monitor_log.append((step, value))
                last_good = snapshot()
                if value < result.best_monitor_loss:
                    result.best_monitor_loss = value
                    best_arrays = snapshot()
    except nc.NonFiniteError:
        result.diverged = True
        for name, p in params.items():
            p.data = last_good[name]

    result.final_monitor_loss = result.monitor_log[-1][1]
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_pretrain_logs(run_dir, result)
        nc.write_checkpoint(
            run_dir / "checkpoint_last.mhck",
            nc.params_to_arrays(params),
            nc.optimizer_entries(optimizer),
        )
        nc.write_checkpoint(run_dir / "checkpoint_best.mhck", best_arrays, {})
    return result


def _write_pretrain_logs(run_dir: Path, result: PretrainResult) -> None:
    with open(run_dir / "train_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("step\tlr\tl2\tcontrastive\ttotal\n")
        for step, lr, l2, contrastive, total in result.train_log:
            fh.write(f"{step}\t{lr!r}\t{l2!r}\t{contrastive!r}\t{total!r}\n")
    with open(run_dir / "monitor_log.tsv", "w", encoding="utf-8") as fh:
        fh.write("step\tmonitor_loss\n")
        for step, value in result.monitor_log:
            fh.write(f"{step}\t{value!r}\n")
