"""Command-line entry point.

Subcommands: ``synth``, ``inspect``, ``pretrain``, ``finetune``,
``baseline``, ``evaluate``, ``attnmap``.  Configuration files are JSON with
one object per section (``encoder``, ``pretrain``, ``finetune``, ``synth``);
unknown keys are rejected.  ``--preset desk`` or ``--preset paper`` supplies
section defaults that the config file then overrides.  Every run directory
receives the exact resolved configuration as ``config.json`` so a run is
replayable from the snapshot plus its seed, and is protected against
concurrent writers by an advisory lock file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence, 1 anything else.  The ``HISTOMASK_RUN_ROOT`` environment
variable supplies the default parent for run directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import fcntl
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import presets
from .attnviz import class_attention_map, export_heatmap, rollout
from .encoder import EncoderConfig, init_encoder_params
from .featstore import (
    ClassLabel,
    NoValidRegion,
    StoreError,
    SurvivalLabel,
    SynthConfig,
    gather_region,
    read_store,
    synth_generate,
    systematic_region_set,
    write_manifest,
    write_store,
)
from .metrics import EvalReport
from .trainer import (
    DataError,
    FinetuneConfig,
    PretrainConfig,
    SplitSpec,
    baseline_mil,
    evaluate_model,
    finetune,
    pretrain,
    split_fractions,
    stratified_folds,
)
from .trainer.common import encode_regions, stack_regions
from .trainer.models import TransformerSlideModel, build_model

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _dataclass_from_dict(cls, base, data: dict, section: str):
    field_names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - field_names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {sorted(unknown)}")
    if "foreground_fraction" in data and isinstance(data["foreground_fraction"], list):
        data = dict(data)
        data["foreground_fraction"] = tuple(data["foreground_fraction"])
    if base is None:
        return cls(**data)
    return dataclasses.replace(base, **data)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(loaded, dict):
        raise ConfigError("config file must hold a JSON object")
    return loaded


def _check_sections(raw: dict, allowed: set[str]) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")


def _resolve_encoder(raw: dict, preset: str | None) -> EncoderConfig:
    base = None
    if preset == "desk":
        base = presets.desk_encoder()
    elif preset == "paper":
        base = presets.paper_encoder()
    section = raw.get("encoder", {})
    if base is None and not section:
        base = presets.desk_encoder()
        section = {}
    try:
        return _dataclass_from_dict(EncoderConfig, base, section, "encoder")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _resolve_pretrain(raw: dict, preset: str | None, seed: int | None) -> PretrainConfig:
    base = presets.paper_pretrain() if preset == "paper" else presets.desk_pretrain()
    try:
        config = _dataclass_from_dict(PretrainConfig, base, raw.get("pretrain", {}), "pretrain")
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
        config.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _resolve_finetune(
    raw: dict, preset: str | None, task: str | None, seed: int | None
) -> FinetuneConfig:
    section = dict(raw.get("finetune", {}))
    task = task or section.pop("task", None)
    if task is None:
        raise ConfigError("a task is required: --task or finetune.task in the config")
    if preset == "paper":
        base = presets.paper_finetune(task)
    else:
        base = presets.desk_finetune(task)
    try:
        config = _dataclass_from_dict(FinetuneConfig, base, section, "finetune")
        config = dataclasses.replace(config, task=task)
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
        config.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def _run_root() -> Path:
    return Path(os.environ.get("HISTOMASK_RUN_ROOT", "runs"))


class RunDirectory:
    """Creates (or reuses) a run directory and holds an advisory flock on it."""

    def __init__(self, out: str | None, default_name: str) -> None:
        self.path = Path(out) if out else _run_root() / default_name
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock_fh = open(self.path / ".lock", "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise RuntimeError(f"run directory {self.path} is locked by another process")

    def write_snapshot(self, payload: dict) -> None:
        with open(self.path / "config.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def release(self) -> None:
        fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
        self._lock_fh.close()


def _snapshot_payload(command: str, seed: int, sections: dict, paths: dict) -> dict:
    return {
        "command": command,
        "seed": seed,
        "paths": paths,
        "region_resampling": "per-epoch",
        "config": sections,
    }


def _encoder_dict(config) -> dict:
    return dataclasses.asdict(config)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"synth"})
    section = raw.get("synth")
    if section is None:
        raise ConfigError("synth needs a 'synth' config section")
    try:
        config = _dataclass_from_dict(SynthConfig, None, section, "synth")
        config.validate()
    except TypeError as exc:
        raise ConfigError(f"synth config: {exc}") from exc
    except StoreError as exc:
        raise ConfigError(str(exc)) from exc
    store = synth_generate(config, args.seed)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_store(store, out)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x3713]))
    train, monitor = split_fractions(store.slide_ids(), (0.8, 0.2), rng)
    split_of = {sid: "train" for sid in train} | {sid: "monitor" for sid in monitor}
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.tsv"),
        [(s.slide_id, split_of[s.slide_id], s.label) for s in store],
    )
    print(f"wrote {len(store)} slides (d={store.feature_dim}) to {out}")
    return 0


def _cmd_inspect(args) -> int:
    store = read_store(args.store)
    store.validate()
    widths = [s.grid_width for s in store]
    heights = [s.grid_height for s in store]
    fg_fractions = [s.foreground.mean() for s in store]
    print(f"slides: {len(store)}")
    print(f"feature_dim: {store.feature_dim}")
    print(f"grid_width: min={min(widths)} max={max(widths)}")
    print(f"grid_height: min={min(heights)} max={max(heights)}")
    print(
        "foreground_fraction: "
        f"min={min(fg_fractions):.3f} mean={float(np.mean(fg_fractions)):.3f} "
        f"max={max(fg_fractions):.3f}"
    )
    survival = [s.label for s in store if isinstance(s.label, SurvivalLabel)]
    classes = [s.label.class_id for s in store if isinstance(s.label, ClassLabel)]
    if survival:
        events = sum(1 for lab in survival if lab.event)
        print(f"labels: survival n={len(survival)} events={events}")
    if classes:
        unique, counts = np.unique(classes, return_counts=True)
        dist = " ".join(f"{u}:{c}" for u, c in zip(unique, counts))
        print(f"labels: class n={len(classes)} distribution {dist}")
    print("store OK")
    return 0


def _cmd_pretrain(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"encoder", "pretrain"})
    encoder_config = _resolve_encoder(raw, args.preset)
    config = _resolve_pretrain(raw, args.preset, args.seed)
    store = read_store(args.store)
    run = RunDirectory(args.out, f"pretrain-seed{config.seed}")
    try:
        run.write_snapshot(
            _snapshot_payload(
                "pretrain",
                config.seed,
                {"encoder": _encoder_dict(encoder_config), "pretrain": dataclasses.asdict(config)},
                {"store": str(args.store), "out": str(run.path)},
            )
        )
        result = pretrain(store, encoder_config, config, run_dir=run.path)
    finally:
        run.release()
    print(
        f"pretrain finished: initial monitor {result.initial_monitor_loss:.4f}, "
        f"final {result.final_monitor_loss:.4f}, best {result.best_monitor_loss:.4f}"
    )
    if result.diverged:
        print("training diverged; last good checkpoint retained", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


def _default_split(store, config: FinetuneConfig) -> SplitSpec:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5917]))
    folds = stratified_folds(store, store.slide_ids(), 5, rng)
    return SplitSpec(
        train=tuple(s for fold in folds[2:] for s in fold),
        monitor=tuple(folds[1]),
        test=tuple(folds[0]),
    )


def _cmd_finetune(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"encoder", "finetune"})
    encoder_config = _resolve_encoder(raw, args.preset)
    config = _resolve_finetune(raw, args.preset, args.task, args.seed)
    store = read_store(args.store)
    pretrained = None
    if args.checkpoint:
        arrays, _ = nc.read_checkpoint(args.checkpoint)
        pretrained = _encoder_subset(arrays, encoder_config)
    split = _default_split(store, config)
    run = RunDirectory(args.out, f"finetune-{config.task}-seed{config.seed}")
    try:
        run.write_snapshot(
            _snapshot_payload(
                "finetune",
                config.seed,
                {"encoder": _encoder_dict(encoder_config), "finetune": dataclasses.asdict(config)},
                {
                    "store": str(args.store),
                    "checkpoint": str(args.checkpoint) if args.checkpoint else None,
                    "out": str(run.path),
                },
            )
        )
        result = finetune(store, encoder_config, config, split, pretrained, run_dir=run.path)
    finally:
        run.release()
    print(
        f"finetune finished: test {result.report.metric}={result.report.value:.4f} "
        f"(best epoch {result.best_epoch}, ran {result.epochs_run})"
    )
    return 0


def _cmd_baseline(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"encoder", "finetune"})
    encoder_config = _resolve_encoder(raw, args.preset)
    config = _resolve_finetune(raw, args.preset, args.task, args.seed)
    store = read_store(args.store)
    split = _default_split(store, config)
    run = RunDirectory(args.out, f"baseline-{args.variant}-{config.task}-seed{config.seed}")
    try:
        run.write_snapshot(
            _snapshot_payload(
                f"baseline-{args.variant}",
                config.seed,
                {"encoder": _encoder_dict(encoder_config), "finetune": dataclasses.asdict(config)},
                {"store": str(args.store), "out": str(run.path)},
            )
        )
        result = baseline_mil(store, encoder_config, config, split, args.variant, run_dir=run.path)
    finally:
        run.release()
    print(
        f"baseline MIL-{args.variant.upper()} finished: "
        f"test {result.report.metric}={result.report.value:.4f}"
    )
    return 0


def _encoder_subset(arrays: dict[str, np.ndarray], encoder_config: EncoderConfig) -> dict:
    """Checkpoint entries restricted to encoder parameters (drops any head)."""
    expected = set(init_encoder_params(encoder_config, np.random.default_rng(0)))
    subset = {name: arr for name, arr in arrays.items() if name in expected}
    missing = expected - set(subset)
    if missing:
        raise nc.CheckpointError(f"checkpoint lacks encoder parameters: {sorted(missing)[:5]}")
    return subset


def _cmd_evaluate(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"encoder", "finetune"})
    encoder_config = _resolve_encoder(raw, args.preset)
    config = _resolve_finetune(raw, args.preset, args.task, args.seed)
    store = read_store(args.store)
    arrays, _ = nc.read_checkpoint(args.checkpoint)
    if "head.w" not in arrays:
        raise DataError("evaluate needs a fine-tuned checkpoint containing a head")
    out_dim = arrays["head.w"].shape[1]
    rng = np.random.default_rng(0)
    model = build_model("transformer", encoder_config, out_dim, rng)
    nc.load_params_into(model.params, arrays)
    ids = store.slide_ids()
    scores, metric = evaluate_model(store, model, ids, encoder_config, config)
    metric_name = "c_index" if config.task == "survival" else "macro_auc"
    report = EvalReport.single(metric_name, metric)
    run = RunDirectory(args.out, f"evaluate-{config.task}-seed{config.seed}")
    try:
        run.write_snapshot(
            _snapshot_payload(
                "evaluate",
                config.seed,
                {"encoder": _encoder_dict(encoder_config), "finetune": dataclasses.asdict(config)},
                {
                    "store": str(args.store),
                    "checkpoint": str(args.checkpoint),
                    "out": str(run.path),
                },
            )
        )
        with open(run.path / "scores.tsv", "w", encoding="utf-8") as fh:
            fh.write("slide_id\tscore\n")
            for sid, score in zip(ids, scores):
                text = repr(float(score)) if np.ndim(score) == 0 else ",".join(repr(float(v)) for v in score)
                fh.write(f"{sid}\t{text}\n")
        with open(run.path / "report.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        with open(run.path / "report.tsv", "w", encoding="utf-8") as fh:
            fh.write(report.to_tsv())
    finally:
        run.release()
    print(f"evaluate: {metric_name}={metric:.4f} over {len(ids)} slides")
    return 0


def _cmd_attnmap(args) -> int:
    raw = _load_config_file(args.config)
    _check_sections(raw, {"encoder", "finetune"})
    encoder_config = _resolve_encoder(raw, args.preset)
    store = read_store(args.store)
    arrays, _ = nc.read_checkpoint(args.checkpoint)
    pretrained = _encoder_subset(arrays, encoder_config)
    rng = np.random.default_rng(0)
    model = TransformerSlideModel(encoder_config, 1, rng, pretrained)
    slide = store.slide(args.slide)
    specs = systematic_region_set(slide, encoder_config.region_side, args.regions)
    run = RunDirectory(args.out, f"attnmap-{args.slide}")
    try:
        run.write_snapshot(
            _snapshot_payload(
                "attnmap",
                0,
                {"encoder": _encoder_dict(encoder_config)},
                {
                    "store": str(args.store),
                    "checkpoint": str(args.checkpoint),
                    "slide": args.slide,
                    "out": str(run.path),
                },
            )
        )
        for i, spec in enumerate(specs):
            region = gather_region(store, spec)
            batch = stack_regions([region])
            out = encode_regions(batch, encoder_config, model.params)
            stack = [layer[0] for layer in out.attentions]
            heatmap = class_attention_map(rollout(stack), region.background)
            export_heatmap(heatmap, run.path / f"region{i}_x{spec.x0}_y{spec.y0}.pgm", "pgm")
            export_heatmap(heatmap, run.path / f"region{i}_x{spec.x0}_y{spec.y0}.tsv", "text")
    finally:
        run.release()
    print(f"wrote {len(specs)} attention maps to {run.path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histomask",
        description="Masked pretraining and fine-tuning over slide patch-feature grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, store=True, config=True, seed=True, out=True, preset=True):
        if store:
            p.add_argument("--store", required=True, help="feature-store file (MHFS)")
        if config:
            p.add_argument("--config", default=None, help="JSON configuration file")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="run seed override")
        if out:
            p.add_argument("--out", default=None, help="run directory")
        if preset:
            p.add_argument("--preset", choices=["desk", "paper"], default=None)

    p = sub.add_parser("synth", help="generate a synthetic feature store")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output store path")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("inspect", help="validate a store and print a summary")
    p.add_argument("--store", required=True)
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("pretrain", help="masked patch-prediction pretraining")
    common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for survival or classification")
    common(p)
    p.add_argument("--checkpoint", default=None, help="pretraining checkpoint (MHCK)")
    p.add_argument("--task", choices=["survival", "classification"], default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("baseline", help="train a MIL baseline on the same pipeline")
    common(p)
    p.add_argument("--variant", choices=["ap", "attn"], required=True)
    p.add_argument("--task", choices=["survival", "classification"], default=None)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("evaluate", help="score every slide with a fine-tuned model")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=["survival", "classification"], default=None)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("attnmap", help="export attention-rollout heatmaps")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True, help="slide id")
    p.add_argument("--regions", type=int, default=1, help="regions to map")
    p.set_defaults(func=_cmd_attnmap)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StoreError, DataError, NoValidRegion, nc.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nc.NonFiniteError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
