#!/usr/bin/env python3
"""Fine-tune the pretrained encoder for slide-level prediction and compare
against MIL baselines that ignore patch positions.

The store plants a purely spatial signal (label = two specific prototypes
touching), so average pooling is blind to it while the position-aware
encoder is not.  Takes a few minutes on a laptop CPU.

    python3 demos/03_finetuning_and_baselines.py
"""

import dataclasses

import numpy as np

from histomask.featstore import SynthConfig, synth_generate
from histomask.presets import desk_encoder, desk_finetune, desk_pretrain
from histomask.trainer import SplitSpec, baseline_mil, finetune, pretrain, stratified_folds

store = synth_generate(
    SynthConfig(
        n_slides=120,
        grid_width=8,
        grid_height=8,
        feature_dim=64,
        n_prototypes=4,
        noise_sigma=0.1,
        task="spatial-classification",
    ),
    seed=21,
)
encoder = desk_encoder()

print("pretraining on the unlabeled slides (about a minute)...")
pre = pretrain(
    store,
    encoder,
    dataclasses.replace(desk_pretrain(seed=1), total_steps=1200, warmup_steps=120),
)
print(f"  restoration loss {pre.initial_monitor_loss:.2f} -> {pre.final_monitor_loss:.2f}")

folds = stratified_folds(store, store.slide_ids(), 5, np.random.default_rng(0))
split = SplitSpec(
    train=tuple(s for fold in folds[2:] for s in fold),
    monitor=tuple(folds[1]),
    test=tuple(folds[0]),
)
config = dataclasses.replace(
    desk_finetune("classification", seed=0), regions_train=1, regions_eval=1
)

print("\nfine-tuning the transformer (class-token averaging, dual lr)...")
transformer = finetune(store, encoder, config, split, pretrained=pre.param_arrays())
print(f"  stopped after epoch {transformer.epochs_run} (best epoch {transformer.best_epoch})")

print("training MIL baselines on the identical sampled regions...")
mil_ap = baseline_mil(store, encoder, config, split, "ap")
mil_attn = baseline_mil(store, encoder, config, split, "attn")

print("\ntest macro-AUC on the held-out fold:")
print(f"  transformer (position-aware) : {transformer.report.value:.3f}")
print(f"  MIL attention pooling        : {mil_attn.report.value:.3f}")
print(f"  MIL average pooling          : {mil_ap.report.value:.3f}")
print("\nthe bags are identical across classes by construction, so pooling")
print("methods hover near chance while the encoder reads the arrangement.")
