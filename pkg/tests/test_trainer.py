"""Trainer machinery: splits, early stopping, models, loops, determinism."""

import dataclasses

import numpy as np
import pytest

from histomask import numcore as nc
from histomask.encoder import EncoderConfig
from histomask.featstore import SynthConfig, synth_generate
from histomask.trainer import (
    DataError,
    EarlyStopState,
    FinetuneConfig,
    PretrainConfig,
    SplitSpec,
    baseline_mil,
    cross_validate,
    finetune,
    predict,
    pretrain,
    sample_slide_regions,
    split_fractions,
    stratified_folds,
)
from histomask.trainer.models import MilModel, TransformerSlideModel
from histomask.trainer.common import stack_regions, encode_regions, systematic_slide_regions

TINY_ENC = EncoderConfig(layers=1, heads=2, model_dim=16, region_side=4, dropout=0.0)


def tiny_store(task="classification", n_slides=12, seed=0, d=16, grid=8):
    config = SynthConfig(
        n_slides=n_slides,
        grid_width=grid,
        grid_height=grid,
        feature_dim=d,
        n_prototypes=4,
        noise_sigma=0.1,
        task=task,
        n_classes=2,
    )
    return synth_generate(config, seed)


def tiny_ft(task="classification", **kwargs):
    defaults = dict(
        task=task,
        regions_train=2,
        regions_eval=2,
        max_epochs=2,
        patience=2,
        batch_size=4,
        backend_lr=1e-3,
        seed=0,
    )
    defaults.update(kwargs)
    return FinetuneConfig(**defaults)


def three_way_split(store):
    ids = store.slide_ids()
    third = len(ids) // 3
    return SplitSpec(
        train=tuple(ids[: len(ids) - 2 * third]),
        monitor=tuple(ids[len(ids) - 2 * third : len(ids) - third]),
        test=tuple(ids[len(ids) - third :]),
    )


class TestEarlyStop:
    def test_documented_sequence(self):
        state = EarlyStopState(patience=5)
        stops = []
        for epoch, value in enumerate([3.0, 2.9, 2.9, 2.95, 2.91, 2.92, 2.93], start=1):
            stops.append(state.update(value, epoch))
        assert stops == [False, False, False, False, False, False, True]
        assert state.best_epoch == 2
        assert state.best_value == 2.9

    def test_counter_resets_on_strict_improvement(self):
        state = EarlyStopState(patience=2)
        assert not state.update(1.0, 1)
        assert not state.update(1.0, 2)  # stagnant 1
        assert not state.update(0.9, 3)  # reset
        assert not state.update(0.95, 4)
        assert state.update(0.95, 5)


class TestSplits:
    def test_fraction_split_partitions(self):
        rng = np.random.default_rng(0)
        ids = [f"s{i}" for i in range(17)]
        parts = split_fractions(ids, (0.8, 0.2), rng)
        assert sorted(parts[0] + parts[1]) == sorted(ids)
        assert len(parts[1]) == int(17 * 0.2)

    def test_stratified_folds_partition_and_balance(self):
        store = tiny_store(n_slides=20)
        rng = np.random.default_rng(1)
        folds = stratified_folds(store, store.slide_ids(), 5, rng)
        flat = [s for fold in folds for s in fold]
        assert sorted(flat) == sorted(store.slide_ids())
        for fold in folds:
            classes = {store.slide(s).label.class_id for s in fold}
            assert classes == {0, 1}

    def test_same_seed_same_folds(self):
        store = tiny_store(n_slides=15)
        a = stratified_folds(store, store.slide_ids(), 5, np.random.default_rng(7))
        b = stratified_folds(store, store.slide_ids(), 5, np.random.default_rng(7))
        assert a == b


class TestSampling:
    def test_coverage_marks_fraction_background(self):
        store = tiny_store()
        rng = np.random.default_rng(2)
        regions = sample_slide_regions(store, store.slide_ids()[0], 4, 2, 0.25, rng)
        for region in regions:
            kept = int((~region.background).sum())
            assert kept == int(np.ceil(0.25 * 16)) or kept >= 1
            assert np.all(region.features[region.background] == 0.0)

    def test_systematic_regions_deterministic(self):
        store = tiny_store()
        sid = store.slide_ids()[0]
        a = systematic_slide_regions(store, sid, 4, 3)
        b = systematic_slide_regions(store, sid, 4, 3)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.features, rb.features)


class TestModels:
    def test_single_region_representation_is_class_token(self):
        store = tiny_store()
        rng = np.random.default_rng(3)
        model = TransformerSlideModel(TINY_ENC, 2, rng)
        regions = sample_slide_regions(store, store.slide_ids()[0], 4, 1, 1.0, rng)
        out = model.forward([regions])
        batch = stack_regions(regions)
        enc_out = encode_regions(batch, TINY_ENC, model.params)
        cls = enc_out.tokens.data[0, 0]
        expected = cls @ model.params["head.w"].data + model.params["head.b"].data
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)

    def test_region_order_invariance_of_average(self):
        store = tiny_store()
        rng = np.random.default_rng(4)
        model = TransformerSlideModel(TINY_ENC, 1, rng)
        regions = sample_slide_regions(store, store.slide_ids()[0], 4, 3, 1.0, rng)
        a = model.forward([regions]).data
        b = model.forward([regions[::-1]]).data
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_mil_ap_constant_bag_pools_to_value(self):
        rng = np.random.default_rng(5)
        model = MilModel(feature_dim=6, out_dim=1, variant="ap", rng=rng)
        v = rng.normal(size=6)
        from histomask.featstore import RegionTensor, region_positions

        region = RegionTensor(
            features=np.tile(v, (9, 1)),
            background=np.zeros(9, dtype=bool),
            positions=region_positions(3),
        )
        out = model.forward([[region]])
        expected = v @ model.params["head.w"].data + model.params["head.b"].data
        np.testing.assert_allclose(out.data, expected.reshape(1), atol=1e-12)

    def test_mil_attn_zeroed_scoring_equals_ap(self):
        rng = np.random.default_rng(6)
        store = tiny_store()
        regions = sample_slide_regions(store, store.slide_ids()[0], 4, 2, 1.0, rng)
        ap = MilModel(feature_dim=16, out_dim=1, variant="ap", rng=np.random.default_rng(9))
        attn = MilModel(feature_dim=16, out_dim=1, variant="attn", rng=np.random.default_rng(9))
        attn.params["attn.w"].data[:] = 0.0  # uniform softmax
        attn.params["head.w"].data = ap.params["head.w"].data.copy()
        attn.params["head.b"].data = ap.params["head.b"].data.copy()
        np.testing.assert_allclose(
            attn.forward([regions]).data, ap.forward([regions]).data, atol=1e-12
        )


class TestPretrainLoop:
    def _config(self, **kwargs):
        defaults = dict(
            total_steps=6,
            warmup_steps=2,
            batch_size=3,
            peak_lr=1e-3,
            eval_interval=3,
            seed=1,
        )
        defaults.update(kwargs)
        return PretrainConfig(**defaults)

    def test_zero_mask_rate_rejected(self):
        store = tiny_store()
        with pytest.raises(ValueError):
            pretrain(store, TINY_ENC, self._config(mask_rate=0.0))

    def test_identical_seeds_identical_params(self):
        store = tiny_store()
        a = pretrain(store, TINY_ENC, self._config())
        b = pretrain(store, TINY_ENC, self._config())
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        assert a.train_log == b.train_log

    def test_run_dir_artifacts(self, tmp_path):
        store = tiny_store()
        pretrain(store, TINY_ENC, self._config(), run_dir=tmp_path)
        assert (tmp_path / "checkpoint_last.mhck").exists()
        assert (tmp_path / "checkpoint_best.mhck").exists()
        log = (tmp_path / "train_log.tsv").read_text().splitlines()
        assert log[0] == "step\tlr\tl2\tcontrastive\ttotal"
        assert len(log) == 7

    def test_needs_two_slides(self):
        store = tiny_store(n_slides=1)
        with pytest.raises(DataError):
            pretrain(store, TINY_ENC, self._config())


class TestFinetuneLoop:
    def test_backend_frozen_bits_unchanged(self):
        store = tiny_store()
        split = three_way_split(store)
        config = tiny_ft(backend_lr=0.0)
        rng = np.random.default_rng(8)
        from histomask.trainer.models import build_model

        model = build_model("transformer", TINY_ENC, 2, rng)
        before = {n: model.params[n].data.copy() for n in model.backend_param_names()}
        from histomask.trainer.finetune import _train_slide_model

        _train_slide_model(model, store, TINY_ENC, config, split)
        for name in before:
            np.testing.assert_array_equal(model.params[name].data, before[name])

    def test_deterministic_runs(self):
        store = tiny_store()
        split = three_way_split(store)
        a = finetune(store, TINY_ENC, tiny_ft(), split)
        b = finetune(store, TINY_ENC, tiny_ft(), split)
        assert a.report.value == b.report.value
        for name in a.model.params:
            np.testing.assert_array_equal(
                a.model.params[name].data, b.model.params[name].data
            )

    def test_survival_task_runs(self):
        store = tiny_store(task="survival", n_slides=16)
        split = three_way_split(store)
        result = finetune(store, TINY_ENC, tiny_ft(task="survival"), split)
        assert result.report.metric == "c_index"
        assert 0.0 <= result.report.value <= 1.0

    def test_no_event_training_fold_rejected(self):
        store = tiny_store(task="survival", n_slides=16)
        ids = store.slide_ids()
        no_event = [s for s in ids if not store.slide(s).label.event]
        if len(no_event) < 2:
            pytest.skip("store draw has too few censored slides")
        with_event = [s for s in ids if store.slide(s).label.event]
        split = SplitSpec(
            train=tuple(no_event[:2]), monitor=tuple(with_event[:2]), test=()
        )
        with pytest.raises(DataError, match="events"):
            finetune(store, TINY_ENC, tiny_ft(task="survival"), split)

    def test_predict_slide_order_invariance(self):
        store = tiny_store()
        split = three_way_split(store)
        result = finetune(store, TINY_ENC, tiny_ft(), split)
        ids = list(split.test)
        config = tiny_ft()
        forward = predict(store, result.model, ids, TINY_ENC, config)
        backward = predict(store, result.model, ids[::-1], TINY_ENC, config)
        np.testing.assert_array_equal(forward, backward[::-1])

    def test_baseline_variants_run(self):
        store = tiny_store()
        split = three_way_split(store)
        for variant in ("ap", "attn"):
            result = baseline_mil(store, TINY_ENC, tiny_ft(), split, variant)
            assert result.report.metric == "macro_auc"


class TestCrossValidate:
    def test_fold_partition_and_determinism(self):
        store = tiny_store(n_slides=15)
        config = tiny_ft(max_epochs=1, patience=1)
        a = cross_validate(store, TINY_ENC, config, n_folds=5, repeats=1, model_kind="mil", mil_variant="ap")
        b = cross_validate(store, TINY_ENC, config, n_folds=5, repeats=1, model_kind="mil", mil_variant="ap")
        assert a.fold_assignments == b.fold_assignments
        folds = a.fold_assignments[0]
        flat = [s for fold in folds.values() for s in fold]
        assert sorted(flat) == sorted(store.slide_ids())
        assert a.report.per_fold == b.report.per_fold

    def test_sd_matches_recomputation(self):
        store = tiny_store(n_slides=15)
        config = tiny_ft(max_epochs=1, patience=1)
        result = cross_validate(
            store, TINY_ENC, config, n_folds=5, repeats=2, model_kind="mil", mil_variant="ap"
        )
        values = np.asarray(result.report.per_fold)
        assert len(values) == 10
        assert result.report.sd == pytest.approx(values.std(), abs=1e-12)

    def test_insufficient_stratification_rejected(self):
        store = tiny_store(n_slides=6)
        config = tiny_ft()
        with pytest.raises(DataError):
            cross_validate(store, TINY_ENC, config, n_folds=5)
