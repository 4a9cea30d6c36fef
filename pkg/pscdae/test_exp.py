#!/usr/bin/env python3
# Tests for dataset synthesis, splits, training and reporting

import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from pscdae.channel import SnrGrid
from pscdae.config import ConfigSource
from pscdae.dsp import Layout, fit_norm, layout_array
from pscdae.errors import ConfigError, DataError
from pscdae.exp import (
    VARIANTS, AblationTable, DatasetConfig, EarlyStopping, ExperimentConfig, ExperimentRecord,
    FoldMetrics, Splits, TrainingConfig, aggregate_folds, baseline_gain, config_from_source,
    confidence_interval, desk_profile, evaluate, generate_dataset, get_variant, load_config, load_dataset,
    make_splits, reference_config_text, run_ablation, score_predictions, train_model, write_dataset,
)
from pscdae.impair import PopulationSpec
from pscdae.phy import PhyConfig


def tiny_config(seed: int = 5, **training) -> ExperimentConfig:
    options = {"filters": 2, "dense_units": 8, "max_epochs": 3, "folds": 2, "batch_size": 8, "patience": 2}
    options.update(training)
    return ExperimentConfig(
        seed=seed,
        population=PopulationSpec(n_devices=3, seed=seed),
        phy=PhyConfig(samples_per_symbol=32),
        dataset=DatasetConfig(frames_per_device_per_snr=4, snr_grid=[10.0, 30.0], guard_samples=16, progress=False),
        training=TrainingConfig(**options),
    )


def fold_metrics(values, grid=(0.0, 10.0)):
    return [FoldMetrics(k, "test", list(grid), [v] * len(grid), [v] * len(grid), [v] * len(grid), v)
            for k, v in enumerate(values)]


class TestVariants(unittest.TestCase):
    def test_layouts(self):
        """PSCDAE reads three symbols, CDAE_8 all eight, SCDAE_6 the stacked six."""
        self.assertEqual(VARIANTS["PSCDAE"].layout, Layout.THREE_SYM)
        self.assertEqual(VARIANTS["CDAE_8"].layout, Layout.EIGHT_SYM)
        self.assertEqual(VARIANTS["SCDAE_6"].layout, Layout.ONE_SYM)
        self.assertEqual(VARIANTS["CNN_2"].layout.length(), 320)
        self.assertEqual(len(VARIANTS), 10)

    def test_cnn_variants_drop_reconstruction(self):
        cfg = ExperimentConfig()
        for name, variant in VARIANTS.items():
            weights = cfg.loss_weights(variant)
            self.assertEqual(weights.lambda1 == 0.0, not variant.denoising, name)
            self.assertEqual(weights.lambda2, 10.0)

    def test_unknown_variant_lists_valid_ones(self):
        with self.assertRaises(DataError) as ctx:
            get_variant("CDAE_9")
        self.assertIn("PSCDAE", str(ctx.exception))


class TestConfig(unittest.TestCase):
    def test_reference_config_round_trip(self):
        """The generated reference config parses back to the defaults."""
        cfg = config_from_source(ConfigSource.from_text(reference_config_text()))
        self.assertEqual(cfg.to_dict(), ExperimentConfig().to_dict())

    def test_shipped_workbench_yaml_is_the_default(self):
        path = Path(__file__).resolve().parents[1] / "workbench.yaml"
        self.assertEqual(load_config(path).to_dict(), ExperimentConfig().to_dict())

    def test_shipped_desk_yaml_is_the_desk_profile(self):
        path = Path(__file__).resolve().parents[1] / "desk.yaml"
        desk = load_config(path)
        self.assertEqual(desk.to_dict(), desk_profile().to_dict())
        self.assertEqual((desk.training.filters, desk.training.dense_units, desk.training.max_epochs), (16, 128, 20))
        self.assertEqual(desk.population.n_devices, 8)
        self.assertEqual(desk.dataset.frames_per_device_per_snr, 60)

    def test_partial_config_merges_defaults(self):
        text = "seed: 3\ntraining:\n  variant: CNN_8\ndataset:\n  snr_grid: [0, 10]\n"
        cfg = config_from_source(ConfigSource.from_text(text))
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.variant.name, "CNN_8")
        self.assertEqual(cfg.snr_grid.to_list(), [0.0, 10.0])
        self.assertEqual(cfg.training.batch_size, 64)
        self.assertEqual(cfg.population.n_devices, 8)

    def test_errors_carry_line_numbers(self):
        cases = {
            "seed: 1\ntraining:\n  batch_size: many\n": 3,
            "seed: 1\ndataset:\n  frames: 3\n": 3,
            "seed: 1\n\nbogus: {}\n": 3,
            "seed: -4\n": 1,
            "training:\n  lr: 0.001\n  variant: CDAE_9\n": 1,
        }
        for text, line in cases.items():
            with self.assertRaises(ConfigError) as ctx:
                config_from_source(ConfigSource.from_text(text, "cfg.yaml"))
            self.assertEqual(ctx.exception.line, line, text)
            self.assertTrue(str(ctx.exception).startswith(f"cfg.yaml:{line}:"), str(ctx.exception))

    def test_yaml_syntax_error(self):
        with self.assertRaises(ConfigError) as ctx:
            ConfigSource.from_text("seed: 1\ntraining: [1, 2\n", "cfg.yaml")
        self.assertIsNotNone(ctx.exception.line)
        with self.assertRaises(ConfigError):
            ConfigSource.from_text("- 1\n- 2\n")

    def test_population_range_errors(self):
        text = "population:\n  n_devices: 4\n  ranges:\n    dc_offset_i: [1, 0]\n"
        with self.assertRaises(ConfigError) as ctx:
            config_from_source(ConfigSource.from_text(text))
        self.assertIsNotNone(ctx.exception.line)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/workbench.yaml")

    def test_overrides(self):
        cfg = ExperimentConfig().override(seed=9, devices=3, frames=2, folds=1, snr_grid=[5.0], epochs=4)
        self.assertEqual((cfg.seed, cfg.population.seed, cfg.population.n_devices), (9, 9, 3))
        self.assertEqual(cfg.dataset.frames_per_device_per_snr, 2)
        self.assertEqual((cfg.training.folds, cfg.training.max_epochs), (1, 4))
        self.assertEqual(ExperimentConfig().seed, 0)
        with self.assertRaises(DataError):
            ExperimentConfig().override(snr_grid=[5.0, 0.0])


class TestSplits(unittest.TestCase):
    def test_fractions_and_partition(self):
        """60/20/20, disjoint, covering every index."""
        splits = make_splits(100, fold=0, seed=1)
        self.assertEqual((len(splits.train), len(splits.val), len(splits.test)), (60, 20, 20))
        joined = np.concatenate([splits.train, splits.val, splits.test])
        np.testing.assert_array_equal(np.sort(joined), np.arange(100))

    def test_folds_differ_and_repeat(self):
        a, b = make_splits(50, 0, 3), make_splits(50, 1, 3)
        self.assertFalse(np.array_equal(a.test, b.test))
        np.testing.assert_array_equal(make_splits(50, 1, 3).test, b.test)

    def test_small_sets(self):
        splits = make_splits(3, 0, 0)
        self.assertEqual([len(splits.train), len(splits.val), len(splits.test)], [1, 1, 1])
        with self.assertRaises(DataError):
            make_splits(2, 0, 0)

    def test_overlap_rejected(self):
        with self.assertRaises(DataError):
            Splits(np.array([0, 1]), np.array([2]), np.array([1]))


class TestEarlyStopping(unittest.TestCase):
    def test_patience(self):
        """[50, 60, 59, 58, ...] stops ten epochs after the peak at epoch 2."""
        stopper = EarlyStopping(patience=10)
        history = [50, 60, 59, 58] + [57] * 20
        stopped_at = None
        for epoch, acc in enumerate(history, start=1):
            stopper.update(epoch, acc)
            if stopper.should_stop:
                stopped_at = epoch
                break
        self.assertEqual(stopper.best_epoch, 2)
        self.assertEqual(stopped_at, 12)

    def test_ties_do_not_count_as_improvement(self):
        stopper = EarlyStopping(patience=1)
        self.assertTrue(stopper.update(1, 50.0))
        self.assertFalse(stopper.update(2, 50.0))
        self.assertTrue(stopper.should_stop)


class TestMetrics(unittest.TestCase):
    def test_perfect_predictor(self):
        """100% everywhere and a zero-width interval."""
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 8, 400)
        snr = np.repeat([0.0, 10.0], 200)
        folds = [score_predictions(labels, labels, snr, SnrGrid((0.0, 10.0)), fold=k) for k in range(5)]
        summary = aggregate_folds(folds)
        for metric in ("accuracy", "precision", "recall"):
            self.assertEqual(summary[metric]["mean"], [100.0, 100.0])
            self.assertEqual(summary[metric]["ci95"], [0.0, 0.0])

    def test_random_predictor_is_at_chance(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 8, 20_000)
        predicted = rng.integers(0, 8, 20_000)
        m = score_predictions(predicted, labels, np.zeros(20_000), SnrGrid((0.0,)))
        self.assertAlmostEqual(m.accuracy[0], 12.5, delta=1.0)
        self.assertTrue(0.0 <= m.precision[0] <= 100.0)

    def test_student_t_interval(self):
        values = [90.0, 92.0, 94.0, 96.0, 98.0]
        mean, half = confidence_interval(values)
        self.assertAlmostEqual(mean, 94.0)
        expected = stats.t.ppf(0.975, 4) * np.std(values, ddof=1) / math.sqrt(5)
        self.assertAlmostEqual(half, expected, places=10)
        self.assertEqual(confidence_interval([80.0]), (80.0, 0.0))
        self.assertEqual(confidence_interval([None]), (None, None))

    def test_missing_snr_points(self):
        m = score_predictions(np.array([0, 1]), np.array([0, 1]), np.array([0.0, 0.0]), SnrGrid((0.0, 5.0)))
        self.assertEqual(m.accuracy, [100.0, None])
        self.assertEqual(aggregate_folds([m])["accuracy"]["mean"], [100.0, None])

    def test_empty_split(self):
        with self.assertRaises(DataError):
            score_predictions(np.array([]), np.array([]), np.array([]), SnrGrid())

    def test_report_shape_and_gain(self):
        """Ten variant records make a 9-SNR x 10-variant table."""
        grid = SnrGrid().to_list()
        records = [ExperimentRecord(name, grid, fold_metrics([50.0 + k, 52.0 + k], grid))
                   for k, name in enumerate(VARIANTS)]
        table = AblationTable.from_records(records)
        wide = table.wide("accuracy")
        self.assertEqual(wide.shape, (9, 10))
        self.assertEqual(list(wide.columns), list(VARIANTS))
        gain = baseline_gain(table, "PSCDAE", "CNN_8")
        self.assertEqual(set(gain.values()), {3.0})
        self.assertEqual(len(table.to_frame()), 9 * 10 * 3)

    def test_records_merge_by_variant(self):
        a = ExperimentRecord("PSCNN", [0.0, 10.0], fold_metrics([60.0]))
        b = ExperimentRecord("PSCNN", [0.0, 10.0], fold_metrics([70.0]))
        table = AblationTable.from_records([a, b])
        self.assertEqual(len(table.records["PSCNN"].folds), 2)
        self.assertEqual(table.records["PSCNN"].summary["accuracy"]["mean"], [65.0, 65.0])
        with self.assertRaises(DataError):
            a.merge(ExperimentRecord("PSCDAE", [0.0, 10.0], fold_metrics([1.0])))

    def test_write_failures_are_data_errors(self):
        """An unwritable summary or table file is reported as a data error."""
        grid = [0.0, 10.0]
        table = AblationTable.from_records([ExperimentRecord("PSCNN", grid, fold_metrics([60.0, 62.0], grid))])
        for blocked in ("summary.json", "results.csv"):
            with tempfile.TemporaryDirectory() as tmp:
                (Path(tmp) / blocked).mkdir()
                with self.assertRaises(DataError) as ctx:
                    table.write(tmp)
                self.assertIn(blocked, str(ctx.exception))

    def test_record_file_round_trip(self):
        record = ExperimentRecord("CDAE_2", [0.0, 10.0], fold_metrics([61.0, 63.0]))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "record.json")
            record.save(path)
            loaded = ExperimentRecord.load(path)
        self.assertEqual(loaded.to_dict(), record.to_dict())


class TestDataset(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = tiny_config()
        cls.dataset = generate_dataset(cls.cfg)

    def test_counts_and_shapes(self):
        """3 devices x 4 frames x 2 SNR points, eight symbols each."""
        ds = self.dataset
        self.assertEqual(len(ds) + len(ds.manifest["dropped"]), 24)
        self.assertEqual(ds.noisy.shape[1:], (8, 32, 2))
        self.assertEqual(ds.clean.shape, ds.noisy.shape)
        self.assertEqual(sorted(set(ds.labels.tolist())), [0, 1, 2])
        self.assertEqual(sorted(set(ds.snr_db.tolist())), [10.0, 30.0])
        self.assertEqual(ds.n_classes, 3)

    def test_deterministic(self):
        again = generate_dataset(self.cfg)
        np.testing.assert_array_equal(again.noisy, self.dataset.noisy)
        np.testing.assert_array_equal(again.clean, self.dataset.clean)
        other = generate_dataset(tiny_config(seed=6))
        self.assertFalse(np.array_equal(other.noisy, self.dataset.noisy))

    def test_clean_targets_are_shared_across_snr(self):
        """Each frame's clean target is the same at every SNR."""
        ds = self.dataset
        first = (ds.labels == 0)
        clean = ds.clean[first]
        np.testing.assert_array_equal(clean[0], clean[1])

    def test_norm_uses_training_split_only(self):
        ds = self.dataset
        splits = ds.splits(0)
        self.assertEqual(np.intersect1d(splits.test, np.union1d(splits.train, splits.val)).size, 0)
        expected = fit_norm(layout_array(ds.noisy[splits.train], Layout.THREE_SYM))
        np.testing.assert_array_equal(ds.norm_stats(Layout.THREE_SYM, 0).min_vec, expected.min_vec)
        z, z_hat, y, labels, snr = ds.tensors(Layout.THREE_SYM, 0, "train")
        self.assertEqual(z.shape[1:], (96, 2))
        np.testing.assert_array_equal(z.min(axis=0), 0.0)
        np.testing.assert_array_equal(z.max(axis=0), 1.0)
        self.assertTrue(((z_hat >= 0) & (z_hat <= 1)).all())
        np.testing.assert_array_equal(y.argmax(axis=1), labels)

    def test_sample_tuples(self):
        tuples = self.dataset.sample_tuples(Layout.TWO_SYM, 1, "val")
        self.assertEqual(len(tuples), len(self.dataset.splits(1).val))
        self.assertEqual(tuples[0].z.data.shape, (64, 2))

    def test_files_round_trip_and_are_byte_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            a = write_dataset(self.dataset, Path(tmp) / "a")
            b = write_dataset(generate_dataset(self.cfg), Path(tmp) / "b")
            for path in sorted(a.rglob("*")):
                if path.is_file():
                    self.assertEqual(path.read_bytes(), (b / path.relative_to(a)).read_bytes(), path.name)
            loaded = load_dataset(a)
            np.testing.assert_array_equal(loaded.noisy, self.dataset.noisy)
            np.testing.assert_array_equal(loaded.labels, self.dataset.labels)
            self.assertIn(("three_sym", 1), loaded.norms)

            labels = a / "labels.f32"
            labels.write_bytes(labels.read_bytes()[:-4])
            with self.assertRaises(DataError):
                load_dataset(a)

    def test_parallel_generation_matches_serial(self):
        cfg = tiny_config()
        cfg.dataset = DatasetConfig(frames_per_device_per_snr=4, snr_grid=[10.0, 30.0], guard_samples=16,
                                    workers=2, progress=False)
        np.testing.assert_array_equal(generate_dataset(cfg).noisy, self.dataset.noisy)

    def test_unreadable_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DataError):
                load_dataset(tmp)


class TestTraining(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.cfg = tiny_config()
        cls.dataset = generate_dataset(cls.cfg)

    def test_train_returns_best_checkpoint(self):
        result = train_model(self.cfg, self.dataset, fold=0)
        log = result.log
        self.assertEqual(result.variant.name, "PSCDAE")
        self.assertLessEqual(len(log.epochs), 3)
        best = max(e["val_accuracy"] for e in log.epochs)
        self.assertEqual(log.best_val_accuracy, best)
        self.assertEqual(log.epochs[log.best_epoch - 1]["val_accuracy"], best)
        self.assertIsNone(log.wall_clock_s)

    def test_training_is_deterministic(self):
        a = train_model(self.cfg, self.dataset, fold=1, variant="CNN_8").state
        b = train_model(self.cfg, self.dataset, fold=1, variant="CNN_8").state
        for name, p in a.named_parameters().items():
            self.assertTrue(torch.equal(p, b.named_parameters()[name]), name)

    def test_evaluate(self):
        result = train_model(self.cfg, self.dataset, fold=0, variant="SCNN_6")
        record = evaluate(result.state, self.dataset, "SCNN_6", fold=0, log=result.log)
        self.assertEqual(record.variant, "SCNN_6")
        self.assertEqual(record.snr_grid, [10.0, 30.0])
        for value in record.summary["accuracy"]["mean"]:
            self.assertTrue(value is None or 0.0 <= value <= 100.0)
        with self.assertRaises(DataError):
            evaluate(result.state, self.dataset, "PSCNN", fold=0)

    def test_run_ablation(self):
        cfg = tiny_config(folds=1, max_epochs=2)
        with tempfile.TemporaryDirectory() as tmp:
            table = run_ablation(cfg, ["PSCNN", "PSCDAE"], dataset=self.dataset)
            written = table.write(tmp)
            names = sorted(p.name for p in written)
        self.assertEqual(names, ["accuracy_vs_snr.csv", "results.csv", "summary.json"])
        self.assertEqual(list(table.records), ["PSCNN", "PSCDAE"])
        self.assertEqual(table.wide().shape, (2, 2))


@pytest.mark.slow
class TestDeskScaleTrend(unittest.TestCase):
    """Desk profile, three seeds: partial stacking beats the plain CNN at low SNR."""

    def test_trend(self):
        cfg = desk_profile()
        gaps = {0.0: [], 5.0: []}
        eight = []
        for seed in range(3):
            run_cfg = cfg.override(seed=seed)
            dataset = generate_dataset(run_cfg, progress=False)
            table = run_ablation(run_cfg, list(VARIANTS), dataset=dataset)
            wide = table.wide("accuracy")
            for snr in gaps:
                gaps[snr].append(wide.loc[snr, "PSCDAE"] - wide.loc[snr, "PSCNN"])
            eight.append(wide.loc[10.0, "CDAE_8"] - wide.loc[10.0, "CNN_8"])
            for name in VARIANTS:
                self.assertGreater(wide.loc[30.0, name], wide.loc[-10.0, name], name)
        for snr, values in gaps.items():
            self.assertGreaterEqual(np.mean(values), 2.0, f"{snr} dB")
        self.assertGreaterEqual(np.mean(eight), 0.0)


if __name__ == "__main__":
    unittest.main()
