#!/usr/bin/env python3
# Tests for the pscdae command line

import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

import torch
import yaml

from pscdae.cli import main
from pscdae.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE
from pscdae.exp import ExperimentConfig, reference_config_text
from pscdae.nn import load_checkpoint

TINY = {
    "seed": 1,
    "population": {"n_devices": 2},
    "phy": {"samples_per_symbol": 32},
    "dataset": {"frames_per_device_per_snr": 4, "snr_grid": [10.0], "guard_samples": 16, "progress": False},
    "training": {"filters": 2, "dense_units": 8, "max_epochs": 3, "batch_size": 4, "folds": 1},
}


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main(list(argv))
        except SystemExit as e:
            code = e.code
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = self.root / "tiny.yaml"
        self.config.write_text(yaml.safe_dump(TINY, sort_keys=False))

    def tearDown(self):
        self.tmp.cleanup()

    def gen(self, name="data"):
        out = self.root / name
        code, stdout, _ = run("-q", "gen", "--config", str(self.config), "--out", str(out))
        self.assertEqual(code, EXIT_OK)
        return out, stdout

    def test_gen_is_reproducible(self):
        """Two devices x four frames x one SNR -> 8 samples, same bytes twice."""
        a, stdout = self.gen("a")
        b, _ = self.gen("b")
        self.assertIn("Wrote 8 samples", stdout)
        manifest = json.loads((a / "manifest.json").read_text())
        self.assertEqual(manifest["n_samples"], 8)
        self.assertEqual(manifest["tensors"]["symbols_noisy"]["shape"], [8, 8, 32, 2])
        for path in sorted(a.rglob("*")):
            if path.is_file():
                self.assertEqual(path.read_bytes(), (b / path.relative_to(a)).read_bytes(), path.name)

    def test_gen_creates_nested_output(self):
        out, _ = self.gen("nested/deeper/data")
        self.assertTrue((out / "manifest.json").is_file())

    def test_gen_overrides(self):
        out = self.root / "override"
        code, _, _ = run("-q", "gen", "--config", str(self.config), "--devices", "3", "--frames", "2",
                         "--snr-grid", "0,20", "--out", str(out))
        self.assertEqual(code, EXIT_OK)
        manifest = json.loads((out / "manifest.json").read_text())
        self.assertEqual(manifest["population"]["n_devices"], 3)
        self.assertEqual(manifest["snr_grid"], [0.0, 20.0])

    def test_unwritable_output(self):
        blocker = self.root / "blocker"
        blocker.write_text("")
        code, _, err = run("-q", "gen", "--config", str(self.config), "--out", str(blocker / "data"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("[ERROR]", err)

    def test_usage_errors(self):
        """Unknown flags, variants and bad grids exit 1 before any work is done."""
        self.assertEqual(run("gen", "--bogus")[0], EXIT_USAGE)
        self.assertEqual(run("frobnicate")[0], EXIT_USAGE)
        code, _, err = run("train", "--data", "x", "--out", "y", "--variant", "CDAE_9")
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("PSCDAE", err)
        self.assertEqual(run("gen", "--snr-grid", "5:0:x", "--out", "z")[0], EXIT_USAGE)

    def test_invalid_config_reports_line(self):
        bad = self.root / "bad.yaml"
        bad.write_text("seed: 1\ntraining:\n  batch_size: lots\n")
        code, _, err = run("gen", "--config", str(bad), "--out", str(self.root / "never"))
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn(f"{bad}:3:", err)
        self.assertFalse((self.root / "never").exists())

    def test_missing_dataset(self):
        code, _, _ = run("train", "--data", str(self.root / "absent"), "--out", str(self.root / "m.pt"))
        self.assertEqual(code, EXIT_DATA)

    def test_defaults(self):
        code, stdout, _ = run("defaults")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(stdout, reference_config_text())
        self.assertEqual(yaml.safe_load(stdout), ExperimentConfig().to_dict())

    def test_train_eval_report(self):
        data, _ = self.gen()
        ckpt = self.root / "models" / "pscdae.pt"
        code, stdout, _ = run("-q", "train", "--data", str(data), "--variant", "PSCDAE", "--out", str(ckpt))
        self.assertEqual(code, EXIT_OK, stdout)
        state, extra = load_checkpoint(ckpt)
        self.assertEqual(extra["variant"], "PSCDAE")
        self.assertEqual(state.spec.input_length, 96)
        self.assertLessEqual(len(extra["log"]["epochs"]), 3)

        again = self.root / "models" / "again.pt"
        self.assertEqual(run("-q", "train", "--data", str(data), "--variant", "PSCDAE", "--out", str(again))[0],
                         EXIT_OK)
        other, _ = load_checkpoint(again)
        for name, p in state.named_parameters().items():
            self.assertTrue(torch.equal(p, other.named_parameters()[name]), name)

        record = self.root / "pscdae.json"
        code, _, _ = run("-q", "eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(record))
        self.assertEqual(code, EXIT_OK)
        saved = json.loads(record.read_text())
        self.assertEqual(saved["variant"], "PSCDAE")
        self.assertEqual(saved["snr_grid"], [10.0])

        report = self.root / "report"
        code, stdout, _ = run("-q", "report", str(record), "--out", str(report))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("PSCDAE", stdout)
        lines = (report / "accuracy_vs_snr.csv").read_text().splitlines()
        self.assertEqual(lines[0], "# pscdae-results v1")
        self.assertTrue(lines[1].startswith("snr_db") and lines[1].endswith("PSCDAE"), lines[1])
        self.assertEqual(len(lines), 3)

    def test_eval_rejects_mismatched_checkpoint(self):
        data, _ = self.gen()
        ckpt = self.root / "cnn.pt"
        self.assertEqual(run("-q", "train", "--data", str(data), "--variant", "CNN_2", "--epochs", "1",
                             "--out", str(ckpt))[0], EXIT_OK)
        wider = self.root / "wider.yaml"
        wider.write_text(yaml.safe_dump({**TINY, "population": {"n_devices": 3}}))
        other = self.root / "other"
        self.assertEqual(run("-q", "gen", "--config", str(wider), "--out", str(other))[0], EXIT_OK)
        code, _, _ = run("-q", "eval", "--checkpoint", str(ckpt), "--data", str(other),
                         "--out", str(self.root / "r.json"))
        self.assertEqual(code, EXIT_DATA)

    def test_eval_rejects_other_seed(self):
        """A checkpoint scored on a same-shaped dataset from another seed is a data error."""
        data, _ = self.gen()
        ckpt = self.root / "cnn.pt"
        self.assertEqual(run("-q", "train", "--data", str(data), "--variant", "CNN_2", "--epochs", "1",
                             "--out", str(ckpt))[0], EXIT_OK)
        other = self.root / "seed2"
        self.assertEqual(run("-q", "gen", "--config", str(self.config), "--seed", "2", "--out", str(other))[0],
                         EXIT_OK)
        code, _, err = run("eval", "--checkpoint", str(ckpt), "--data", str(other), "--out", str(self.root / "r.json"))
        self.assertEqual(code, EXIT_DATA)
        self.assertIn("seed 1", err)
        self.assertFalse((self.root / "r.json").exists())


if __name__ == "__main__":
    unittest.main()
