#!/usr/bin/env python3
"""
Desk-scale ablation driver

Runs the full ten-variant ablation on the default synthetic population
(8 devices, 60 frames per device per SNR) for several seeds and checks the
expected trends. Without --config it uses the desk profile (desk.yaml):
16 filters, 128 dense units, at most 20 epochs, one fold.
1. PSCDAE beats PSCNN by at least 2 points at 0 and 5 dB (mean over seeds)
2. CDAE_8 is not worse than CNN_8 at 10 dB (mean over seeds)
3. Every variant is more accurate at 30 dB than at -10 dB

Usage: run_desk_ablation.py [OUT_DIR] [--seeds N] [--config PATH]
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from pscdae.errors import WorkbenchError  # noqa: E402
from pscdae.exp import VARIANTS, AblationTable, desk_profile, generate_dataset, load_config, run_ablation  # noqa: E402

logger = logging.getLogger("pscdae")


def run_seed(cfg, seed: int, out_dir: Path) -> AblationTable:
    """One dataset and one fold of every variant for `seed`."""
    run_cfg = cfg.override(seed=seed)
    print(f"\n🎲 Seed {seed}: generating dataset...")
    dataset = generate_dataset(run_cfg)
    table = run_ablation(run_cfg, list(VARIANTS), dataset=dataset, progress=True)
    table.write(out_dir / f"seed{seed}", plot=True)
    return table


def check_trends(tables) -> list:
    """Return (description, passed) pairs for the desk-scale trend criteria."""
    wides = [t.wide("accuracy") for t in tables]
    checks = []
    for snr in (0.0, 5.0):
        gap = np.mean([w.loc[snr, "PSCDAE"] - w.loc[snr, "PSCNN"] for w in wides])
        checks.append((f"PSCDAE - PSCNN at {snr:g} dB = {gap:+.2f} points (>= 2)", gap >= 2.0))
    gap = np.mean([w.loc[10.0, "CDAE_8"] - w.loc[10.0, "CNN_8"] for w in wides])
    checks.append((f"CDAE_8 - CNN_8 at 10 dB = {gap:+.2f} points (>= 0)", gap >= 0.0))
    for name in VARIANTS:
        ok = all(w.loc[30.0, name] > w.loc[-10.0, name] for w in wides)
        checks.append((f"{name}: 30 dB above -10 dB on every seed", ok))
    return checks


def main() -> int:
    parser = argparse.ArgumentParser(description="Desk-scale PSCDAE ablation")
    parser.add_argument("out", nargs="?", default="desk_ablation", help="output directory")
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--config", help="YAML config (default: the desk profile)")
    args = parser.parse_args()

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("  [%(levelname)s] %(message)s"))
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

    out_dir = Path(args.out).resolve()
    print("🚀 PSCDAE desk-scale ablation")
    print(f"📁 Output: {out_dir}")
    print("-" * 50)

    started = time.perf_counter()
    try:
        cfg = load_config(args.config).override(folds=1) if args.config else desk_profile()
        tables = [run_seed(cfg, seed, out_dir) for seed in range(args.seeds)]
    except WorkbenchError as e:
        print(f"❌ {e}")
        return e.exit_code

    elapsed = time.perf_counter() - started
    mean = pd.concat([t.wide("accuracy") for t in tables]).groupby(level=0).mean()
    print("\n📊 Mean accuracy over seeds (%)")
    print(mean.to_string(float_format=lambda v: f"{v:.1f}"))

    print("\n🔍 Trend checks")
    checks = check_trends(tables)
    for description, passed in checks:
        print(f"  {'✅' if passed else '❌'} {description}")
    failed = sum(not passed for _, passed in checks)
    print(f"\n✨ {len(checks) - failed}/{len(checks)} checks passed")
    print(f"⏱️  Total runtime: {elapsed / 60:.1f} min (budget 60 min)")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
