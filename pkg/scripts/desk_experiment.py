"""Run (or reload from runs/) the desk-scale string model and the isolated-digit contrast.

    python3 scripts/desk_experiment.py [--runs DIR] [--seed 0]
"""

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))

from make_digit_idx import ensure  # noqa: E402

from numstr.data import load_idx  # noqa: E402
from numstr.experiment import context_experiment  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", default=str(ROOT / "runs"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    images, labels = ensure()
    digits = load_idx(images.read_bytes(), labels.read_bytes())
    result, runs = context_experiment(digits, args.runs, seed=args.seed, progress=lambda m: print(m, flush=True))
    for name, report in (("strings", result.strings), ("isolated", result.isolated)):
        info = runs[name]
        print(f"\n== trained on {name}: {info.seconds / 60:.1f} min, best epoch {info.best_epoch}, tested on strings")
        print(report.to_table(), end="")
    print(f"\ngap (strings - isolated): {result.gap:.2f} points")


if __name__ == "__main__":
    main()
