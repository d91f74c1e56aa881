"""Run the normalization ablation and the fusion-operator comparison from configs/.

Each run goes through the ``train`` command exactly as a user would, writing
to runs/<config name>/. A combined table lands in results/ablation_summary.csv.

    python scripts/run_ablation.py [--max-iters 400] [--seed 0]
"""

import argparse
import csv
import os
import tempfile

from mfbnet.cli import main as cli_main
from mfbnet.experiments import SUMMARY_FIELDS, read_csv

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = ["ablation_standard", "ablation_no_power", "ablation_no_l2", "ablation_no_norms",
           "fusion_mfb", "fusion_mlb", "fusion_mcb"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-iters", type=int, default=None, help="override max_iters in every config")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--runs", default=os.path.join(ROOT, "runs"))
    args = ap.parse_args()

    rows = []
    for name in CONFIGS:
        with open(os.path.join(ROOT, "configs", name + ".txt"), encoding="utf-8") as fh:
            text = fh.read()
        if args.max_iters is not None:
            text += f"\nmax_iters = {args.max_iters}\n"
        if args.seed is not None:
            text += f"\nseed = {args.seed}\n"
        with tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False) as tmp:
            tmp.write(text)
        out = os.path.join(args.runs, name)
        try:
            status = cli_main(["train", "--config", tmp.name, "--out", out])
        finally:
            os.unlink(tmp.name)
        if status:
            raise SystemExit(f"{name} exited with {status}")
        row = read_csv(os.path.join(out, "summary.csv"))[0]
        rows.append({"config": name, **row})

    os.makedirs(os.path.join(ROOT, "results"), exist_ok=True)
    with open(os.path.join(ROOT, "results", "ablation_summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["config"] + SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['config']:20s} {r['label']:26s} acc {float(r['final_accuracy']):.3f} "
              f"spread {float(r['mean_spread']):.4f}")


if __name__ == "__main__":
    main()
