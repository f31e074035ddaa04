"""Desk-scale fusion and jigsaw comparisons on the synthetic dataset.

Runs the progressive / single-step / all-ones variants over five seeds and
prints mean combined accuracy per variant plus the paired gaps.

    python scripts/desk_comparisons.py --out runs/desk_comparisons [--separate]
"""

import argparse
from pathlib import Path

from pmg.ablation import AblationGrid, paired_gap, render_table, run_grid, summarize

HERE = Path(__file__).resolve().parent.parent

POINTS = {
    "progressive": {"training.mode": "progressive", "training.n_schedule": "doubling"},
    "single_step": {"training.mode": "single_step", "training.n_schedule": "doubling"},
    "ones": {"training.mode": "progressive", "training.n_schedule": "ones"},
    "separate": {"training.mode": "separate", "training.n_schedule": "doubling"},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE / "configs" / "desk.yaml"))
    ap.add_argument("--out", default="runs/desk_comparisons")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iters", type=int, default=400)
    ap.add_argument("--separate", action="store_true", help="also run the separately-trained baseline")
    args = ap.parse_args()

    names = ["progressive", "single_step", "ones"] + (["separate"] if args.separate else [])
    points = [(n, {**POINTS[n], "training.max_iters": args.iters}) for n in names]
    grid = AblationGrid("fusion_mode", points, args.seeds, args.config)
    rows = run_grid(grid, args.out)
    summary = summarize(rows, names)
    print(render_table(summary))
    print(f"paired C2 gap progressive - single_step: {100 * paired_gap(summary, 'progressive', 'single_step'):+.2f} pts")
    print(f"paired C2 gap progressive - ones:        {100 * paired_gap(summary, 'progressive', 'ones'):+.2f} pts")


if __name__ == "__main__":
    main()
