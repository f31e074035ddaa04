"""Overfit the desk model on 64 synthetic images and print train accuracy per epoch.

    python scripts/overfit_sanity.py [--iters 200] [--seed 0]
"""

import argparse
import time
from pathlib import Path

import torch

from pmg.config import load_config
from pmg.data import make_synthetic_splits
from pmg.model import build_model
from pmg.trainer import fit

HERE = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE / "configs" / "desk.yaml"))
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(args.config, {"run_seed": args.seed, "training.max_iters": args.iters, "dataset.synthetic.samples_per_class": 8})
    train, _ = make_synthetic_splits(cfg.dataset.synthetic_spec(cfg.max_n), 1)
    model = build_model(cfg.arch, seed=cfg.run_seed)
    start = time.perf_counter()

    def show(s):
        print(f"epoch {s['epoch']:>3}  iter {s['t']:>4}  loss_concat {s['loss_concat']:.3f}  train C1 {s['train_acc_eval_c1']:.3f}  C2 {s['train_acc_eval_c2']:.3f}")

    fit(train, model, cfg.training, cfg.dataset.transform, train_eval=True, on_epoch=show)
    print(f"{time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
