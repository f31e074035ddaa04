"""Command line entry point: ``pmg {train,eval,ablate,gradcam,dump-jigsaw,ttest}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .ablation import load_datasets, load_grid, paired_gap, render_table, run_grid, summarize
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import load_batch
from .errors import PMGError
from .gradcam import denormalize, grad_cam, save_overlay
from .inference import evaluate
from .jigsaw import granularity_schedule, jigsaw_batch, sample_permutation
from .model import build_model
from .stats import t_test
from .trainer import fit

log = logging.getLogger("pmg")

CHECKPOINT_NAME = "checkpoints/latest.ckpt"


def _run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run_seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return load_config(args.config, overrides)


def _model_from_checkpoint(path, cfg: Optional[RunConfig] = None, force: bool = False):
    ck = load_checkpoint(path, expected_config=cfg.to_dict() if cfg else None, force=force)
    cfg = cfg or load_config(ck.config)
    model = build_model(cfg.arch)
    model.load_state_dict(ck.model_state)
    model.eval()
    return cfg, model, ck


def plot_losses(metrics_csv: Path, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(7, 4))
    for kind in dict.fromkeys(r["step_kind"] for r in rows):
        pts = [(int(r["iter"]), float(r["loss"])) for r in rows if r["step_kind"] == kind]
        ax.plot(*zip(*pts), label=kind, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train, val = load_datasets(cfg)
    model = build_model(cfg.arch, seed=cfg.run_seed)
    ckpt = out / CHECKPOINT_NAME
    resume = ckpt if args.resume and ckpt.exists() else None
    result = fit(
        train,
        model,
        cfg.training,
        cfg.dataset.transform,
        val_dataset=val,
        metrics_path=out / "metrics.csv",
        checkpoint_dir=ckpt.parent,
        config_snapshot=cfg.to_dict(),
        resume=resume,
        on_epoch=lambda s: log.info("epoch %s: %s", s["epoch"], {k: round(v, 4) for k, v in s.items() if isinstance(v, float)}),
    )
    (out / "history.json").write_text(json.dumps(result.history, indent=1))
    if (out / "metrics.csv").exists():
        plot_losses(out / "metrics.csv", out / "loss_curves.png")
    if val is not None:
        rep = evaluate(model, val, cfg.dataset.transform, score_mode=cfg.training.score_mode)
        _write_eval(rep, out)
        print(rep.summary())
    return 0


def _write_eval(rep, out: Path) -> None:
    with open(out / "eval.csv", "w", newline="") as fh:
        row = rep.as_row()
        w = csv.DictWriter(fh, list(row))
        w.writeheader()
        w.writerow(row)
    (out / "eval.txt").write_text(rep.summary() + "\n")


def cmd_eval(args) -> int:
    cfg = _run_config(args) if args.config else None
    cfg, model, _ = _model_from_checkpoint(args.checkpoint, cfg, force=args.force)
    train, val = load_datasets(cfg)
    data = val if (val is not None and args.split != "train") else train
    rep = evaluate(model, data, cfg.dataset.transform, score_mode=cfg.training.score_mode)
    out = Path(args.out) if args.out else cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    _write_eval(rep, out)
    print(rep.summary())
    if args.min_acc is not None and rep.accuracy_c2 < args.min_acc:
        print(f"FAIL: combined accuracy {rep.accuracy_c2:.4f} < {args.min_acc}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    grid = load_grid(args.grid)
    out = Path(args.out or f"runs/ablate_{grid.axis}")
    rows = run_grid(grid, out)
    summary = summarize(rows, [name for name, _ in grid.points])
    text = render_table(summary)
    names = [n for n, _ in grid.points]
    if len(names) >= 2:
        text += f"\npaired C2 gap {names[-1]} - {names[0]}: {100 * paired_gap(summary, names[-1], names[0]):+.2f} pts"
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_gradcam(args) -> int:
    cfg = _run_config(args) if args.config else None
    cfg, model, _ = _model_from_checkpoint(args.checkpoint, cfg, force=args.force)
    train, val = load_datasets(cfg)
    data = val if val is not None else train
    x, _ = load_batch(data, [args.index], cfg.dataset.transform, train=False)
    out = Path(args.out) if args.out else cfg.output_path / "gradcam"
    out.mkdir(parents=True, exist_ok=True)
    stages = [args.stage] if args.stage is not None else list(model.supervised)
    cls = args.class_index if args.class_index is not None else "predicted"
    rgb = denormalize(x[0], data.mean, data.std)
    for l in stages:
        res = grad_cam(model, x[0], l, cls)
        np.save(out / f"cam_item{args.index}_stage{l}.npy", res.heatmap)
        save_overlay(rgb, res.heatmap, out / f"cam_item{args.index}_stage{l}.png")
        print(f"stage {l}: class {res.class_index}, map {res.heatmap.shape}")
    return 0


def cmd_dump_jigsaw(args) -> int:
    from PIL import Image

    cfg = _run_config(args)
    train, _ = load_datasets(cfg)
    out = Path(args.out) if args.out else cfg.output_path / "jigsaw"
    out.mkdir(parents=True, exist_ok=True)
    idx = list(range(min(args.count, len(train))))
    x, _ = load_batch(train, idx, cfg.dataset.transform, train=False)
    schedule = granularity_schedule(cfg.arch.num_stages, cfg.arch.supervised_stages, cfg.training.n_schedule)
    for step, entry in enumerate(schedule):
        perms = [sample_permutation(entry.n, cfg.run_seed * 100003 + 97 * i + step) for i in idx]
        views = jigsaw_batch(x, perms)
        for i, v in zip(idx, views):
            Image.fromarray(denormalize(v, train.mean, train.std)).save(out / f"item{i}_n{entry.n}.png")
    print(f"wrote {len(idx) * len(schedule)} views to {out}")
    return 0


def cmd_ttest(args) -> int:
    p = t_test(args.samples, args.mu0)
    print(f"p = {p:.3g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pmg", description="Progressive multi-granularity training")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/latest.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("val", "train"), default="val")
    p.add_argument("--min-acc", type=float, help="exit 1 if combined accuracy is below this")
    p.add_argument("--force", action="store_true", help="load even if the config snapshot differs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcam", help="Grad-CAM maps of the supervised stages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", type=int)
    p.add_argument("--class", dest="class_index", type=int)
    p.add_argument("--index", type=int, default=0, help="item of the evaluation split")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("dump-jigsaw", help="write jigsaw views of a few training images")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_dump_jigsaw)

    p = sub.add_parser("ttest", help="one-sample t-test of accuracies against a reference")
    p.add_argument("--samples", type=float, nargs="+", required=True)
    p.add_argument("--mu0", type=float, required=True)
    p.set_defaults(func=cmd_ttest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PMGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
