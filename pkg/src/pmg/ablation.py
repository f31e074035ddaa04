"""Single experiment runs and ablation grids.

A grid is a base config plus a list of points (dotted-key deltas) run over a
list of seeds.  Results go to an append-only CSV; finished ``(point, seed)``
pairs are skipped on re-runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, load_config, read_config_tree
from .data import LabeledDataset, load_batch, load_image_folder, make_synthetic_splits
from .errors import ConfigError
from .inference import combine, evaluate
from .jigsaw import ScheduleEntry, granularity_schedule
from .model import PMGNet, build_model
from .trainer import OptimizerState, cross_entropy, fit, sgd_update

log = logging.getLogger(__name__)

AXES = ("S_and_n", "alpha_beta", "fusion_mode")
ABLATION_COLUMNS = ["axis", "point", "seed", "acc_c1", "acc_c2", "stage_accs", "wall_time", "status"]


def load_datasets(cfg: RunConfig) -> tuple[LabeledDataset, Optional[LabeledDataset]]:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        return make_synthetic_splits(ds.synthetic_spec(cfg.max_n), ds.synthetic.test_samples_per_class)
    train = load_image_folder(ds.train_root, "train")
    val = load_image_folder(ds.val_root, "val") if ds.val_root else None
    if val is not None and val.class_names != train.class_names:
        raise ConfigError("train and val folders have different class sets")
    return train, val


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- fusion baseline (a): separately trained networks -------------------------


class SeparateFusion:
    """One network per granularity, frozen, with a trained linear fusion layer."""

    def __init__(self, members: list[PMGNet], ns: list[int], fusion: torch.nn.Linear):
        self.members = members
        self.ns = ns
        self.fusion = fusion

    @torch.no_grad()
    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        vecs, probs = [], []
        for m in self.members:
            m.eval()
            out = m.forward_stage(x, m.L)
            vecs.append(out.vector)
            probs.append(out.probs)
        return torch.cat(vecs, dim=1), probs

    @torch.no_grad()
    def predict(self, x: torch.Tensor):
        v, probs = self.features(x)
        fused = F.softmax(self.fusion(v), dim=1)
        return combine([p.double().numpy() for p in probs], fused.double().numpy()), probs


def train_separate(cfg: RunConfig, train: LabeledDataset) -> SeparateFusion:
    schedule = granularity_schedule(cfg.arch.num_stages, cfg.arch.supervised_stages, cfg.training.n_schedule)
    ns = [e.n for e in schedule]
    members = []
    for i, n in enumerate(ns):
        arch = replace(cfg.arch, supervised_stages=1)
        member = build_model(arch, seed=cfg.run_seed * 1000 + i)
        tcfg = replace(cfg.training, mode="progressive", n_schedule=[n, 1])
        fit(train, member, tcfg, cfg.dataset.transform, schedule=[ScheduleEntry(member.L, n)])
        members.append(member)

    torch.manual_seed(cfg.run_seed)
    fusion = torch.nn.Linear(len(members) * cfg.arch.vector_dim, cfg.arch.num_classes)
    model = SeparateFusion(members, ns, fusion)
    idx = np.arange(len(train))
    x, y = load_batch(train, idx, cfg.dataset.transform, train=False)
    feats, _ = model.features(x)
    params = dict(fusion.named_parameters())
    state = OptimizerState()
    tc = cfg.training
    rng = np.random.default_rng([cfg.run_seed, 0xF05E])
    for _ in range(tc.separate_fusion_epochs):
        order = rng.permutation(len(idx))
        for start in range(0, len(idx), tc.batch_size):
            b = order[start : start + tc.batch_size]
            loss = cross_entropy(F.softmax(fusion(feats[b]), dim=1), y[b])
            for p in params.values():
                p.grad = None
            loss.backward()
            sgd_update(params, {k: p.grad for k, p in params.items()}, tc.base_lr, tc.momentum, tc.weight_decay, state)
    return model


def evaluate_separate(model: SeparateFusion, dataset: LabeledDataset, cfg: RunConfig) -> dict:
    x, y = load_batch(dataset, np.arange(len(dataset)), cfg.dataset.transform, train=False)
    (c1, c2), probs = model.predict(x)
    y = y.numpy()
    return {
        "acc_c1": float((c1 == y).mean()),
        "acc_c2": float((c2 == y).mean()),
        "stage_accs": {f"n{n}": float((p.argmax(1).numpy() == y).mean()) for n, p in zip(model.ns, probs)},
    }


# -- runs ---------------------------------------------------------------------


def run_experiment(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> dict:
    """Train per ``cfg`` and evaluate on the held-out split (the train split if none)."""
    train, test = load_datasets(cfg)
    test = test if test is not None else train
    if cfg.training.mode == "separate":
        model = train_separate(cfg, train)
        return evaluate_separate(model, test, cfg)
    model = build_model(cfg.arch, seed=cfg.run_seed)
    metrics = Path(out_dir) / "metrics.csv" if out_dir is not None else None
    fit(train, model, cfg.training, cfg.dataset.transform, metrics_path=metrics)
    rep = evaluate(model, test, cfg.dataset.transform, score_mode=cfg.training.score_mode)
    return {
        "acc_c1": rep.accuracy_c1,
        "acc_c2": rep.accuracy_c2,
        "stage_accs": {f"stage{l}": a for l, a in rep.stage_accuracy.items()},
    }


@dataclass
class AblationGrid:
    axis: str
    points: list[tuple[str, dict]]
    seeds: list[int]
    base: Union[str, Path, dict] = field(default_factory=dict)

    def validate(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"grid axis must be one of {AXES}, got {self.axis!r}")
        if not self.points or not self.seeds:
            raise ConfigError("grid needs at least one point and one seed")
        for name, delta in self.points:
            load_config(self.base, delta)  # every point must be a valid config


def load_grid(path: Union[str, Path]) -> AblationGrid:
    path = Path(path)
    tree, lines = read_config_tree(path)
    unknown = set(tree) - {"base", "axis", "seeds", "points"}
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"unknown grid key {k!r}", lines.get((k,)))
    base = tree.get("base", {})
    if isinstance(base, str):
        base = path.parent / base
    points = []
    for i, p in enumerate(tree.get("points", [])):
        if not isinstance(p, dict) or "name" not in p:
            raise ConfigError("each grid point needs a name", lines.get(("points", i)))
        points.append((str(p["name"]), dict(p.get("set", {}))))
    grid = AblationGrid(tree.get("axis", ""), points, [int(s) for s in tree.get("seeds", [0])], base)
    grid.validate()
    return grid


def _done_keys(csv_path: Path) -> set:
    if not csv_path.exists():
        return set()
    with open(csv_path, newline="") as fh:
        return {(r["point"], int(r["seed"])) for r in csv.DictReader(fh) if r["status"] == "ok"}


def run_grid(grid: AblationGrid, out_dir: Union[str, Path], cache_dir: Optional[Union[str, Path]] = None) -> list[dict]:
    """Run every ``(point, seed)`` not already in ``out_dir/ablation.csv``.

    ``cache_dir`` holds per-config results so identical runs shared between
    grids are trained once.
    """
    grid.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    cache = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    done = _done_keys(csv_path)
    fresh = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, ABLATION_COLUMNS)
        if fresh:
            writer.writeheader()
        for name, delta in grid.points:
            for seed in grid.seeds:
                if (name, seed) in done:
                    continue
                row = {"axis": grid.axis, "point": name, "seed": seed}
                start = time.perf_counter()
                try:
                    cfg = load_config(grid.base, {**delta, "run_seed": seed})
                    cached = cache / f"{config_hash(cfg)}.json"
                    if cached.exists():
                        result = json.loads(cached.read_text())
                    else:
                        result = run_experiment(cfg, out_dir / _slug(name) / f"seed{seed}")
                        cached.write_text(json.dumps(result))
                    row.update(
                        acc_c1=repr(result["acc_c1"]),
                        acc_c2=repr(result["acc_c2"]),
                        stage_accs=";".join(f"{k}:{v!r}" for k, v in result["stage_accs"].items()),
                        status="ok",
                    )
                except Exception as exc:  # a failed point must not stop the grid
                    log.error("grid point %s seed %s failed:\n%s", name, seed, traceback.format_exc())
                    row.update(acc_c1="", acc_c2="", stage_accs="", status=f"error: {exc}")
                row["wall_time"] = f"{time.perf_counter() - start:.2f}"
                writer.writerow(row)
                fh.flush()
    return read_results(csv_path)


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def read_results(csv_path: Union[str, Path]) -> list[dict]:
    with open(csv_path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: list[dict], points: Optional[list[str]] = None) -> dict[str, dict]:
    """Per-point mean/std of C1 and C2 accuracy over successful seeds."""
    out = {}
    names = points or list(dict.fromkeys(r["point"] for r in rows))
    for name in names:
        ok = [r for r in rows if r["point"] == name and r["status"] == "ok"]
        c1 = np.array([float(r["acc_c1"]) for r in ok])
        c2 = np.array([float(r["acc_c2"]) for r in ok])
        out[name] = {
            "seeds": [int(r["seed"]) for r in ok],
            "acc_c1": c1,
            "acc_c2": c2,
            "mean_c1": float(c1.mean()) if len(c1) else float("nan"),
            "mean_c2": float(c2.mean()) if len(c2) else float("nan"),
            "std_c2": float(c2.std(ddof=1)) if len(c2) > 1 else 0.0,
        }
    return out


def render_table(summary: dict[str, dict]) -> str:
    lines = [f"{'point':<28} {'seeds':>5} {'Accuracy (C1)':>14} {'Combined (C2)':>14}"]
    for name, s in summary.items():
        lines.append(f"{name:<28} {len(s['seeds']):>5} {100 * s['mean_c1']:>13.2f}% {100 * s['mean_c2']:>13.2f}%")
    return "\n".join(lines)


def paired_gap(summary: dict[str, dict], a: str, b: str) -> float:
    """Mean over shared seeds of ``C2(a) - C2(b)``."""
    sa, sb = summary[a], summary[b]
    shared = sorted(set(sa["seeds"]) & set(sb["seeds"]))
    da = dict(zip(sa["seeds"], sa["acc_c2"]))
    db = dict(zip(sb["seeds"], sb["acc_c2"]))
    return float(np.mean([da[s] - db[s] for s in shared])) if shared else float("nan")
