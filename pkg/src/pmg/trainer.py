"""Progressive multi-granularity training.

Each iteration runs S stage steps on jigsaw views, shallow stages first, then
one step on the original batch through the concatenated-feature classifier.
Every step backpropagates and updates immediately, so parameters shared by
several steps (the shallow backbone stages) move several times per iteration.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, model_state, save_checkpoint
from .data import DESK_TRANSFORM, LabeledDataset, TransformConfig, batch_iterator, load_batch
from .errors import ConfigError, LabelError, TrainingDivergenceError
from .inference import evaluate
from .jigsaw import ScheduleEntry, granularity_schedule, jigsaw_batch, permutation_seed, sample_permutation
from .model import PMGNet

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
METRIC_COLUMNS = ["epoch", "iter", "step_kind", "n", "loss", "lr", "train_acc", "val_acc_c1", "val_acc_c2"]
TRAIN_MODES = ("progressive", "single_step", "separate")


@dataclass
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 2.0
    base_lr: float = 0.002
    pretrained_lr_ratio: Optional[float] = None  # None: 0.1 for pretrained backbones, else 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 200
    max_iters: Optional[int] = None
    run_seed: int = 0
    n_schedule: Union[str, list] = "doubling"
    shuffle: str = "per_image"  # or "per_batch"
    mode: str = "progressive"
    score_mode: str = "prob"
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    separate_fusion_epochs: int = 20

    def validate(self, num_stages: Optional[int] = None, supervised: Optional[int] = None) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or (self.max_iters is not None and self.max_iters < 0):
            raise ConfigError("epochs and max_iters must be non-negative")
        if self.shuffle not in ("per_image", "per_batch"):
            raise ConfigError(f"shuffle must be 'per_image' or 'per_batch', got {self.shuffle!r}")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.score_mode not in ("prob", "logit"):
            raise ConfigError(f"score_mode must be 'prob' or 'logit', got {self.score_mode!r}")
        if num_stages is not None and supervised is not None:
            try:
                granularity_schedule(num_stages, supervised, self.n_schedule)
            except (ValueError, IndexError) as exc:
                raise ConfigError(str(exc)) from exc


@dataclass
class StepRecord:
    iteration: int
    step_kind: str  # "stage{l}" or "concat"
    n: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class OptimizerState:
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0
    total_steps: int = 0


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean ``-log p[label]`` over the batch, with ``p`` floored at 1e-12."""
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    k = probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{int(labels.min())}, {int(labels.max())}]")
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def cosine_lr(t: float, total: float, base_lr: float) -> float:
    if total <= 0:
        raise ConfigError(f"schedule length must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))


@torch.no_grad()
def sgd_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, Optional[torch.Tensor]],
    lr: float,
    momentum: float,
    weight_decay: float,
    state: OptimizerState,
    lr_scale: Optional[dict[str, float]] = None,
) -> None:
    """Momentum SGD in place: ``v = m*v + (g + wd*p)``, ``p -= lr_eff * v``.

    Parameters whose gradient is ``None`` were not on the forward path and are
    left alone, velocity included.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name}", parameter=name)
    lr_scale = lr_scale or {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        d = g + weight_decay * p if weight_decay else g.clone()
        v = state.velocity.get(name)
        if v is None:
            v = torch.zeros_like(p)
            state.velocity[name] = v
        v.mul_(momentum).add_(d)
        p.sub_(lr * lr_scale.get(name, 1.0) * v)


class Trainer:
    """Holds the model, optimizer state and per-step machinery for one run."""

    def __init__(self, model: PMGNet, cfg: TrainingConfig, state: Optional[OptimizerState] = None):
        cfg.validate(model.L, model.S)
        self.model = model
        self.cfg = cfg
        self.state = state or OptimizerState()
        self.schedule = granularity_schedule(model.L, model.S, cfg.n_schedule)
        ratio = cfg.pretrained_lr_ratio
        if ratio is None:
            ratio = 0.1 if model.backbone.pretrained else 1.0
        pretrained = model.pretrained_parameter_names() if model.backbone.pretrained else set()
        self.lr_scale = {name: ratio for name in pretrained}
        self.params = dict(model.named_parameters())

    # -- single steps -----------------------------------------------------

    def _views(self, images: torch.Tensor, entry: ScheduleEntry, step: int, seeds: tuple[int, int, int]) -> torch.Tensor:
        if entry.n == 1:
            return images
        run_seed, epoch, batch = seeds
        count = 1 if self.cfg.shuffle == "per_batch" else images.shape[0]
        perms = [sample_permutation(entry.n, permutation_seed(run_seed, epoch, batch, i, step)) for i in range(count)]
        return jigsaw_batch(images, perms)

    def _loss(self, entry: ScheduleEntry, x: torch.Tensor, labels: torch.Tensor):
        if entry.stage == "concat":
            out = self.model.forward_all(x, stage_heads=False)
            weight = self.cfg.beta
        else:
            out = self.model.forward_stage(x, entry.stage)
            weight = self.cfg.alpha
        loss = weight * cross_entropy(out.probs, labels)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at step {entry.stage}")
        acc = (out.probs.argmax(dim=1) == labels).double().mean().item()
        return loss, acc

    def _backward_update(self, loss: torch.Tensor, lr: float) -> None:
        for p in self.params.values():
            p.grad = None
        loss.backward()
        grads = {name: p.grad for name, p in self.params.items()}
        sgd_update(self.params, grads, lr, self.cfg.momentum, self.cfg.weight_decay, self.state, self.lr_scale)

    def step_gradients(self, images, labels, entry: ScheduleEntry, seeds=(0, 0, 0), step: int = 0):
        """Gradients of one step's loss without updating; used by scoping checks."""
        self.model.train(True)
        x = self._views(images, entry, step, seeds)
        loss, _ = self._loss(entry, x, labels)
        for p in self.params.values():
            p.grad = None
        loss.backward()
        grads = {name: (None if p.grad is None else p.grad.clone()) for name, p in self.params.items()}
        for p in self.params.values():
            p.grad = None
        return grads

    # -- iterations -------------------------------------------------------

    def train_iteration(self, images, labels, lr: float, iteration: int = 0, seeds=(0, 0, 0)) -> list[StepRecord]:
        """One progressive iteration: S stage steps then the concat step."""
        self.model.train(True)
        records = []
        for step, entry in enumerate(self.schedule):
            x = self._views(images, entry, step, seeds)
            loss, acc = self._loss(entry, x, labels)
            self._backward_update(loss, lr)
            records.append(StepRecord(iteration, _kind(entry), entry.n, loss.item(), acc, lr))
        return records

    def train_iteration_single_step(self, images, labels, lr: float, iteration: int = 0, seeds=(0, 0, 0)) -> list[StepRecord]:
        """Non-progressive baseline: all S+1 losses summed, one backward, one update."""
        self.model.train(True)
        losses, records = [], []
        for step, entry in enumerate(self.schedule):
            x = self._views(images, entry, step, seeds)
            loss, acc = self._loss(entry, x, labels)
            losses.append(loss)
            records.append(StepRecord(iteration, _kind(entry), entry.n, loss.item(), acc, lr))
        self._backward_update(torch.stack(losses).sum(), lr)
        return records

    def iterate(self, images, labels, lr, iteration=0, seeds=(0, 0, 0)):
        if self.cfg.mode == "single_step":
            return self.train_iteration_single_step(images, labels, lr, iteration, seeds)
        return self.train_iteration(images, labels, lr, iteration, seeds)


def _kind(entry: ScheduleEntry) -> str:
    return "concat" if entry.stage == "concat" else f"stage{entry.stage}"


def train_iteration(images, labels, model: PMGNet, cfg: TrainingConfig, state: OptimizerState, lr: float, seeds=(0, 0, 0)):
    """Functional form of :meth:`Trainer.train_iteration`."""
    return Trainer(model, cfg, state).train_iteration(images, labels, lr, state.t, seeds)


# -- full runs ---------------------------------------------------------------


@dataclass
class FitResult:
    model: PMGNet
    history: list[dict]
    state: OptimizerState
    records: list[StepRecord] = field(default_factory=list)


def _iters_per_epoch(n_items: int, batch_size: int) -> int:
    full, rem = divmod(n_items, batch_size)
    return full + (1 if rem > 1 or (rem == 1 and n_items == 1) else 0)


def fit(
    dataset: LabeledDataset,
    model: PMGNet,
    cfg: TrainingConfig,
    transform: TransformConfig = DESK_TRANSFORM,
    val_dataset: Optional[LabeledDataset] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    config_snapshot: Optional[dict] = None,
    resume: Optional[Union[str, Path]] = None,
    train_eval: bool = False,
    on_epoch: Optional[Callable[[dict], None]] = None,
    schedule: Optional[list[ScheduleEntry]] = None,
) -> FitResult:
    """Train for ``cfg.epochs`` epochs (or ``cfg.max_iters`` iterations).

    The cosine schedule advances once per iteration over the run's total
    iteration count.  With ``train_eval`` the training set is also evaluated
    with the eval transform at every epoch end (``train_acc_eval``).
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    cfg.validate(model.L, model.S)
    per_epoch = _iters_per_epoch(len(dataset), cfg.batch_size)
    if cfg.max_iters is not None:
        total = cfg.max_iters
        epochs = math.ceil(total / per_epoch) if per_epoch else 0
    else:
        epochs = cfg.epochs
        total = epochs * per_epoch
    state = OptimizerState(total_steps=total)
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume, expected_config=config_snapshot)
        model.load_state_dict(ck.model_state)
        state = OptimizerState({k: v.clone() for k, v in ck.velocity.items()}, ck.t, ck.total_steps or total)
        start_epoch = ck.epoch + 1
        total = state.total_steps
    trainer = Trainer(model, cfg, state)
    if schedule is not None:
        trainer.schedule = list(schedule)
    history: list[dict] = []
    records: list[StepRecord] = []
    if total == 0:
        return FitResult(model, history, state, records)

    writer = None
    fh = None
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = resume is None or not metrics_path.exists()
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    last_good = None
    try:
        for epoch in range(start_epoch, epochs):
            if state.t >= total:
                break
            epoch_records = []
            rows = []
            for b, idx in enumerate(batch_iterator(dataset, cfg.batch_size, epoch, cfg.run_seed)):
                if state.t >= total:
                    break
                x, y = load_batch(dataset, idx, transform, train=True, run_seed=cfg.run_seed, epoch=epoch, batch=b)
                lr = cosine_lr(state.t, total, cfg.base_lr)
                recs = trainer.iterate(x, y, lr, state.t, (cfg.run_seed, epoch, b))
                state.t += 1
                epoch_records.extend(recs)
                rows.extend([epoch, r.iteration, r.step_kind, r.n, repr(r.loss), repr(r.lr), repr(r.accuracy), "", ""] for r in recs)
            summary = _epoch_summary(epoch, state.t, epoch_records)
            if val_dataset is not None and len(val_dataset):
                rep = evaluate(model, val_dataset, transform, score_mode=cfg.score_mode)
                summary.update(val_acc_c1=rep.accuracy_c1, val_acc_c2=rep.accuracy_c2)
                if rows:
                    rows[-1][7], rows[-1][8] = repr(rep.accuracy_c1), repr(rep.accuracy_c2)
            if train_eval:
                rep = evaluate(model, dataset, transform, score_mode=cfg.score_mode)
                summary.update(train_acc_eval_c1=rep.accuracy_c1, train_acc_eval_c2=rep.accuracy_c2)
            if writer is not None:
                writer.writerows(rows)
                fh.flush()
            history.append(summary)
            records.extend(epoch_records)
            done = state.t >= total or epoch == epochs - 1
            if checkpoint_dir is not None and (done or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
                last_good = save_checkpoint(
                    Path(checkpoint_dir) / "latest.ckpt",
                    Checkpoint(model_state(model), dict(state.velocity), state.t, total, epoch, config_snapshot or {}, summary),
                )
            if on_epoch is not None:
                on_epoch(summary)
    except TrainingDivergenceError:
        if last_good is not None:
            log.error("training diverged; last good checkpoint kept at %s", last_good)
        raise
    finally:
        if fh is not None:
            fh.close()
    return FitResult(model, history, state, records)


def _epoch_summary(epoch: int, t: int, records: Sequence[StepRecord]) -> dict:
    summary: dict = {"epoch": epoch, "t": t}
    kinds = sorted({r.step_kind for r in records}, key=lambda k: (k == "concat", k))
    for kind in kinds:
        rs = [r for r in records if r.step_kind == kind]
        summary[f"loss_{kind}"] = float(np.mean([r.loss for r in rs]))
    concat = [r.accuracy for r in records if r.step_kind == "concat"]
    summary["train_acc"] = float(np.mean(concat)) if concat else float("nan")
    return summary
