"""Prediction rules on original images and dataset evaluation.

``c1`` takes the concat classifier alone; ``c2`` sums the stage distributions
and the concat distribution with equal weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import DESK_TRANSFORM, LabeledDataset, TransformConfig, load_batch
from .errors import EvaluationError
from .model import PMGNet

__all__ = ["Prediction", "EvalReport", "combine", "predict", "evaluate"]


@dataclass
class Prediction:
    c1: np.ndarray  # (B,)
    c2: np.ndarray  # (B,)
    stage_probs: dict[int, np.ndarray]  # stage -> (B, K)
    concat_probs: np.ndarray  # (B, K)

    @property
    def per_source_probs(self) -> dict:
        return {**self.stage_probs, "concat": self.concat_probs}


def combine(stage_scores: Sequence[np.ndarray], concat_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(c1, c2)`` from per-source scores; ties go to the lowest class index."""
    concat_scores = np.asarray(concat_scores)
    total = concat_scores + sum(np.asarray(s) for s in stage_scores)
    # np.argmax returns the first maximal index
    return np.argmax(concat_scores, axis=-1), np.argmax(total, axis=-1)


@torch.no_grad()
def predict(model: PMGNet, images: torch.Tensor, score_mode: str = "prob") -> Prediction:
    """Single full forward on eval-transformed images.

    ``score_mode="logit"`` sums pre-softmax scores instead of probabilities
    for the combined rule (comparison only).
    """
    if score_mode not in ("prob", "logit"):
        raise ValueError(f"score_mode must be 'prob' or 'logit', got {score_mode!r}")
    model.eval()
    out = model.forward_all(images)
    stage_probs = {s.stage: s.probs.double().numpy() for s in out.stages}
    concat_probs = out.probs.double().numpy()
    if score_mode == "prob":
        c1, c2 = combine(list(stage_probs.values()), concat_probs)
    else:
        c1, c2 = combine([s.logits.double().numpy() for s in out.stages], out.logits.double().numpy())
    return Prediction(c1, c2, stage_probs, concat_probs)


@dataclass
class EvalReport:
    size: int
    accuracy_c1: float
    accuracy_c2: float
    stage_accuracy: dict[int, float]
    confusion_c1: np.ndarray = field(repr=False)
    confusion_c2: np.ndarray = field(repr=False)

    def as_row(self) -> dict:
        row = {"size": self.size, "acc_c1": self.accuracy_c1, "acc_c2": self.accuracy_c2}
        row.update({f"acc_stage{l}": a for l, a in self.stage_accuracy.items()})
        return row

    def summary(self) -> str:
        stages = ", ".join(f"stage{l} {a:.4f}" for l, a in self.stage_accuracy.items())
        return (
            f"{self.size} samples: accuracy (C1) {self.accuracy_c1:.4f}, "
            f"combined accuracy (C2) {self.accuracy_c2:.4f}; {stages}"
        )


def evaluate(
    model: PMGNet,
    dataset: LabeledDataset,
    transform: TransformConfig = DESK_TRANSFORM,
    batch_size: int = 64,
    score_mode: str = "prob",
    images: Optional[torch.Tensor] = None,
) -> EvalReport:
    """Center-crop evaluation; ``images`` may pass pre-transformed inputs."""
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    k = model.K
    conf1 = np.zeros((k, k), dtype=np.int64)
    conf2 = np.zeros((k, k), dtype=np.int64)
    stage_hits = {l: 0 for l in model.supervised}
    labels_all = dataset.labels
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        if images is None:
            x, _ = load_batch(dataset, idx, transform, train=False)
        else:
            x = images[idx]
        y = labels_all[idx]
        pred = predict(model, x, score_mode)
        np.add.at(conf1, (y, pred.c1), 1)
        np.add.at(conf2, (y, pred.c2), 1)
        for l, p in pred.stage_probs.items():
            stage_hits[l] += int((p.argmax(axis=1) == y).sum())
    n = len(dataset)
    return EvalReport(
        n,
        float(np.trace(conf1)) / n,
        float(np.trace(conf2)) / n,
        {l: h / n for l, h in stage_hits.items()},
        conf1,
        conf2,
    )
