"""Grad-CAM maps at the supervised backbone stages."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .model import PMGNet


@dataclass
class GradCAMResult:
    stage: int
    class_index: int
    heatmap: np.ndarray  # (H_l, W_l) in [0, 1]
    channel_weights: np.ndarray  # (C_l,)
    feature: np.ndarray  # (C_l, H_l, W_l)


def class_score(model: PMGNet, feature: torch.Tensor, stage: int, source: str = "stage") -> torch.Tensor:
    """Pre-softmax scores ``(1, K)`` computed from a stage-``stage`` feature map.

    ``source="stage"`` scores with that stage's own classifier;
    ``source="concat"`` runs the remaining backbone stages and the concat
    classifier, holding the other supervised stages' inputs fixed at the
    values this feature map produces.
    """
    if source == "stage":
        return model.stage_from_features(feature, stage).logits
    feats = {stage: feature}
    x = feature
    for l in range(stage + 1, model.L + 1):
        x = model.backbone.stage(l)(x)
        feats[l] = x
    vectors = []
    for l in model.supervised:
        if l not in feats:
            raise ValueError("concat-source Grad-CAM needs the lowest supervised stage or above")
        vectors.append(model.convblock(l)(feats[l]))
    return model.head_concat(torch.cat(vectors, dim=1))


def grad_cam(
    model: PMGNet,
    image: torch.Tensor,
    stage: int,
    class_index: Union[int, str] = "predicted",
    source: str = "stage",
) -> GradCAMResult:
    """Grad-CAM for one ``(C, H, W)`` image at backbone stage ``stage``.

    Weights are the spatial means of the class-score gradient w.r.t. the
    stage feature map; the map is the rectified weighted channel sum divided
    by its maximum (all zeros stay all zeros).
    """
    model._check_stage(stage)
    model.eval()
    x = image.unsqueeze(0) if image.ndim == 3 else image
    with torch.no_grad():
        feature = model.backbone(x, upto=stage)[-1]
    feature = feature.detach().clone().requires_grad_(True)
    scores = class_score(model, feature, stage, source)
    if class_index == "predicted":
        class_index = int(scores.detach().argmax(dim=1)[0])
    class_index = int(class_index)
    if not 0 <= class_index < model.K:
        raise ValueError(f"class index {class_index} outside [0, {model.K})")
    (grad,) = torch.autograd.grad(scores[0, class_index], feature)
    weights = grad[0].mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * feature[0].detach()).sum(dim=0))
    peak = cam.max()
    heat = cam / peak if peak > 0 else torch.zeros_like(cam)
    return GradCAMResult(
        stage,
        class_index,
        heat.double().numpy(),
        weights.double().numpy(),
        feature[0].detach().double().numpy(),
    )


def save_overlay(image_rgb: np.ndarray, heatmap: np.ndarray, path: Union[str, Path], alpha: float = 0.45) -> Path:
    """Bilinearly upsample ``heatmap`` to the image size and blend a jet overlay."""
    from matplotlib import colormaps
    from PIL import Image

    h, w = image_rgb.shape[:2]
    up = F.interpolate(torch.from_numpy(heatmap)[None, None].float(), size=(h, w), mode="bilinear", align_corners=False)
    colored = colormaps["jet"](up[0, 0].clamp(0, 1).numpy())[..., :3]
    blend = (1 - alpha) * image_rgb.astype(np.float64) / 255.0 + alpha * colored
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((blend.clip(0, 1) * 255).round().astype(np.uint8)).save(path)
    return path


def denormalize(x: torch.Tensor, mean, std) -> np.ndarray:
    """Normalized ``(C, H, W)`` tensor back to an ``(H, W, C)`` uint8 image."""
    m = torch.tensor(mean).view(-1, 1, 1)
    s = torch.tensor(std).view(-1, 1, 1)
    img = (x.detach().float() * s + m).clamp(0, 1)
    return (img.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
