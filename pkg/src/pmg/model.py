"""Stage-tapped classifier: backbone stages, per-stage conv blocks and heads,
and a classifier over the concatenated stage vectors.

Parameter names follow ``backbone.stage{l}.*``, ``convblock{l}.*``,
``head{l}.*`` and ``head_concat.*``; checkpoints and the gradient-scoping
checks rely on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, StageIndexError

__all__ = [
    "ArchConfig",
    "StageOutput",
    "ConcatOutput",
    "PMGNet",
    "build_model",
    "forward_to_stage",
    "forward_concat",
    "register_backbone",
    "receptive_fields",
]

DESK_CHANNELS = (16, 32, 64, 128, 256)


@dataclass
class ArchConfig:
    backbone: str = "desk"
    num_stages: int = 5
    supervised_stages: int = 3
    num_classes: int = 8
    vector_dim: int = 32
    mid_dim: Optional[int] = None  # defaults to vector_dim
    hidden_dim: Optional[int] = None  # defaults to vector_dim
    channels: tuple[int, ...] = DESK_CHANNELS
    in_channels: int = 3
    pretrained_path: Optional[str] = None

    def validate(self) -> None:
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if not 1 <= self.supervised_stages <= self.num_stages:
            raise ConfigError(
                f"supervised_stages S={self.supervised_stages} must satisfy 1 <= S <= L={self.num_stages}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.backbone not in _BACKBONES:
            raise ConfigError(f"unknown backbone family {self.backbone!r}; known: {sorted(_BACKBONES)}")
        if self.backbone == "desk" and len(self.channels) != self.num_stages:
            raise ConfigError(f"desk backbone needs {self.num_stages} channel widths, got {len(self.channels)}")
        for name in ("vector_dim", "mid_dim", "hidden_dim"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive, got {v}")


class Backbone(nn.Module):
    """Ordered stages ``stage1 .. stageL``; ``out_channels[l-1]`` is C_l."""

    def __init__(self, stages: Sequence[nn.Module], out_channels: Sequence[int], pretrained: bool = False):
        super().__init__()
        for l, stage in enumerate(stages, start=1):
            self.add_module(f"stage{l}", stage)
        self.num_stages = len(stages)
        self.out_channels = tuple(out_channels)
        self.pretrained = pretrained

    def stage(self, l: int) -> nn.Module:
        return getattr(self, f"stage{l}")

    def forward(self, x: torch.Tensor, upto: Optional[int] = None) -> list[torch.Tensor]:
        feats = []
        for l in range(1, (upto or self.num_stages) + 1):
            x = self.stage(l)(x)
            feats.append(x)
        return feats


def _desk_stage(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2, ceil_mode=True),
    )


def _desk_backbone(cfg: ArchConfig) -> Backbone:
    widths = (cfg.in_channels,) + tuple(cfg.channels)
    stages = [_desk_stage(widths[i], widths[i + 1]) for i in range(cfg.num_stages)]
    return Backbone(stages, cfg.channels)


def _resnet50_backbone(cfg: ArchConfig) -> Backbone:
    # stem + layer1..layer4 as the five stages
    import torchvision

    if cfg.num_stages != 5:
        raise ConfigError("resnet50 backbone has exactly 5 stages")
    net = torchvision.models.resnet50(weights=None)
    pretrained = False
    if cfg.pretrained_path:
        state = torch.load(cfg.pretrained_path, map_location="cpu")
        net.load_state_dict(state)
        pretrained = True
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return Backbone(
        [stem, net.layer1, net.layer2, net.layer3, net.layer4],
        (64, 256, 512, 1024, 2048),
        pretrained=pretrained,
    )


_BACKBONES: dict[str, Callable[[ArchConfig], Backbone]] = {
    "desk": _desk_backbone,
    "resnet50": _resnet50_backbone,
}


def register_backbone(name: str, factory: Callable[[ArchConfig], Backbone]) -> None:
    """Make an externally supplied backbone available to ``build_model``."""
    _BACKBONES[name] = factory


class ConvBlock(nn.Module):
    """1x1 conv + BN + ReLU, 3x3 conv + BN + ReLU, global max pool."""

    def __init__(self, c_in: int, c_mid: int, c_out: int):
        super().__init__()
        self.reduce = nn.Sequential(nn.Conv2d(c_in, c_mid, 1, bias=False), nn.BatchNorm2d(c_mid), nn.ReLU(inplace=True))
        self.conv = nn.Sequential(nn.Conv2d(c_mid, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))

    def forward(self, x):
        x = self.conv(self.reduce(x))
        return torch.amax(x, dim=(2, 3))


class ClassifierHead(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.bn = nn.BatchNorm1d(d_hidden)
        self.act = nn.ELU(alpha=1.0)
        self.fc2 = nn.Linear(d_hidden, num_classes)

    def forward(self, v):
        return self.fc2(self.act(self.bn(self.fc1(v))))


@dataclass
class StageOutput:
    stage: int
    vector: torch.Tensor  # (B, D_v)
    logits: Optional[torch.Tensor]  # (B, K) pre-softmax scores
    probs: Optional[torch.Tensor]  # (B, K)


@dataclass
class ConcatOutput:
    stages: list[StageOutput]
    vector: torch.Tensor  # (B, S * D_v)
    logits: torch.Tensor
    probs: torch.Tensor
    features: dict[int, torch.Tensor] = field(default_factory=dict)


class PMGNet(nn.Module):
    def __init__(self, cfg: ArchConfig, backbone: Backbone):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        self.L = backbone.num_stages
        self.S = cfg.supervised_stages
        self.K = cfg.num_classes
        d_v = cfg.vector_dim
        d_mid = cfg.mid_dim or d_v
        d_h = cfg.hidden_dim or d_v
        self.supervised = tuple(range(self.L - self.S + 1, self.L + 1))
        for l in self.supervised:
            self.add_module(f"convblock{l}", ConvBlock(backbone.out_channels[l - 1], d_mid, d_v))
            self.add_module(f"head{l}", ClassifierHead(d_v, d_h, self.K))
        self.head_concat = ClassifierHead(self.S * d_v, d_h, self.K)

    def convblock(self, l: int) -> ConvBlock:
        return getattr(self, f"convblock{l}")

    def head(self, l: int) -> ClassifierHead:
        return getattr(self, f"head{l}")

    def _check_stage(self, l: int) -> None:
        if l not in self.supervised:
            raise StageIndexError(f"stage {l} is not supervised; supervised stages are {self.supervised}")

    def _check_input(self, x: torch.Tensor, upto: int) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        if self.cfg.backbone == "desk":
            div = 2**upto
            if x.shape[2] % div or x.shape[3] % div:
                raise ShapeError(f"input extents {tuple(x.shape[2:])} must be divisible by 2^{upto}={div}")

    def stage_from_features(self, feature: torch.Tensor, l: int) -> StageOutput:
        """Conv block and head ``l`` applied to a stage feature map."""
        v = self.convblock(l)(feature)
        logits = self.head(l)(v)
        return StageOutput(l, v, logits, F.softmax(logits, dim=1))

    def forward_stage(self, x: torch.Tensor, l: int) -> StageOutput:
        self._check_stage(l)
        self._check_input(x, l)
        feature = self.backbone(x, upto=l)[-1]
        return self.stage_from_features(feature, l)

    def forward_all(self, x: torch.Tensor, keep_features: bool = False, stage_heads: bool = True) -> ConcatOutput:
        """Full forward.  ``stage_heads=False`` skips the stage classifiers
        (their outputs are then ``None``), as in the concat training step."""
        self._check_input(x, self.L)
        feats = self.backbone(x)
        if stage_heads:
            stages = [self.stage_from_features(feats[l - 1], l) for l in self.supervised]
        else:
            stages = [StageOutput(l, self.convblock(l)(feats[l - 1]), None, None) for l in self.supervised]
        v = torch.cat([s.vector for s in stages], dim=1)
        logits = self.head_concat(v)
        kept = {l: feats[l - 1] for l in self.supervised} if keep_features else {}
        return ConcatOutput(stages, v, logits, F.softmax(logits, dim=1), kept)

    def forward(self, x):
        return self.forward_all(x)

    def parameter_group(self, name: str) -> str:
        """Group key of a parameter name, e.g. ``backbone.stage2``, ``head4``."""
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "backbone" else parts[0]

    def pretrained_parameter_names(self) -> set[str]:
        if not self.backbone.pretrained:
            return set()
        return {name for name, _ in self.named_parameters() if name.startswith("backbone.")}


def build_model(cfg: ArchConfig, seed: Optional[int] = None) -> PMGNet:
    cfg.validate()
    if seed is not None:
        torch.manual_seed(seed)
    backbone = _BACKBONES[cfg.backbone](cfg)
    if backbone.num_stages != cfg.num_stages:
        raise ConfigError(f"backbone {cfg.backbone!r} has {backbone.num_stages} stages, config says {cfg.num_stages}")
    return PMGNet(cfg, backbone)


def forward_to_stage(model: PMGNet, images: torch.Tensor, l: int, train_mode: bool = False):
    """Truncated forward through stages ``1..l``, conv block ``l`` and head ``l``.

    Returns ``(vectors, probs)``.
    """
    model.train(train_mode)
    out = model.forward_stage(images, l)
    return out.vector, out.probs


def forward_concat(model: PMGNet, images: torch.Tensor, train_mode: bool = False):
    """Full forward; returns ``(stage vectors, stage probs, concat probs)``."""
    model.train(train_mode)
    out = model.forward_all(images)
    return [s.vector for s in out.stages], [s.probs for s in out.stages], out.probs


def receptive_fields(num_stages: int = 5) -> list[int]:
    """Receptive field (pixels) at the output of each desk backbone stage."""
    rf, jump, out = 1, 1, []
    for _ in range(num_stages):
        rf += 2 * jump  # 3x3 conv
        rf += 2 * jump  # 3x3 conv
        rf += jump  # 2x2 max pool, stride 2
        jump *= 2
        out.append(rf)
    return out
