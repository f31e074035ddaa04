"""Datasets, transforms and batching.

Images are kept as ``(H, W, C)`` uint8 arrays until a transform turns them
into normalized ``(C, H, W)`` float tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, DatasetItemError, DivisibilityError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class LabeledDataset:
    items: list[tuple[Union[str, np.ndarray], int]]
    num_classes: int
    split: str = "train"
    class_names: list[str] = field(default_factory=list)
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for ref, y in self.items:
            if not 0 <= y < self.num_classes:
                raise DatasetItemError(f"label {y} outside [0, {self.num_classes})", path=ref if isinstance(ref, str) else None)

    def __len__(self):
        return len(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.items], dtype=np.int64)

    def image(self, i: int) -> np.ndarray:
        ref = self.items[i][0]
        if isinstance(ref, np.ndarray):
            return ref
        return _decode(ref)

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset(
            [self.items[i] for i in indices], self.num_classes, split or self.split,
            self.class_names, self.mean, self.std,
        )


def _decode(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:  # PIL raises a zoo of types
        raise DatasetItemError(f"cannot decode image {path}: {exc}", path=path) from exc


def load_image_folder(root: Union[str, Path], split: str = "train") -> LabeledDataset:
    """``root/<class_name>/*.<image>``; classes are indexed alphabetically."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetItemError(f"dataset root {root} has no class subdirectories", path=str(root))
    items = []
    for k, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    im.verify()
            except Exception as exc:
                raise DatasetItemError(f"cannot decode image {path}: {exc}", path=str(path)) from exc
            items.append((str(path), k))
    if not items:
        raise DatasetItemError(f"dataset root {root} contains no images", path=str(root))
    return LabeledDataset(items, len(classes), split, classes)


def export_image_folder(dataset: LabeledDataset, root: Union[str, Path]) -> Path:
    root = Path(root)
    names = dataset.class_names or [f"class_{k:03d}" for k in range(dataset.num_classes)]
    for i, (_, y) in enumerate(dataset.items):
        d = root / names[y]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(dataset.image(i)).save(d / f"{i:05d}.png")
    return root


# -- transforms ---------------------------------------------------------------


@dataclass
class TransformConfig:
    resize: int = 80
    crop: int = 64

    def validate(self, max_n: int = 8) -> None:
        if self.crop > self.resize:
            raise ConfigError(f"crop size {self.crop} exceeds resize {self.resize}")
        if self.crop % max_n:
            raise ConfigError(f"crop size {self.crop} is not divisible by the largest n={max_n}")


FULL_SCALE_TRANSFORM = TransformConfig(550, 448)
DESK_TRANSFORM = TransformConfig(80, 64)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def _normalize(image: np.ndarray, mean, std) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float().div_(255.0)
    m = torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(-1, 1, 1)
    return (x - m) / s


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def train_transform(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: TransformConfig = DESK_TRANSFORM,
    mean=IMAGENET_MEAN,
    std=IMAGENET_STD,
    force_flip: Optional[bool] = None,
) -> torch.Tensor:
    """Resize to ``R``, random ``R'`` crop, random horizontal flip, normalize."""
    if cfg.crop > cfg.resize:
        raise ConfigError(f"crop size {cfg.crop} exceeds resize {cfg.resize}")
    x = _resize(image, cfg.resize)
    top, left = rng.integers(0, cfg.resize - cfg.crop + 1, size=2)
    x = x[top : top + cfg.crop, left : left + cfg.crop]
    flip = rng.random() < 0.5 if force_flip is None else force_flip
    if flip:
        x = hflip(x)
    return _normalize(x, mean, std)


def eval_transform(image: np.ndarray, cfg: TransformConfig = DESK_TRANSFORM, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> torch.Tensor:
    """Resize to ``R`` and take the centered ``R'`` crop."""
    if cfg.crop > cfg.resize:
        raise ConfigError(f"crop size {cfg.crop} exceeds resize {cfg.resize}")
    x = _resize(image, cfg.resize)
    off = (cfg.resize - cfg.crop) // 2
    return _normalize(x[off : off + cfg.crop, off : off + cfg.crop], mean, std)


# -- synthetic fine-grained data ---------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    image_size: int = 64
    samples_per_class: int = 16
    texture_patch_size: int = 16
    seed: int = 0
    max_n: int = 8
    crop_margin: float = 0.2  # fraction of the image a random crop may remove from one side
    texture_amplitude: int = 60
    noise: int = 6
    texture_cell: int = 1  # pixels per texture cell side
    texture_seed: Optional[int] = None  # defaults to seed


_TILE = 4


def _class_tiles(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean +/-1 tiles (per channel), pairwise distinct."""
    base = np.array([1] * (_TILE * _TILE // 2) + [-1] * (_TILE * _TILE // 2))
    tiles = []
    while len(tiles) < num_classes:
        t = np.stack([rng.permutation(base) for _ in range(3)], axis=-1).reshape(_TILE, _TILE, 3)
        if all(np.abs(t - u).sum() >= t.size for u in tiles):
            tiles.append(t)
    return np.stack(tiles)


def _texture_nn_accuracy(patches: np.ndarray, labels: np.ndarray) -> float:
    x = patches.reshape(len(patches), -1, patches.shape[-1]).astype(np.float64)
    x -= x.mean(axis=1, keepdims=True)  # per-channel patch color
    return _loo_1nn(x.reshape(len(x), -1), labels)


def _mean_color_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    return _loo_1nn(images.reshape(len(images), -1, images.shape[-1]).mean(axis=1), labels)


def _loo_1nn(features: np.ndarray, labels: np.ndarray) -> float:
    d = ((features[:, None, :] - features[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return float((labels[d.argmin(axis=1)] == labels).mean())


def make_synthetic(spec: SyntheticSpec, split: str = "train") -> LabeledDataset:
    """Shared global shape plus one class-specific micro-texture patch.

    Per-image colors are drawn from one class-independent distribution and the
    textures are exactly zero-mean, so the global mean color carries no class
    signal while the texture patch determines the class.  Both claims are
    checked with leave-one-out nearest-neighbor oracles before returning.
    """
    s, p = spec.image_size, spec.texture_patch_size
    if s % spec.max_n:
        raise DivisibilityError(f"image_size {s} is not divisible by max n={spec.max_n}")
    period = _TILE * spec.texture_cell
    if p % period:
        raise ConfigError(f"texture_patch_size must be a multiple of the texture period {period}")
    margin = int(np.ceil(s * spec.crop_margin))
    if s - 2 * margin - p < 0:
        raise ConfigError(f"texture_patch_size {p} does not fit inside the crop-safe region of a {s}px image")
    if p > s // spec.max_n:
        log.debug("texture patch %d px spans several n=%d cells and may be split", p, spec.max_n)

    rng = np.random.default_rng(spec.seed)
    texture_seed = spec.seed if spec.texture_seed is None else spec.texture_seed
    tiles = _class_tiles(spec.num_classes, np.random.default_rng([texture_seed, 1]))
    amp, noise = spec.texture_amplitude, spec.noise
    lo, hi = amp + noise + 10, 255 - amp - noise - 10  # keeps every pixel unclipped

    yy, xx = np.mgrid[0:s, 0:s]
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    images, patches, locations = [], [], []
    for y in labels:
        bg = rng.integers(lo, hi, size=3)
        fg = rng.integers(lo, hi, size=3)
        cy, cx = rng.uniform(0.4 * s, 0.6 * s, size=2)
        ry, rx = rng.uniform(0.22 * s, 0.32 * s, size=2)
        body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(body[..., None], fg, bg).astype(np.int64)

        top, left = rng.integers(margin, s - margin - p + 1, size=2)
        patch_color = rng.integers(lo, hi, size=3)
        tile = np.repeat(np.repeat(tiles[y], spec.texture_cell, axis=0), spec.texture_cell, axis=1)
        texture = np.tile(tile, (p // period, p // period, 1)) * amp
        img[top : top + p, left : left + p] = patch_color + texture
        img += rng.integers(-noise, noise + 1, size=img.shape)
        img = img.astype(np.uint8)
        images.append(img)
        patches.append(img[top : top + p, left : left + p])
        locations.append((int(top), int(left)))

    images_arr = np.stack(images)
    texture_acc = color_acc = None
    # leave-one-out needs a second item per class
    if spec.samples_per_class >= 2:
        texture_acc = _texture_nn_accuracy(np.stack(patches), labels)
        color_acc = _mean_color_accuracy(images_arr, labels)
    if texture_acc is not None and (texture_acc < 1.0 or color_acc > 2.0 / spec.num_classes):
        raise RuntimeError(
            f"synthetic self-check failed: texture-NN {texture_acc:.3f}, mean-color {color_acc:.3f}"
        )

    flat = images_arr.reshape(-1, 3) / 255.0
    return LabeledDataset(
        [(img, int(y)) for img, y in zip(images, labels)],
        spec.num_classes,
        split,
        [f"class_{k:03d}" for k in range(spec.num_classes)],
        tuple(float(v) for v in flat.mean(axis=0)),
        tuple(float(v) for v in flat.std(axis=0)),
        meta={"texture_nn_acc": texture_acc, "mean_color_acc": color_acc, "locations": locations},
    )


def make_synthetic_splits(spec: SyntheticSpec, test_per_class: Optional[int] = None):
    """Train/test pair sharing class textures; the test split reuses train statistics."""
    texture_seed = spec.seed if spec.texture_seed is None else spec.texture_seed
    train = make_synthetic(replace(spec, texture_seed=texture_seed), "train")
    test_spec = replace(
        spec,
        seed=spec.seed + 7919,
        texture_seed=texture_seed,
        samples_per_class=test_per_class or spec.samples_per_class,
    )
    test = make_synthetic(test_spec, "test")
    test.mean, test.std = train.mean, train.std
    return train, test


# -- batching -----------------------------------------------------------------


def batch_iterator(
    dataset: Union[LabeledDataset, int], batch_size: int, epoch: int, run_seed: int, drop_singleton: bool = True
) -> Iterator[np.ndarray]:
    """Yield index arrays for one epoch in an ``(epoch, run_seed)``-seeded order.

    The final partial batch is kept, except a final batch of one, which would
    break training-mode batch normalization.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    size = dataset if isinstance(dataset, int) else len(dataset)
    order = np.random.default_rng([run_seed, epoch, 0xBA7C4]).permutation(size)
    for start in range(0, size, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) == 1 and drop_singleton and size > 1:
            log.warning("dropping final batch of a single item (epoch %d)", epoch)
            continue
        yield idx


def transform_seed(run_seed: int, epoch: int, batch: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, epoch, batch, index, 0xC0FFEE])


def load_batch(
    dataset: LabeledDataset,
    indices: Sequence[int],
    cfg: TransformConfig,
    train: bool,
    run_seed: int = 0,
    epoch: int = 0,
    batch: int = 0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack transformed images and labels for ``indices``."""
    xs = []
    for j, i in enumerate(indices):
        img = dataset.image(int(i))
        if train:
            rng = np.random.default_rng(transform_seed(run_seed, epoch, batch, j))
            xs.append(train_transform(img, rng, cfg, dataset.mean, dataset.std))
        else:
            xs.append(eval_transform(img, cfg, dataset.mean, dataset.std))
    labels = torch.tensor([dataset.items[int(i)][1] for i in indices], dtype=torch.long)
    return torch.stack(xs), labels
