"""Jigsaw patch generator.

Splits an image into an ``n x n`` grid of equal cells, shuffles the cells with
a uniformly drawn permutation and reassembles them.  Smaller cells (larger
``n``) keep only fine-grained local evidence intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .errors import DivisibilityError, GranularityError, StageIndexError

__all__ = [
    "PatchPermutation",
    "ScheduleEntry",
    "sample_permutation",
    "apply_jigsaw",
    "jigsaw_batch",
    "invert_permutation",
    "granularity_for_stage",
    "granularity_schedule",
    "permutation_seed",
]

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class PatchPermutation:
    """Cell permutation for one jigsaw view.

    ``mapping[k]`` is the source cell copied into destination cell ``k``
    (cells are numbered row-major).
    """

    n: int
    mapping: tuple[int, ...]
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise GranularityError(f"granularity n must be >= 1, got {self.n}")
        if sorted(self.mapping) != list(range(self.n * self.n)):
            raise ValueError(f"mapping is not a permutation of 0..{self.n * self.n - 1}")

    @classmethod
    def identity(cls, n: int = 1) -> "PatchPermutation":
        return cls(n, tuple(range(n * n)))

    @property
    def is_identity(self) -> bool:
        return all(k == m for k, m in enumerate(self.mapping))


def sample_permutation(
    n: int, rng: Union[int, np.random.SeedSequence, np.random.Generator]
) -> PatchPermutation:
    """Draw a uniform permutation of the ``n*n`` cells (Fisher-Yates).

    ``rng`` may be an integer seed, a ``SeedSequence`` or a numpy
    ``Generator``; only integer seeds are recorded on the result.
    """
    if n < 1:
        raise GranularityError(f"granularity n must be >= 1, got {n}")
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    elif isinstance(rng, np.random.SeedSequence):
        rng = np.random.default_rng(rng)
    m = n * n
    cells = list(range(m))
    if m > 1:
        # one draw j_i in [0, i] for i = m-1 .. 1
        draws = rng.integers(0, np.arange(m, 1, -1))
        for i, j in zip(range(m - 1, 0, -1), draws):
            cells[i], cells[j] = cells[j], cells[i]
    return PatchPermutation(n, tuple(cells), seed)


def invert_permutation(perm: PatchPermutation) -> PatchPermutation:
    inverse = [0] * len(perm.mapping)
    for dest, src in enumerate(perm.mapping):
        inverse[src] = dest
    return PatchPermutation(perm.n, tuple(inverse), perm.seed)


def _check_divisible(height: int, width: int, n: int) -> None:
    if height % n:
        raise DivisibilityError(f"image height {height} is not divisible by n={n}")
    if width % n:
        raise DivisibilityError(f"image width {width} is not divisible by n={n}")


def apply_jigsaw(image: ArrayLike, perm: PatchPermutation) -> ArrayLike:
    """Return the jigsaw view of a single ``(C, H, W)`` image.

    Works on numpy arrays and torch tensors; the output has the input's type,
    dtype and shape.
    """
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")
    was_numpy = isinstance(image, np.ndarray)
    x = torch.from_numpy(np.ascontiguousarray(image)) if was_numpy else image
    out = jigsaw_batch(x.unsqueeze(0), [perm])[0]
    return out.numpy() if was_numpy else out


def jigsaw_batch(images: torch.Tensor, perms: Sequence[PatchPermutation]) -> torch.Tensor:
    """Apply one permutation per image to a ``(B, C, H, W)`` batch.

    A single-element ``perms`` is broadcast over the batch.
    """
    b, c, h, w = images.shape
    if len(perms) == 1 and b != 1:
        perms = list(perms) * b
    if len(perms) != b:
        raise ValueError(f"{len(perms)} permutations for a batch of {b}")
    n = perms[0].n
    if any(p.n != n for p in perms):
        raise GranularityError("all permutations in a batch must share n")
    _check_divisible(h, w, n)
    if n == 1:
        return images.clone()
    ph, pw = h // n, w // n
    cells = (
        images.reshape(b, c, n, ph, n, pw)
        .permute(0, 2, 4, 1, 3, 5)
        .reshape(b, n * n, c, ph, pw)
    )
    index = torch.tensor([p.mapping for p in perms], dtype=torch.long)
    shuffled = cells[torch.arange(b).unsqueeze(1), index]
    return (
        shuffled.reshape(b, n, n, c, ph, pw)
        .permute(0, 3, 1, 4, 2, 5)
        .reshape(b, c, h, w)
    )


def granularity_for_stage(num_stages: int, stage: int) -> int:
    """Patch count per side for supervising ``stage``: ``2 ** (L - l + 1)``."""
    if not 1 <= stage <= num_stages:
        raise StageIndexError(f"stage {stage} outside 1..{num_stages}")
    return 2 ** (num_stages - stage + 1)


@dataclass(frozen=True)
class ScheduleEntry:
    stage: Union[int, str]  # stage index, or "concat"
    n: int


def granularity_schedule(
    num_stages: int, supervised: int, n_schedule: Union[str, Sequence[int]] = "doubling"
) -> list[ScheduleEntry]:
    """Ordered training steps of one iteration: supervised stages, then concat.

    ``n_schedule`` is ``"doubling"`` (the default ``2 ** (L - l + 1)`` rule),
    ``"ones"`` (no jigsaw) or an explicit list of ``supervised + 1`` values.
    """
    if not 1 <= supervised <= num_stages:
        raise StageIndexError(f"S={supervised} must lie in 1..L={num_stages}")
    stages = list(range(num_stages - supervised + 1, num_stages + 1))
    if n_schedule == "doubling":
        ns = [granularity_for_stage(num_stages, l) for l in stages] + [1]
    elif n_schedule == "ones":
        ns = [1] * (supervised + 1)
    else:
        ns = [int(v) for v in n_schedule]
        if len(ns) != supervised + 1:
            raise GranularityError(f"explicit n schedule needs {supervised + 1} values, got {len(ns)}")
        if any(v < 1 for v in ns):
            raise GranularityError(f"n values must be >= 1, got {ns}")
        if ns[-1] != 1:
            raise GranularityError(f"the concat step trains on original images, so its n must be 1, got {ns[-1]}")
    return [ScheduleEntry(l, n) for l, n in zip(stages, ns[:-1])] + [ScheduleEntry("concat", ns[-1])]


def permutation_seed(run_seed: int, epoch: int, batch: int, index: int, step: int) -> np.random.SeedSequence:
    """Seed for one image's permutation, independent of loader scheduling."""
    return np.random.SeedSequence([run_seed, epoch, batch, index, step, 0x5EED])
