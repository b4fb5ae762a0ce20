"""Pretext-task batch construction and losses.

Batch builders work on numpy ``[N, H, W, 3]`` images; losses take torch
tensors so gradients flow back into the networks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import LUMA_WEIGHTS, PatchAugConfig, augment_patches, check_image_batch, patch_grid

Task = Literal["rotation", "exemplar", "relpatch", "jigsaw"]
TASKS: tuple[str, ...] = ("rotation", "exemplar", "relpatch", "jigsaw")

# Row-major cells of a 3x3 grid, skipping the center (cell 4).
NEIGHBOR_CELLS = (0, 1, 2, 3, 5, 6, 7, 8)
CENTER_CELL = 4


@dataclass
class PretextBatch:
    inputs: np.ndarray
    labels: np.ndarray
    task: str
    groups: np.ndarray | None = None
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray

    def __post_init__(self):
        perms = np.asarray(self.perms)
        if len({tuple(p) for p in perms}) != len(perms):
            raise ValueError("permutations must be distinct")
        if not np.array_equal(perms[0], np.arange(perms.shape[1])):
            raise ValueError("the first permutation must be the identity")

    @property
    def count(self) -> int:
        return len(self.perms)

    @property
    def size(self) -> int:
        return self.perms.shape[1]


@dataclass(frozen=True)
class ExemplarAugConfig:
    enabled: bool = True
    translate: float = 0.2
    scale: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.2
    saturation: tuple[float, float] = (0.7, 1.3)
    grayscale_probability: float = 0.66


@dataclass(frozen=True)
class PatchTaskConfig:
    grid: int = 3
    region_fraction: float = 1.0
    aug: PatchAugConfig = PatchAugConfig()


def class_count(task: str, permutation_count: int = 0) -> int:
    if task == "rotation":
        return 4
    if task == "relpatch":
        return len(NEIGHBOR_CELLS)
    if task == "jigsaw":
        return permutation_count
    raise ValueError(f"task {task!r} has no class count")


# ----------------------------------------------------------------------------
# Rotation
# ----------------------------------------------------------------------------


def make_rotation_batch(batch: np.ndarray) -> PretextBatch:
    """Each image in all four orientations (label k = k quarter turns counterclockwise)."""
    check_image_batch(batch)
    if batch.shape[1] != batch.shape[2]:
        raise ValueError(f"rotation requires square images, got {batch.shape[1]}x{batch.shape[2]}")
    rotated = np.stack([np.rot90(batch, k=k, axes=(1, 2)) for k in range(4)], axis=1)
    n = len(batch)
    return PretextBatch(
        inputs=np.ascontiguousarray(rotated.reshape(4 * n, *batch.shape[1:])),
        labels=np.tile(np.arange(4), n),
        task="rotation",
        meta={"source": np.repeat(np.arange(n), 4), "rotation": np.tile(np.arange(4), n)},
    )


def classification_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match {labels.shape[0]} labels")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def rotation_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if logits.shape[-1] != 4:
        raise ValueError("rotation logits must have 4 classes")
    return classification_loss(logits, labels)


# ----------------------------------------------------------------------------
# Exemplar
# ----------------------------------------------------------------------------


def _exemplar_augment(images: np.ndarray, cfg: ExemplarAugConfig, rng: np.random.Generator) -> np.ndarray:
    n, side = len(images), images.shape[1]
    scale = rng.uniform(*cfg.scale, size=n)
    shift = rng.uniform(-cfg.translate, cfg.translate, size=(n, 2)) * 2.0  # normalized coords span 2
    brightness = rng.uniform(-cfg.brightness, cfg.brightness, size=n)
    saturation = rng.uniform(*cfg.saturation, size=n)
    gray = rng.random(n) < cfg.grayscale_probability

    theta = np.zeros((n, 2, 3), dtype=np.float32)
    theta[:, 0, 0] = theta[:, 1, 1] = 1.0 / scale
    theta[:, :, 2] = shift
    x = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    grid = F.affine_grid(torch.from_numpy(theta), [n, 3, side, side], align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out.numpy().transpose(0, 2, 3, 1)

    luma = (out @ LUMA_WEIGHTS)[..., None]
    out = luma + saturation[:, None, None, None].astype(np.float32) * (out - luma)
    out = np.where(gray[:, None, None, None], luma, out)
    out = out + brightness[:, None, None, None].astype(np.float32)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def make_exemplar_batch(
    batch: np.ndarray, copies: int = 8, aug: ExemplarAugConfig = ExemplarAugConfig(), seed: int = 0
) -> PretextBatch:
    check_image_batch(batch)
    if copies < 2:
        raise ValueError("exemplar needs at least 2 copies per image")
    repeated = np.repeat(batch.astype(np.float32), copies, axis=0)
    if aug.enabled:
        repeated = _exemplar_augment(repeated, aug, np.random.default_rng(seed))
    groups = np.repeat(np.arange(len(batch)), copies)
    return PretextBatch(inputs=repeated, labels=groups.copy(), task="exemplar", groups=groups)


def exemplar_triplet_loss(embeddings: torch.Tensor, groups, margin: float = 0.5) -> torch.Tensor:
    """Batch triplet loss with hardest positives and semi-hard negatives.

    For every anchor the farthest same-group embedding is the positive. The
    negative is the nearest one lying inside the semi-hard band
    ``d(a,p) < d(a,n) < d(a,p) + margin``; when the band is empty the nearest
    negative overall is used.
    """
    groups = torch.as_tensor(groups)
    if groups.unique().numel() < 2:
        raise ValueError("triplet loss needs at least two groups in the batch")
    z = F.normalize(embeddings, dim=1)
    sq = (z.unsqueeze(1) - z.unsqueeze(0)).pow(2).sum(-1)
    dist = sq.clamp_min(1e-12).sqrt()

    same = groups.unsqueeze(0) == groups.unsqueeze(1)
    eye = torch.eye(len(groups), dtype=torch.bool)
    positive_mask = same & ~eye
    negative_mask = ~same

    inf = torch.tensor(float("inf"), dtype=dist.dtype)
    d_ap = torch.where(positive_mask, dist, -inf).max(dim=1).values
    has_positive = positive_mask.any(dim=1)
    d_ap = torch.where(has_positive, d_ap, torch.zeros_like(d_ap))

    semi = negative_mask & (dist > d_ap[:, None]) & (dist < d_ap[:, None] + margin)
    d_semi = torch.where(semi, dist, inf).min(dim=1).values
    d_hard = torch.where(negative_mask, dist, inf).min(dim=1).values
    d_an = torch.where(semi.any(dim=1), d_semi, d_hard)

    terms = F.relu(d_ap - d_an + margin)
    return terms[has_positive].mean()


# ----------------------------------------------------------------------------
# Patch tasks
# ----------------------------------------------------------------------------


def make_relpatch_batch(images: np.ndarray, cfg: PatchTaskConfig = PatchTaskConfig(), seed: int = 0) -> PretextBatch:
    """(center, neighbor) patch pairs labelled by the neighbor's position 0..7."""
    check_image_batch(images)
    if cfg.grid != 3:
        raise ValueError("relative patch location uses a 3x3 grid")
    geo = patch_grid(images.shape[1], cfg.grid, cfg.region_fraction)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(NEIGHBOR_CELLS), size=len(images))
    pairs = np.empty((len(images), 2, geo.patch, geo.patch, 3), dtype=np.float32)
    cells = np.array([NEIGHBOR_CELLS[k] for k in labels])
    for i, image in enumerate(images):
        pairs[i] = augment_patches(image, geo, cfg.aug, rng, cells=(CENTER_CELL, cells[i]))
    return PretextBatch(inputs=pairs, labels=labels, task="relpatch", meta={"cell": cells})


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(np.asarray(a) != np.asarray(b), axis=-1)


def select_permutation_subset(count: int, grid: int = 3, seed: int = 0, pool_size: int = 10000) -> PermutationSet:
    """Greedy max-min-Hamming permutation subset, starting from the identity.

    Candidates are every permutation (lexicographic order) when the grid has
    at most 4 cells, otherwise ``pool_size`` distinct random permutations.
    Ties go to the earliest candidate.
    """
    cells = grid * grid
    available = math.factorial(cells)
    if count < 1 or count > available:
        raise ValueError(f"count must lie in [1, {available}] for a {grid}x{grid} grid, got {count}")
    identity = np.arange(cells)
    if cells <= 4:
        pool = np.array([p for p in itertools.permutations(range(cells))][1:])
    else:
        rng = np.random.default_rng(seed)
        seen = {tuple(identity)}
        pool_list = []
        while len(pool_list) < min(pool_size, available - 1):
            p = rng.permutation(cells)
            if tuple(p) not in seen:
                seen.add(tuple(p))
                pool_list.append(p)
        pool = np.array(pool_list)
    if count - 1 > len(pool):
        raise ValueError(f"only {len(pool) + 1} candidate permutations available, {count} requested")

    chosen = [identity]
    taken = np.zeros(len(pool), dtype=bool)
    min_dist = hamming(pool, identity).astype(np.int64)
    for _ in range(count - 1):
        score = np.where(taken, -1, min_dist)
        best = int(np.argmax(score))
        taken[best] = True
        chosen.append(pool[best])
        min_dist = np.minimum(min_dist, hamming(pool, pool[best]))
    return PermutationSet(np.array(chosen))


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    return inverse


def make_jigsaw_batch(
    images: np.ndarray, perm_set: PermutationSet, cfg: PatchTaskConfig = PatchTaskConfig(), seed: int = 0
) -> PretextBatch:
    """Patch stacks shuffled by a uniformly drawn permutation; slot i holds cell perm[i]."""
    check_image_batch(images)
    if perm_set.count < 1:
        raise ValueError("empty permutation set")
    geo = patch_grid(images.shape[1], cfg.grid, cfg.region_fraction)
    if perm_set.size != cfg.grid**2:
        raise ValueError(f"permutations over {perm_set.size} cells do not fit a {cfg.grid}x{cfg.grid} grid")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, perm_set.count, size=len(images))
    stacks = np.empty((len(images), perm_set.size, geo.patch, geo.patch, 3), dtype=np.float32)
    for i, image in enumerate(images):
        patches = augment_patches(image, geo, cfg.aug, rng)
        stacks[i] = patches[perm_set.perms[labels[i]]]
    return PretextBatch(inputs=stacks, labels=labels, task="jigsaw", meta={"perm": perm_set.perms[labels]})
