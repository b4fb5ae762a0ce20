"""Frozen-representation extraction, linear probes and shape-bias scoring."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import checkpoint as ckpt
from .dataio import (
    SHAPE_NAMES,
    DataError,
    LabeledDataset,
    decode_png,
    extract_patch_grid,
    render_shape,
)

Mode = Literal["concat_lensed", "duplicate", "plain"]
MODES = ("concat_lensed", "duplicate", "plain")


class EvalError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) == 0:
            raise EvalError(f"features must be a non-empty [N, D] array, got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise EvalError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise EvalError("features contain NaN or inf")

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def save_feature_matrix(fm: FeatureMatrix, path) -> None:
    """Container with the features plus a sidecar ``<path>.labels.csv``."""
    path = Path(path)
    ckpt.save_container(path, {"features": fm.features.astype(np.float32)}, {"kind": "features", **fm.provenance})
    rows = "".join(f"{i},{int(y)}\n" for i, y in enumerate(fm.labels))
    ckpt.atomic_write_text(path.with_suffix(path.suffix + ".labels.csv"), rows)


def load_feature_matrix(path) -> FeatureMatrix:
    path = Path(path)
    arrays, meta = ckpt.load_container(path)
    with open(path.with_suffix(path.suffix + ".labels.csv"), newline="") as fh:
        labels = np.array([int(row[1]) for row in csv.reader(fh)], dtype=np.int64)
    meta.pop("kind", None)
    return FeatureMatrix(arrays["features"], labels, meta)


# ----------------------------------------------------------------------------
# Representations
# ----------------------------------------------------------------------------


def _patch_stack(images: np.ndarray, grid: int, region_fraction: float) -> np.ndarray:
    return np.stack([np.stack(extract_patch_grid(img, grid, region_fraction)) for img in images])


@torch.no_grad()
def _represent(extractor, lens, images: np.ndarray, patches: tuple[int, float] | None) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    if patches is None:
        if lens is not None:
            x = lens(x)
        return extractor(x).numpy()
    stack = torch.from_numpy(_patch_stack(images, *patches))
    m, p = stack.shape[:2]
    flat = stack.reshape(m * p, *stack.shape[2:])
    if lens is not None:
        flat = lens(flat)
    return extractor(flat).reshape(m, p, -1).mean(dim=1).numpy()


def extract_representations(
    extractor,
    lens,
    dataset: LabeledDataset,
    mode: Mode,
    batch_size: int = 256,
    patches: tuple[int, float] | None = None,
    provenance: dict | None = None,
) -> FeatureMatrix:
    """Pre-logits features of ``dataset`` in one of three layouts.

    ``concat_lensed`` gives ``[F(L(x)); F(x)]``, ``duplicate`` gives
    ``[F(x); F(x)]`` and ``plain`` gives ``F(x)``. With ``patches=(grid,
    region_fraction)`` each representation is the mean over the patch grid.
    """
    if mode not in MODES:
        raise EvalError(f"unknown representation mode {mode!r}")
    if mode == "concat_lensed" and lens is None:
        raise EvalError("concat_lensed mode needs a lens")
    was_training = [m.training for m in (extractor, lens) if m is not None]
    for m in (extractor, lens):
        if m is not None:
            m.eval()
    try:
        chunks = []
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            raw = _represent(extractor, None, images, patches)
            if mode == "plain":
                chunks.append(raw)
            elif mode == "duplicate":
                chunks.append(np.concatenate([raw, raw], axis=1))
            else:
                chunks.append(np.concatenate([_represent(extractor, lens, images, patches), raw], axis=1))
    finally:
        for m, flag in zip([m for m in (extractor, lens) if m is not None], was_training):
            m.train(flag)
    meta = {"mode": mode, "lens": mode == "concat_lensed", **(provenance or {})}
    return FeatureMatrix(np.concatenate(chunks).astype(np.float32), dataset.labels.astype(np.int64), meta)


def patch_average_representation(extractor, image: np.ndarray, grid: int = 3, region_fraction: float = 1.0) -> np.ndarray:
    """Mean pre-logits vector over the non-augmented patches of one image."""
    return _represent(extractor, None, image[None], (grid, region_fraction))[0]


# ----------------------------------------------------------------------------
# Linear probe
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    batch_size: int = 256
    lr: float = 0.8
    epochs: int = 30
    momentum: float = 0.9
    center: bool = True
    decay_fractions: tuple[float, ...] = (2 / 3, 5 / 6)
    seed: int = 0


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    train_loss: float
    train_accuracy: float

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.dim:
            raise EvalError(f"probe expects {self.dim}-dim features, got {features.shape[1]}")
        return np.argmax(self.logits(features), axis=1)


@dataclass
class ProbeResult:
    top1: float
    per_class_accuracy: np.ndarray
    probe: LinearProbe

    def to_dict(self) -> dict:
        return {
            "top1": self.top1,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "probe_train_loss": self.probe.train_loss,
            "probe_train_accuracy": self.probe.train_accuracy,
        }


def probe_lr(epoch: int, cfg: ProbeConfig) -> float:
    drops = sum(epoch >= int(round(f * cfg.epochs)) for f in cfg.decay_fractions)
    return cfg.lr * 0.1**drops


def train_linear_probe(train: FeatureMatrix, cfg: ProbeConfig = ProbeConfig(), class_count: int | None = None) -> LinearProbe:
    """Multinomial logistic regression by minibatch SGD on unnormalized features.

    With ``cfg.center`` the optimizer works on mean-centered features and the
    mean is folded back into the bias afterwards. The resulting classifier is
    an affine map of the raw features like any other; centering only removes
    the large common-mode curvature direction that makes SGD at this learning
    rate stall or diverge.
    """
    labels = train.labels.astype(np.int64)
    if np.unique(labels).size < 2:
        raise EvalError("the probe needs at least two classes")
    k = int(class_count or labels.max() + 1)
    raw = train.features.astype(np.float64)
    shift = raw.mean(axis=0) if cfg.center else np.zeros(train.dim)
    x = torch.from_numpy((raw - shift).astype(np.float32))
    y = torch.from_numpy(labels)
    weight = torch.zeros(k, train.dim, requires_grad=True)
    bias = torch.zeros(k, requires_grad=True)
    opt = torch.optim.SGD([weight, bias], lr=cfg.lr, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = probe_lr(epoch, cfg)
        order = torch.from_numpy(rng.permutation(len(x)))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = F.cross_entropy(x[idx] @ weight.T + bias, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if not torch.isfinite(loss):
            raise EvalError(f"probe training diverged in epoch {epoch}")
    w = weight.detach().numpy().astype(np.float64)
    b = bias.detach().numpy().astype(np.float64) - w @ shift
    logits = torch.from_numpy(raw @ w.T + b)
    final_loss = float(F.cross_entropy(logits, y))
    acc = float((logits.argmax(1) == y).double().mean())
    return LinearProbe(w, b, final_loss, acc)


def accuracy_report(predictions: np.ndarray, labels: np.ndarray, class_count: int) -> tuple[float, np.ndarray]:
    correct = predictions == labels
    per_class = np.full(class_count, np.nan)
    for c in range(class_count):
        mask = labels == c
        if mask.any():
            per_class[c] = correct[mask].mean()
    return float(correct.mean()), per_class


def evaluate_probe(probe: LinearProbe, test: FeatureMatrix) -> ProbeResult:
    if test.dim != probe.dim:
        raise EvalError(f"probe expects {probe.dim}-dim features, test matrix has {test.dim}")
    top1, per_class = accuracy_report(probe.predict(test.features), test.labels, probe.weight.shape[0])
    return ProbeResult(top1, per_class, probe)


# ----------------------------------------------------------------------------
# Shape bias on cue-conflict images
# ----------------------------------------------------------------------------


@dataclass
class CueConflictSet:
    images: np.ndarray
    shape_labels: np.ndarray
    texture_labels: np.ndarray
    names: list[str]

    def __post_init__(self):
        if np.any(self.shape_labels == self.texture_labels):
            raise DataError("cue-conflict images need different shape and texture labels")

    def __len__(self) -> int:
        return len(self.images)

    def swapped(self) -> "CueConflictSet":
        return CueConflictSet(self.images, self.texture_labels, self.shape_labels, self.names)


@dataclass(frozen=True)
class ShapeBias:
    score: float | None
    shape_decisions: int
    texture_decisions: int
    excluded: int

    @property
    def undetermined(self) -> bool:
        return self.score is None

    def to_dict(self) -> dict:
        return {
            "shape_bias": "undetermined" if self.score is None else self.score,
            "shape_decisions": self.shape_decisions,
            "texture_decisions": self.texture_decisions,
            "excluded": self.excluded,
        }


def shape_bias_from_predictions(predictions, shape_labels, texture_labels) -> ShapeBias:
    """Fraction of shape-consistent decisions among predictions matching either cue."""
    predictions = np.asarray(predictions)
    shape_hits = int(np.sum(predictions == np.asarray(shape_labels)))
    texture_hits = int(np.sum(predictions == np.asarray(texture_labels)))
    decided = shape_hits + texture_hits
    score = shape_hits / decided if decided else None
    return ShapeBias(score, shape_hits, texture_hits, len(predictions) - decided)


def shape_bias_score(
    classify: Callable[[np.ndarray], np.ndarray], cueconflict: CueConflictSet
) -> ShapeBias:
    """``classify`` maps an image batch to class predictions."""
    return shape_bias_from_predictions(classify(cueconflict.images), cueconflict.shape_labels, cueconflict.texture_labels)


def load_cueconflict(folder, labels_file, size: int | None = None) -> CueConflictSet:
    """Images listed in a header-less ``filename,shape_label,texture_label`` CSV."""
    folder, labels_file = Path(folder), Path(labels_file)
    rows = []
    with open(labels_file, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{labels_file}:{lineno}: expected filename,shape_label,texture_label")
            try:
                rows.append((row[0], int(row[1]), int(row[2])))
            except ValueError as exc:
                raise DataError(f"{labels_file}:{lineno}: labels must be integers") from exc
    if not rows:
        raise DataError(f"{labels_file} lists no images")
    rows.sort()
    images = []
    for name, _, _ in rows:
        path = folder / name
        if not path.is_file():
            raise DataError(f"cue-conflict image missing: {path}")
        images.append(decode_png(path, size))
    return CueConflictSet(
        np.stack(images),
        np.array([r[1] for r in rows], dtype=np.int64),
        np.array([r[2] for r in rows], dtype=np.int64),
        [r[0] for r in rows],
    )


def class_texture(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class stripe texture: orientation, frequency and palette depend on ``label``."""
    angle = np.pi * (label % 5) / 5
    period = 3 + (label // 5) * 3
    hue = np.array([(37 * label) % 256, (91 * label + 60) % 256, (151 * label + 120) % 256], dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)
    return wave[..., None] * hue + (1 - wave[..., None]) * (255 - hue)


def make_cueconflict_standin(out_dir, count: int = 20, seed: int = 0, size: int = 32) -> tuple[Path, Path]:
    """Write shape silhouettes filled with a different class's texture plus the label CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = len(SHAPE_NAMES)
    rows = []
    for i in range(count):
        shape = i % classes
        texture = (shape + 1 + int(rng.integers(0, classes - 1))) % classes
        bg = np.full((size, size, 3), rng.integers(100, 156), dtype=np.float32)
        fill = class_texture(texture, size, rng)
        img = render_shape(SHAPE_NAMES[shape], size, (0, 0, 0), bg, 0.8, (0.0, 0.0), fill_texture=fill)
        name = f"cue_{i:03d}.png"
        Image.fromarray(img).save(out_dir / name)
        rows.append(f"{name},{shape},{texture}\n")
    labels = out_dir / "labels.csv"
    ckpt.atomic_write_text(labels, "".join(rows))
    return out_dir, labels


def probe_classifier(extractor, probe: LinearProbe, mode: Mode, lens=None, patches=None) -> Callable[[np.ndarray], np.ndarray]:
    def classify(images: np.ndarray) -> np.ndarray:
        data = LabeledDataset(images, np.zeros(len(images), dtype=np.int64), probe.weight.shape[0])
        return probe.predict(extract_representations(extractor, lens, data, mode, patches=patches).features)

    return classify

