"""Dataset ingestion, deterministic preprocessing, patches and synthetic shortcuts.

Images are float32 arrays laid out ``[N, H, W, 3]`` with values in [-1, 1].
Every function here is pure: outputs depend only on the inputs, the config
and (where randomness is involved) an explicit seed.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

# 7x5 arrow pointing up in canonical orientation: head rows 0-2, shaft rows 3-6.
ARROW_BITMAP = np.array(
    [
        [0, 0, 1, 0, 0],
        [0, 1, 1, 1, 0],
        [1, 1, 1, 1, 1],
        [0, 1, 1, 1, 0],
        [0, 1, 1, 1, 0],
        [0, 1, 1, 1, 0],
        [0, 1, 1, 1, 0],
    ],
    dtype=bool,
)


class DataError(Exception):
    """Raised when a dataset on disk is missing, truncated or malformed."""


class ConfigError(ValueError):
    """Raised for geometrically impossible preprocessing/shortcut settings."""


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    names: list[str] | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        check_image_batch(self.images)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        names = None if self.names is None else [self.names[i] for i in np.asarray(index)]
        return LabeledDataset(self.images[index], self.labels[index], self.class_count, names)


@dataclass(frozen=True)
class ShortcutConfig:
    kind: Literal["arrow", "chromatic", "none"] = "none"
    arrow_offset: tuple[int, int] = (2, 2)
    arrow_size: int = 7
    channel_shift: int = 2
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.kind not in ("arrow", "chromatic", "none"):
            raise ConfigError(f"unknown shortcut kind {self.kind!r}")
        if self.channel_shift < 0:
            raise ConfigError("channel_shift must be >= 0")
        if self.arrow_size < ARROW_BITMAP.shape[0] or self.arrow_size % ARROW_BITMAP.shape[0]:
            raise ConfigError(f"arrow_size must be a positive multiple of {ARROW_BITMAP.shape[0]}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError("apply_probability must lie in [0, 1]")

    def glyph(self) -> np.ndarray:
        scale = self.arrow_size // ARROW_BITMAP.shape[0]
        return np.kron(ARROW_BITMAP, np.ones((scale, scale), dtype=bool)).astype(bool)


@dataclass(frozen=True)
class PreprocessConfig:
    resize: int | None = None
    crop: int | None = None
    crop_mode: Literal["central", "random"] = "central"
    seed: int = 0


@dataclass(frozen=True)
class PatchAugConfig:
    grayscale: bool = False
    grayscale_probability: float = 0.66
    jitter: int = 0
    standardize: bool = False


def check_image_batch(batch: np.ndarray) -> None:
    if batch.ndim != 4 or batch.shape[-1] != 3:
        raise ValueError(f"expected an [N, H, W, 3] image batch, got shape {batch.shape}")


def scale_bytes(raw: np.ndarray) -> np.ndarray:
    """Map uint8 intensities to [-1, 1] via v / 127.5 - 1."""
    return raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`scale_bytes`, clamping to the valid range."""
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------------
# CIFAR-10
# ----------------------------------------------------------------------------


def _cifar_dir(path: Path) -> Path:
    nested = path / "cifar-10-batches-bin"
    return nested if nested.is_dir() else path


def read_cifar10_file(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"CIFAR-10 file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    whole = len(raw) // CIFAR_RECORD_BYTES
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise DataError(
            f"CIFAR-10 file {path} is truncated: incomplete record at byte offset "
            f"{whole * CIFAR_RECORD_BYTES} (file size {len(raw)})"
        )
    records = raw.reshape(whole, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise DataError(
            f"CIFAR-10 file {path}: label byte {labels[bad[0]]} out of range at byte offset "
            f"{bad[0] * CIFAR_RECORD_BYTES}"
        )
    # channel-major planes -> NHWC
    pixels = records[:, 1:].reshape(whole, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return pixels, labels


def load_cifar10(path: str | os.PathLike, split: Literal["train", "test"]) -> LabeledDataset:
    """Load the CIFAR-10 binary release from ``path``.

    ``path`` may point at the ``cifar-10-batches-bin`` directory itself or at
    its parent.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = _cifar_dir(Path(path))
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    chunks = [read_cifar10_file(root / name) for name in files]
    pixels = np.concatenate([c[0] for c in chunks])
    labels = np.concatenate([c[1] for c in chunks])
    return LabeledDataset(scale_bytes(pixels), labels, 10)


def write_cifar10_file(path: str | os.PathLike, images_uint8: np.ndarray, labels: Sequence[int]) -> None:
    """Write NHWC uint8 images in the CIFAR-10 binary record layout."""
    images_uint8 = np.asarray(images_uint8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    planes = images_uint8.transpose(0, 3, 1, 2).reshape(len(images_uint8), -1)
    Path(path).write_bytes(np.concatenate([labels, planes], axis=1).tobytes())


def cifar10_available(path: str | os.PathLike | None) -> bool:
    if not path:
        return False
    root = _cifar_dir(Path(path))
    return all((root / f).is_file() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES)


# ----------------------------------------------------------------------------
# Image folders
# ----------------------------------------------------------------------------


def _read_label_csv(labels_file: Path) -> list[list[str]]:
    with open(labels_file, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and row[0].strip()]
    if rows and not _is_int(rows[0][1] if len(rows[0]) > 1 else ""):
        rows = rows[1:]  # tolerate a header row
    return rows


def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def decode_png(path: Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return scale_bytes(np.asarray(img, dtype=np.uint8))


def load_image_folder(
    path: str | os.PathLike,
    labels_file: str | os.PathLike | None = None,
    size: int | None = None,
    on_error: Literal["fail", "skip"] = "fail",
    class_count: int | None = None,
) -> LabeledDataset:
    """Load PNGs listed in a header-less ``filename,label`` CSV.

    Images are ordered lexicographically by filename. Without ``size`` all
    images must share one shape.
    """
    root = Path(path)
    labels_path = Path(labels_file) if labels_file is not None else root / "labels.csv"
    rows = sorted(_read_label_csv(labels_path), key=lambda r: r[0])
    images, labels, names = [], [], []
    for row in rows:
        name, label = row[0].strip(), int(row[1])
        file = root / name
        if not file.is_file():
            raise DataError(f"label file {labels_path} references missing image {name!r}")
        try:
            images.append(decode_png(file, size))
        except OSError as exc:
            if on_error == "fail":
                raise DataError(f"could not decode image {name!r}: {exc}") from exc
            log.warning("skipping undecodable image %s: %s", name, exc)
            continue
        labels.append(label)
        names.append(name)
    if not images:
        raise DataError(f"no images loaded from {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"images in {root} have differing shapes {sorted(shapes)}; set a resize size")
    count = class_count if class_count is not None else max(labels) + 1
    return LabeledDataset(np.stack(images), np.array(labels), count, names)


# ----------------------------------------------------------------------------
# Preprocessing
# ----------------------------------------------------------------------------


def resize_batch(batch: np.ndarray, size: int) -> np.ndarray:
    if batch.shape[1] == size and batch.shape[2] == size:
        return batch
    t = torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2)))
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out.numpy().transpose(0, 2, 3, 1)


def preprocess(batch: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    check_image_batch(batch)
    out = batch.astype(np.float32, copy=False)
    if cfg.resize is not None:
        out = resize_batch(out, cfg.resize)
    crop = cfg.crop if cfg.crop is not None else out.shape[1]
    height, width = out.shape[1:3]
    if crop > height or crop > width:
        raise ConfigError(f"crop {crop} larger than resized image {height}x{width}")
    if cfg.crop_mode == "central":
        top, left = (height - crop) // 2, (width - crop) // 2
        out = out[:, top : top + crop, left : left + crop]
    elif cfg.crop_mode == "random":
        rng = np.random.default_rng(cfg.seed)
        tops = rng.integers(0, height - crop + 1, size=len(out))
        lefts = rng.integers(0, width - crop + 1, size=len(out))
        out = np.stack([im[t : t + crop, l : l + crop] for im, t, l in zip(out, tops, lefts)])
    else:
        raise ConfigError(f"unknown crop mode {cfg.crop_mode!r}")
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------------------
# Synthetic shortcuts
# ----------------------------------------------------------------------------


def _apply_mask(n: int, probability: float, seed: int) -> np.ndarray:
    if probability >= 1.0:
        return np.ones(n, dtype=bool)
    return np.random.default_rng(seed).random(n) < probability


def arrow_mask(shape: tuple[int, int], cfg: ShortcutConfig, rotation: int = 0) -> np.ndarray:
    """Boolean [H, W] mask of glyph pixels, optionally after ``rotation`` quarter turns."""
    height, width = shape
    glyph = cfg.glyph()
    row, col = cfg.arrow_offset
    if row < 0 or col < 0 or row + glyph.shape[0] > height or col + glyph.shape[1] > width:
        raise ConfigError(
            f"arrow glyph {glyph.shape} at offset {cfg.arrow_offset} does not fit a {height}x{width} image"
        )
    mask = np.zeros((height, width), dtype=bool)
    mask[row : row + glyph.shape[0], col : col + glyph.shape[1]] = glyph
    return np.rot90(mask, k=rotation)


def inject_arrow(
    batch: np.ndarray,
    cfg: ShortcutConfig,
    rotation_label: Sequence[int] | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Stamp the arrow glyph (value +1 on all channels).

    Without ``rotation_label`` the glyph is stamped in canonical orientation,
    which is how the training pipeline uses it (before the pretext rotation).
    With labels, ``batch`` is taken to be already rotated by ``k`` quarter
    turns and the glyph lands exactly where a pre-rotation stamp would have
    ended up, so ``inject_arrow(rot(x, k), cfg, [k]) == rot(inject_arrow(x, cfg), k)``.
    """
    check_image_batch(batch)
    if cfg.kind != "arrow":
        raise ConfigError(f"inject_arrow needs kind='arrow', got {cfg.kind!r}")
    height, width = batch.shape[1:3]
    if rotation_label is None:
        rotation_label = np.zeros(len(batch), dtype=np.int64)
    rotation_label = np.asarray(rotation_label, dtype=np.int64)
    if rotation_label.shape != (len(batch),) or np.any((rotation_label < 0) | (rotation_label > 3)):
        raise ValueError("rotation labels must be one value in {0,1,2,3} per image")
    if np.any(rotation_label % 2) and height != width:
        raise ValueError("quarter-turn glyph placement requires square images")
    masks = [arrow_mask((height, width), cfg, k) for k in range(4)]
    apply = _apply_mask(len(batch), cfg.apply_probability, seed)
    out = batch.astype(np.float32, copy=True)
    for i in np.flatnonzero(apply):
        out[i][masks[rotation_label[i]]] = 1.0
    return out


def inject_chromatic(batch: np.ndarray, cfg: ShortcutConfig, seed: int = 0) -> np.ndarray:
    """Shift red by +d and blue by -d columns, replicating edge pixels."""
    check_image_batch(batch)
    if cfg.kind != "chromatic":
        raise ConfigError(f"inject_chromatic needs kind='chromatic', got {cfg.kind!r}")
    width = batch.shape[2]
    d = cfg.channel_shift
    if d >= width:
        raise ConfigError(f"channel_shift {d} must be smaller than the image width {width}")
    out = batch.astype(np.float32, copy=True)
    if d == 0:
        return out
    cols = np.arange(width)
    red_src = np.clip(cols - d, 0, width - 1)
    blue_src = np.clip(cols + d, 0, width - 1)
    apply = _apply_mask(len(batch), cfg.apply_probability, seed)
    out[apply, :, :, 0] = batch[apply][:, :, red_src, 0]
    out[apply, :, :, 2] = batch[apply][:, :, blue_src, 2]
    return out


def inject_shortcut(batch: np.ndarray, cfg: ShortcutConfig, seed: int = 0) -> np.ndarray:
    if cfg.kind == "arrow":
        return inject_arrow(batch, cfg, seed=seed)
    if cfg.kind == "chromatic":
        return inject_chromatic(batch, cfg, seed=seed)
    return batch


# ----------------------------------------------------------------------------
# Patches
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchGrid:
    """Geometry of a centered ``grid x grid`` patch layout."""

    side: int
    grid: int
    region: int
    patch: int
    origin: int
    coords: tuple[tuple[int, int], ...] = field(repr=False)


def patch_grid(side: int, grid: int = 3, region_fraction: float = 1.0) -> PatchGrid:
    if grid < 1:
        raise ConfigError("grid must be >= 1")
    region = int(round(region_fraction * side))
    if region < grid or region > side or region % grid:
        raise ConfigError(f"central region {region} of a {side}-pixel image cannot be split into {grid}x{grid} patches")
    patch = region // grid
    origin = (side - region) // 2
    coords = tuple((origin + r * patch, origin + c * patch) for r in range(grid) for c in range(grid))
    return PatchGrid(side, grid, region, patch, origin, coords)


def extract_patch_grid(image: np.ndarray, grid: int = 3, region_fraction: float = 1.0) -> list[np.ndarray]:
    """Patches of the centered region, row-major from the top-left."""
    if image.ndim != 3 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square [H, W, C] image, got {image.shape}")
    geo = patch_grid(image.shape[0], grid, region_fraction)
    return [image[r : r + geo.patch, c : c + geo.patch] for r, c in geo.coords]


def grayscale(pixels: np.ndarray) -> np.ndarray:
    luma = pixels @ LUMA_WEIGHTS
    return np.repeat(luma[..., None], 3, axis=-1).astype(np.float32)


def standardize(patch: np.ndarray) -> np.ndarray:
    p = patch.astype(np.float64)
    mean = p.mean(axis=(0, 1), keepdims=True)
    centered = p - mean
    # a constant channel can leave rounding residue in the mean; snap it to zero
    centered[np.abs(centered) <= 1e-7 * np.maximum(np.abs(mean), 1.0)] = 0.0
    std = np.maximum(centered.std(axis=(0, 1), keepdims=True), 1e-6)
    return (centered / std).astype(np.float32)


def augment_patches(
    image: np.ndarray,
    geo: PatchGrid,
    cfg: PatchAugConfig,
    seed: int | np.random.Generator,
    cells: Sequence[int] | None = None,
) -> np.ndarray:
    """Crop grid cells from ``image`` with optional jitter, grayscale and standardization.

    Returns ``[len(cells), patch, patch, 3]``. Jitter offsets that would leave
    the image are clamped; the grayscale coin is flipped once per image.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cells = range(len(geo.coords)) if cells is None else cells
    side, size = geo.side, geo.patch
    out = np.empty((len(cells), size, size, 3), dtype=np.float32)
    for i, cell in enumerate(cells):
        r, c = geo.coords[cell]
        if cfg.jitter:
            dr, dc = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
            r = int(np.clip(r + dr, 0, side - size))
            c = int(np.clip(c + dc, 0, side - size))
        out[i] = image[r : r + size, c : c + size]
    if cfg.grayscale and rng.random() < cfg.grayscale_probability:
        out = grayscale(out)
    if cfg.standardize:
        out = np.stack([standardize(p) for p in out])
    return out


# ----------------------------------------------------------------------------
# Procedural stand-in dataset
# ----------------------------------------------------------------------------

# Ten upright silhouettes in unit coordinates (x right, y down). None of them is
# invariant under a quarter turn, so orientation is learnable from shape alone.
SHAPE_POLYGONS: dict[str, list[tuple[float, float]]] = {
    "ell": [(0.2, 0.1), (0.4, 0.1), (0.4, 0.7), (0.8, 0.7), (0.8, 0.9), (0.2, 0.9)],
    "tee": [(0.1, 0.1), (0.9, 0.1), (0.9, 0.3), (0.6, 0.3), (0.6, 0.9), (0.4, 0.9), (0.4, 0.3), (0.1, 0.3)],
    "triangle": [(0.5, 0.1), (0.9, 0.9), (0.1, 0.9)],
    "house": [(0.5, 0.05), (0.9, 0.4), (0.8, 0.4), (0.8, 0.95), (0.2, 0.95), (0.2, 0.4), (0.1, 0.4)],
    "flag": [(0.2, 0.05), (0.3, 0.05), (0.3, 0.1), (0.9, 0.25), (0.3, 0.45), (0.3, 0.95), (0.2, 0.95)],
    "cup": [(0.1, 0.1), (0.3, 0.1), (0.3, 0.7), (0.7, 0.7), (0.7, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9)],
    "step": [(0.1, 0.9), (0.1, 0.6), (0.4, 0.6), (0.4, 0.35), (0.65, 0.35), (0.65, 0.1), (0.9, 0.1), (0.9, 0.9)],
    "kite": [(0.5, 0.05), (0.75, 0.35), (0.5, 0.95), (0.25, 0.35)],
    "bolt": [(0.55, 0.05), (0.2, 0.55), (0.45, 0.55), (0.35, 0.95), (0.8, 0.4), (0.55, 0.4), (0.7, 0.05)],
    "mushroom": [(0.1, 0.45), (0.2, 0.2), (0.5, 0.08), (0.8, 0.2), (0.9, 0.45), (0.6, 0.45), (0.6, 0.92), (0.4, 0.92), (0.4, 0.45)],
}
SHAPE_NAMES = tuple(SHAPE_POLYGONS)


def render_shape(
    name: str,
    size: int,
    fg: Sequence[int],
    bg: np.ndarray,
    scale: float,
    offset: tuple[float, float],
    supersample: int = 4,
    fill_texture: np.ndarray | None = None,
) -> np.ndarray:
    """Render one silhouette onto a uint8 ``[size, size, 3]`` background."""
    big = size * supersample
    mask_img = Image.new("L", (big, big), 0)
    cx, cy = 0.5 + offset[0], 0.5 + offset[1]
    pts = [((cx + (x - 0.5) * scale) * big, (cy + (y - 0.5) * scale) * big) for x, y in SHAPE_POLYGONS[name]]
    ImageDraw.Draw(mask_img).polygon(pts, fill=255)
    alpha = np.asarray(mask_img.resize((size, size), Image.BOX), dtype=np.float32)[..., None] / 255.0
    fill = np.broadcast_to(np.asarray(fg, dtype=np.float32), (size, size, 3)) if fill_texture is None else fill_texture
    out = alpha * fill + (1.0 - alpha) * bg.astype(np.float32)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def make_synthetic_shapes(count: int, seed: int, size: int = 32) -> LabeledDataset:
    """Ten-class dataset of upright silhouettes on isotropic noisy backgrounds.

    A deterministic stand-in for CIFAR-10 when the real data is unavailable.
    Classes are balanced; colors, scale and position vary per image.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % len(SHAPE_NAMES)
    rng.shuffle(labels)
    images = np.empty((count, size, size, 3), dtype=np.uint8)
    for i, label in enumerate(labels):
        base = rng.integers(0, 256, size=3)
        coarse = rng.normal(0, 25, size=(size // 4, size // 4, 3))
        noise = np.kron(coarse, np.ones((4, 4, 1))) + rng.normal(0, 8, size=(size, size, 3))
        bg = np.clip(base + noise, 0, 255)
        fg = rng.integers(0, 256, size=3)
        while np.abs(fg.astype(int) - base).sum() < 180:
            fg = rng.integers(0, 256, size=3)
        scale = rng.uniform(0.6, 0.85)
        slack = (1.0 - scale) / 2
        offset = tuple(rng.uniform(-slack, slack, size=2))
        images[i] = render_shape(SHAPE_NAMES[label], size, fg, bg, scale, offset)
    return LabeledDataset(scale_bytes(images), labels, len(SHAPE_NAMES))
