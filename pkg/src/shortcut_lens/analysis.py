"""Statistics and figures over what the lens changes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class Undefined:
    """Stands in for a statistic that has no value (e.g. correlation of a constant)."""

    reason: str

    def __bool__(self) -> bool:
        return False

    def __str__(self) -> str:
        return "undefined"


@dataclass
class ReconStats:
    per_image: np.ndarray
    mean_map: np.ndarray
    clip_percentile: float
    ids: np.ndarray | None = None

    @property
    def clip_value(self) -> float:
        return percentile(self.mean_map.ravel(), self.clip_percentile)

    def display_map(self) -> np.ndarray:
        return clip_at_percentile(self.mean_map, self.clip_percentile)


def lens_difference(x: np.ndarray, lx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(lx - x, per-image mean of the squared difference)`` for ``[N, H, W, C]`` batches."""
    x, lx = np.asarray(x), np.asarray(lx)
    if x.shape != lx.shape:
        raise AnalysisError(f"shape mismatch {x.shape} vs {lx.shape}")
    diff = lx.astype(np.float64) - x.astype(np.float64)
    return diff, (diff**2).reshape(len(diff), -1).mean(axis=1)


def percentile(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics at rank ``q/100 * (n-1)``."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise AnalysisError("percentile of an empty array")
    if not 0 <= q <= 100:
        raise AnalysisError("percentile must lie in [0, 100]")
    rank = q / 100 * (v.size - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (rank - lo) * (v[hi] - v[lo]))


def clip_at_percentile(values: np.ndarray, q: float) -> np.ndarray:
    return np.minimum(values, percentile(values, q))


@torch.no_grad()
def apply_lens(lens, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = lens.training
    lens.eval()
    try:
        out = [lens(torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size], dtype=np.float32))).numpy() for i in range(0, len(images), batch_size)]
    finally:
        lens.train(was_training)
    return np.concatenate(out)


def sample_ids(n: int, sample_count: int, seed: int) -> np.ndarray:
    if not 0 < sample_count <= n:
        raise AnalysisError(f"sample_count must lie in [1, {n}], got {sample_count}")
    return np.random.default_rng(seed).permutation(n)[:sample_count]


def recon_stats(x: np.ndarray, lx: np.ndarray, clip_percentile: float = 95, ids=None) -> ReconStats:
    diff, per_image = lens_difference(x, lx)
    mean_map = (diff**2).mean(axis=3).mean(axis=0)
    return ReconStats(per_image, mean_map, clip_percentile, None if ids is None else np.asarray(ids))


def mean_recon_map(lens, images: np.ndarray, sample_count: int, clip_percentile: float = 95, seed: int = 0) -> ReconStats:
    """Reconstruction statistics over a seeded random subset of ``images``."""
    ids = sample_ids(len(images), sample_count, seed)
    x = images[ids]
    return recon_stats(x, apply_lens(lens, x), clip_percentile, ids)


def recon_correlation(a, b) -> float | Undefined:
    """Pearson correlation; ``Undefined`` when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalysisError("inputs must be 1-D arrays of equal length")
    if len(a) < 3:
        raise AnalysisError("correlation needs at least 3 values")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        return Undefined("constant input")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def rank_by_recon_difference(stats_a: ReconStats, stats_b: ReconStats, ids: Sequence | None = None) -> list:
    """Ids ordered by ``a - b`` descending, ties by id ascending."""
    a, b = np.asarray(stats_a.per_image), np.asarray(stats_b.per_image)
    if a.shape != b.shape:
        raise AnalysisError(f"per-image arrays differ in length ({len(a)} vs {len(b)})")
    ids = list(range(len(a))) if ids is None else list(ids)
    if len(ids) != len(a):
        raise AnalysisError("ids do not match the per-image arrays")
    delta = a - b
    return [ids[i] for i in sorted(range(len(a)), key=lambda i: (-delta[i], ids[i]))]


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------

SEPARATOR = 2
SEPARATOR_VALUE = 255


def to_display(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> uint8, clamping out-of-range values."""
    return np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def diff_display(diff: np.ndarray, gain: float = 5.0) -> np.ndarray:
    """Amplified difference centered at gray 128."""
    return np.clip(np.rint(128.0 + np.asarray(diff) * gain * 127.5), 0, 255).astype(np.uint8)


def panel_array(rows: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], gain: float = 5.0) -> np.ndarray:
    """Grid with columns [input | lensed | diff] and 2-px separators between cells."""
    if not rows:
        raise AnalysisError("panel needs at least one row")
    h, w = rows[0][0].shape[:2]
    for row in rows:
        if any(img.shape[:2] != (h, w) for img in row):
            raise AnalysisError("all panel images must have the same size")
    out = np.full((len(rows) * h + (len(rows) - 1) * SEPARATOR, 3 * w + 2 * SEPARATOR, 3), SEPARATOR_VALUE, np.uint8)
    for r, (x, lx, diff) in enumerate(rows):
        top = r * (h + SEPARATOR)
        for c, cell in enumerate((to_display(x), to_display(lx), diff_display(diff, gain))):
            left = c * (w + SEPARATOR)
            out[top : top + h, left : left + w] = cell
    return out


def save_png(array: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(array).save(tmp, format="PNG")
    tmp.replace(path)


def render_panel(rows, out_path, gain: float = 5.0) -> np.ndarray:
    array = panel_array(rows, gain)
    save_png(array, out_path)
    return array


def render_map(stats: ReconStats, out_path) -> np.ndarray:
    """Grayscale heatmap of the display-clipped mean map, scaled to its max."""
    shown = stats.display_map()
    top = shown.max()
    gray = np.zeros_like(shown) if top <= 0 else shown / top
    array = np.rint(gray * 255).astype(np.uint8)
    save_png(array, out_path)
    return array


def write_per_image_csv(stats: ReconStats, path) -> None:
    ids = stats.ids if stats.ids is not None else np.arange(len(stats.per_image))
    lines = ["id,per_image_loss\n"] + [f"{int(i)},{v!r}\n" for i, v in zip(ids, stats.per_image.tolist())]
    ckpt.atomic_write_text(path, "".join(lines))


def save_recon_stats(stats: ReconStats, path) -> None:
    arrays = {"per_image": stats.per_image, "mean_map": stats.mean_map}
    if stats.ids is not None:
        arrays["ids"] = stats.ids.astype(np.int64)
    ckpt.save_container(path, arrays, {"kind": "recon_stats", "clip_percentile": stats.clip_percentile})
