"""Glue between a validated ExperimentConfig and the library modules."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis
from . import checkpoint as ckpt
from .config import ExperimentConfig
from .dataio import (
    DataError,
    LabeledDataset,
    cifar10_available,
    inject_shortcut,
    load_cifar10,
    load_image_folder,
    make_synthetic_shapes,
    resize_batch,
)
from .evaluation import (
    ProbeResult,
    evaluate_probe,
    extract_representations,
    load_cueconflict,
    probe_classifier,
    shape_bias_score,
    train_linear_probe,
)
from .training import TrainState, init_state, load_state, run_training, steps_per_epoch, sweep_lambda


class UsageError(ValueError):
    """A request that contradicts the checkpoint or config (reported with exit code 2)."""


@dataclass
class Splits:
    train: LabeledDataset
    test: LabeledDataset


def _subset(ds: LabeledDataset, count: int | None, seed: int) -> LabeledDataset:
    if count is None or count >= len(ds):
        return ds
    return ds.subset(np.sort(np.random.default_rng(seed).permutation(len(ds))[:count]))


def _resize(ds: LabeledDataset, size: int) -> LabeledDataset:
    if ds.images.shape[1] == size and ds.images.shape[2] == size:
        return ds
    return LabeledDataset(np.clip(resize_batch(ds.images, size), -1, 1), ds.labels, ds.class_count, ds.names)


def load_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.dataset == "synthetic":
        train = make_synthetic_shapes(d.train_count or 5000, seed=d.subset_seed, size=d.image_size)
        test = make_synthetic_shapes(d.test_count or 1000, seed=d.subset_seed + 1, size=d.image_size)
        return Splits(train, test)
    if d.dataset == "cifar10":
        root = cfg.data_root()
        if not cifar10_available(root):
            raise DataError(
                f"CIFAR-10 binary files not found under {root!r}; set data.root or the SHORTCUT_LENS_DATA variable"
            )
        train, test = load_cifar10(root, "train"), load_cifar10(root, "test")
    else:
        train = load_image_folder(d.train_dir, d.train_labels, size=d.image_size)
        test = load_image_folder(d.test_dir, d.test_labels, size=d.image_size, class_count=train.class_count)
    train = _resize(_subset(train, d.train_count, d.subset_seed), d.image_size)
    test = _resize(_subset(test, d.test_count, d.subset_seed + 1), d.image_size)
    return Splits(train, test)


def eval_splits(cfg: ExperimentConfig, splits: Splits) -> Splits:
    """The downstream splits, carrying the training shortcut when configured to."""
    if not cfg.shortcut.apply_to_eval or cfg.shortcut.kind == "none":
        return splits
    sc = cfg.shortcut_config()

    def mark(ds, seed):
        return LabeledDataset(inject_shortcut(ds.images, sc, seed=seed), ds.labels, ds.class_count, ds.names)

    return Splits(mark(splits.train, cfg.seed), mark(splits.test, cfg.seed + 1))


# ----------------------------------------------------------------------------
# Layout
# ----------------------------------------------------------------------------


def out_dir_for(cfg: ExperimentConfig, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("runs") / cfg.name


def write_json(path: Path, obj) -> None:
    ckpt.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_record(out: Path) -> dict | None:
    path = out / "record.json"
    return json.loads(path.read_text()) if path.is_file() else None


# ----------------------------------------------------------------------------
# Train
# ----------------------------------------------------------------------------


def train_experiment(cfg: ExperimentConfig, out: Path, resume: bool = False, splits: Splits | None = None) -> dict:
    existing = read_record(out)
    if resume and existing and existing.get("status") == "complete":
        return existing
    t0 = time.perf_counter()
    splits = splits or load_splits(cfg)
    t1 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write_text(out / "config.snapshot", cfg.snapshot())
    result = run_training(cfg.train_config(), splits.train, out, resume=resume)
    t2 = time.perf_counter()
    record = {
        "name": cfg.name,
        "status": "complete",
        "config": json.loads(cfg.snapshot()),
        "checkpoints": [str(p) for p in result.checkpoints],
        "metrics_path": str(result.metrics_path),
        "final_step": result.state.step,
        "final_mean_recon_loss": _nan_to_none(
            result.final_mean("loss_rec", last=steps_per_epoch(cfg.train_config(), len(splits.train)))
        ),
        "evaluation": existing.get("evaluation") if existing else None,
        "timings": {"data_seconds": t1 - t0, "train_seconds": t2 - t1},
    }
    write_json(out / "record.json", record)
    return record


def _nan_to_none(v: float) -> float | None:
    return None if v != v else v


# ----------------------------------------------------------------------------
# Eval
# ----------------------------------------------------------------------------


def resolve_checkpoint(out: Path, checkpoint: str | None) -> Path:
    if checkpoint:
        path = Path(checkpoint)
    else:
        record = read_record(out)
        if not record or not record.get("checkpoints"):
            raise ckpt.CheckpointError(f"no checkpoint given and no completed record in {out}")
        path = Path(record["checkpoints"][-1])
    if not path.is_file():
        raise ckpt.CheckpointError(f"checkpoint not found: {path}")
    return path


def resolve_mode(cfg: ExperimentConfig, state: TrainState) -> str:
    mode = cfg.eval.mode
    if mode == "auto":
        return "concat_lensed" if state.lens is not None else "duplicate"
    if mode == "concat_lensed" and state.lens is None:
        raise UsageError("eval mode 'concat_lensed' requested but the checkpoint holds no lens")
    return mode


def evaluate_state(cfg: ExperimentConfig, state: TrainState, splits: Splits, provenance: dict) -> tuple[ProbeResult, dict]:
    mode = resolve_mode(cfg, state)
    patches = (cfg.task.grid, cfg.task.region_fraction) if cfg.patch_task else None
    ev = eval_splits(cfg, splits)
    lens = state.lens if mode == "concat_lensed" else None
    t0 = time.perf_counter()
    train_fm = extract_representations(state.extractor, lens, ev.train, mode, cfg.eval.batch_size, patches, provenance)
    test_fm = extract_representations(state.extractor, lens, ev.test, mode, cfg.eval.batch_size, patches, provenance)
    t1 = time.perf_counter()
    probe = train_linear_probe(train_fm, cfg.probe_config(), class_count=ev.train.class_count)
    result = evaluate_probe(probe, test_fm)
    t2 = time.perf_counter()
    report = {
        **result.to_dict(),
        "mode": mode,
        "feature_dim": train_fm.dim,
        "train_examples": len(train_fm.labels),
        "test_examples": len(test_fm.labels),
        "provenance": {**provenance, "mode": mode},
        "timings": {"extract_seconds": t1 - t0, "probe_seconds": t2 - t1},
    }
    if cfg.eval.cueconflict is not None:
        cc = load_cueconflict(cfg.eval.cueconflict.dir, cfg.eval.cueconflict.labels, size=cfg.data.image_size)
        classify = probe_classifier(state.extractor, probe, mode, lens=lens, patches=patches)
        report["shape_bias"] = shape_bias_score(classify, cc).to_dict()
    return result, report


def evaluate_checkpoint(cfg: ExperimentConfig, out: Path, checkpoint: str | None, untrained: bool = False, splits: Splits | None = None) -> dict:
    if untrained:
        state = init_state(cfg.train_config())
        provenance = {"checkpoint": None, "checkpoint_sha256": None, "untrained": True}
    else:
        path = resolve_checkpoint(out, checkpoint)
        state = load_state(path)
        provenance = {"checkpoint": str(path), "checkpoint_sha256": ckpt.file_digest(path), "untrained": False}
    resolve_mode(cfg, state)
    splits = splits or load_splits(cfg)
    _, report = evaluate_state(cfg, state, splits, provenance)
    write_json(out / "eval" / "report.json", report)
    record = read_record(out)
    if record is not None and not untrained:
        record["evaluation"] = report
        write_json(out / "record.json", record)
    return report


# ----------------------------------------------------------------------------
# Analyze
# ----------------------------------------------------------------------------


def analyze_checkpoint(cfg: ExperimentConfig, out: Path, checkpoint: str | None, splits: Splits | None = None) -> dict:
    path = resolve_checkpoint(out, checkpoint)
    state = load_state(path)
    if state.lens is None:
        raise UsageError(f"checkpoint {path} holds no lens; nothing to analyze")
    if cfg.patch_task:
        raise UsageError("lens analysis renders whole images; patch-task lenses are not supported")
    splits = splits or load_splits(cfg)
    images = eval_splits(cfg, splits).test.images
    a = cfg.analysis
    dest = out / "analysis"
    stats = analysis.mean_recon_map(state.lens, images, min(a.sample_count, len(images)), a.clip_percentile, a.seed)
    rows_n = min(a.panel_rows, len(stats.ids))
    x = images[stats.ids[:rows_n]]
    lx = analysis.apply_lens(state.lens, x)
    diff, _ = analysis.lens_difference(x, lx)
    analysis.render_panel(list(zip(x, lx, diff)), dest / "panel.png", a.gain)
    analysis.render_map(stats, dest / "mean_map.png")
    analysis.write_per_image_csv(stats, dest / "per_image.csv")
    analysis.save_recon_stats(stats, dest / "recon_stats.ckpt")
    summary = {
        "checkpoint": str(path),
        "checkpoint_sha256": ckpt.file_digest(path),
        "sample_count": len(stats.ids),
        "panel_rows": rows_n,
        "mean_per_image_loss": float(stats.per_image.mean()),
        "clip_percentile": a.clip_percentile,
        "clip_value": stats.clip_value,
    }
    write_json(dest / "summary.json", summary)
    return summary


# ----------------------------------------------------------------------------
# Sweep
# ----------------------------------------------------------------------------


def _sweep_cfg(cfg: ExperimentConfig, lam: float) -> ExperimentConfig:
    training = cfg.training.model_copy(update={"adversarial": cfg.training.adversarial.model_copy(update={"lam": lam})})
    return cfg.model_copy(update={"training": training})


def sweep_one(cfg_json: str, lam: float, out: str) -> dict:
    """Train and evaluate a single lambda; runs in a worker process when parallel."""
    cfg = _sweep_cfg(ExperimentConfig.model_validate_json(cfg_json), lam)
    splits = load_splits(cfg)
    run_dir = Path(out) / f"lambda_{lam:g}"
    record = train_experiment(cfg, run_dir, resume=True, splits=splits)
    report = evaluate_checkpoint(cfg, run_dir, record["checkpoints"][-1], splits=splits)
    return {"lambda": lam, "accuracy": report["top1"], "final_recon_loss": record["final_mean_recon_loss"]}


def sweep_experiment(cfg: ExperimentConfig, out: Path, lambdas, parallel: int = 1) -> list[dict]:
    lambdas = [float(v) for v in lambdas]
    if not lambdas:
        raise UsageError("the sweep needs at least one lambda value")
    runs = out / "sweep"
    if parallel > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel, mp_context=mp.get_context("spawn")) as pool:
            futures = [pool.submit(sweep_one, cfg.model_dump_json(by_alias=True), lam, str(runs)) for lam in lambdas]
            rows = [f.result() for f in futures]
    else:
        splits = load_splits(cfg)

        def evaluate(path):
            lam = float(load_state(path).cfg.adversarial.lam)
            return evaluate_checkpoint(_sweep_cfg(cfg, lam), path.parent.parent, str(path), splits=splits)["top1"]

        table = sweep_lambda(cfg.train_config(), lambdas, splits.train, runs, evaluate)
        rows = [{"lambda": r.lam, "accuracy": r.accuracy, "final_recon_loss": _nan_to_none(r.final_recon_loss)} for r in table]
    rows.sort(key=lambda r: r["lambda"])
    best = max(range(len(rows)), key=lambda i: (rows[i]["accuracy"], -rows[i]["lambda"]))
    for i, r in enumerate(rows):
        r["best"] = i == best
    lines = ["lambda,accuracy,final_recon_loss,best\n"]
    for r in rows:
        rec = "" if r["final_recon_loss"] is None else repr(r["final_recon_loss"])
        lines.append(f"{r['lambda']!r},{r['accuracy']!r},{rec},{int(r['best'])}\n")
    ckpt.atomic_write_text(out / "sweep.csv", "".join(lines))
    write_json(out / "sweep.json", rows)
    return rows
