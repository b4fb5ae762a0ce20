"""Adversarial min-max training of the feature extractor and the lens.

One step shares a single lens forward and a single extractor forward between
both objectives: the extractor/head gradient comes from the pretext loss on
``[L(x); x]`` and the lens gradient from ``L_adv + lambda * L_rec`` on the
lensed half, each taken only with respect to its own parameters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import stats

from . import checkpoint as ckpt
from .dataio import LabeledDataset, PatchAugConfig, ShortcutConfig, inject_shortcut, patch_grid
from .models import (
    FeatureExtractor,
    FeatureExtractorConfig,
    Head,
    Lens,
    LensConfig,
    apply_to_patches,
    build_feature_extractor,
    build_lens,
    build_task_head,
    config_dict,
    head_input_dim,
    task_forward,
)
from .pretext import (
    ExemplarAugConfig,
    PatchTaskConfig,
    PretextBatch,
    class_count,
    classification_loss,
    exemplar_triplet_loss,
    make_exemplar_batch,
    make_jigsaw_batch,
    make_relpatch_batch,
    make_rotation_batch,
    select_permutation_subset,
)

log = logging.getLogger(__name__)

AdversarialMode = Literal["full", "least_likely", "none"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, step: int, dump: Path | None = None):
        super().__init__(message)
        self.step = step
        self.dump = dump


@dataclass(frozen=True)
class AdversarialConfig:
    mode: AdversarialMode = "full"
    lam: float = 1.0
    feed_raw: bool = True

    def __post_init__(self):
        if self.mode not in ("full", "least_likely", "none"):
            raise ValueError(f"unknown adversarial mode {self.mode!r}")
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")


@dataclass(frozen=True)
class FgsmConfig:
    epsilon: float = 0.04

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("FGSM epsilon must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "rotation"
    extractor: FeatureExtractorConfig = FeatureExtractorConfig()
    lens: LensConfig = LensConfig()
    adversarial: AdversarialConfig = AdversarialConfig()
    fgsm: FgsmConfig | None = None
    shortcut: ShortcutConfig = ShortcutConfig()
    patch: PatchTaskConfig = PatchTaskConfig()
    exemplar_copies: int = 8
    exemplar_aug: ExemplarAugConfig = ExemplarAugConfig()
    triplet_margin: float = 0.5
    jigsaw_permutations: int = 24
    epochs: int = 10
    batch_size: int = 64
    steps_per_epoch: int | None = None
    base_lr: float = 1e-3
    warmup_epochs: float = 1.0
    decay_start_epoch: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-7
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.fgsm is not None and self.adversarial.mode != "none":
            raise ValueError("FGSM training is a baseline and requires adversarial mode 'none'")
        if self.task == "exemplar" and self.adversarial.mode == "least_likely":
            raise ValueError("least_likely mode needs a classification task; exemplar is not one")

    @property
    def uses_lens(self) -> bool:
        return self.adversarial.mode != "none"

    @property
    def decay_start(self) -> float:
        return self.decay_start_epoch if self.decay_start_epoch is not None else 0.8 * self.epochs

    def to_dict(self) -> dict:
        out = asdict(self)
        out["extractor"] = config_dict(self.extractor)
        out["lens"] = config_dict(self.lens)
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["extractor"] = FeatureExtractorConfig(**{**d["extractor"], "block_counts": tuple(d["extractor"]["block_counts"])})
        d["lens"] = LensConfig(**d["lens"])
        d["adversarial"] = AdversarialConfig(**d["adversarial"])
        d["fgsm"] = FgsmConfig(**d["fgsm"]) if d.get("fgsm") else None
        sc = d["shortcut"]
        d["shortcut"] = ShortcutConfig(**{**sc, "arrow_offset": tuple(sc["arrow_offset"])})
        d["patch"] = PatchTaskConfig(grid=d["patch"]["grid"], region_fraction=d["patch"]["region_fraction"], aug=PatchAugConfig(**d["patch"]["aug"]))
        ea = d["exemplar_aug"]
        d["exemplar_aug"] = ExemplarAugConfig(**{**ea, "scale": tuple(ea["scale"]), "saturation": tuple(ea["saturation"])})
        d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


# ----------------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------------


def pretext_objective(task: str, outputs: torch.Tensor, labels: torch.Tensor, margin: float = 0.5) -> torch.Tensor:
    if task == "exemplar":
        return exemplar_triplet_loss(outputs, labels, margin)
    return classification_loss(outputs, labels)


def ssl_loss(task, extractor, head, inputs, labels, margin: float = 0.5) -> torch.Tensor:
    outputs = task_forward(task, extractor, head, torch.as_tensor(inputs))
    return pretext_objective(task, outputs, torch.as_tensor(labels), margin)


def least_likely_targets(logits: torch.Tensor) -> torch.Tensor:
    """argmin of softmax probabilities; ties resolve to the lowest class index."""
    probs = torch.softmax(logits.detach(), dim=1).cpu().numpy()
    return torch.from_numpy(np.argmin(probs, axis=1)).long()


def adversarial_objective(mode: str, task: str, outputs: torch.Tensor, labels, margin: float = 0.5) -> torch.Tensor:
    """Lens-side adversarial loss from the extractor's outputs on lensed inputs."""
    if mode == "full":
        return -pretext_objective(task, outputs, torch.as_tensor(labels), margin)
    if mode == "least_likely":
        if task == "exemplar":
            raise ValueError("least_likely mode is unsupported for the exemplar task")
        return classification_loss(outputs, least_likely_targets(outputs))
    raise ValueError(f"no adversarial loss for mode {mode!r}")


def _frozen_call(module: nn.Module, *args):
    params = {k: v.detach() for k, v in module.named_parameters()}
    buffers = dict(module.named_buffers())
    return torch.func.functional_call(module, {**params, **buffers}, args)


def adversarial_loss(mode, task, extractor, head, lens, inputs, labels, margin: float = 0.5) -> torch.Tensor:
    """Adversarial loss of the lens; extractor and head act as constants."""
    lensed = apply_to_patches(lens, torch.as_tensor(inputs))

    def frozen_extractor(x):
        return _frozen_call(extractor, x)

    if task in ("rotation", "exemplar"):
        outputs = _frozen_call(head, frozen_extractor(lensed))
    else:
        feats = apply_to_patches(frozen_extractor, lensed)
        outputs = _frozen_call(head, feats.reshape(feats.shape[0], -1))
    return adversarial_objective(mode, task, outputs, labels, margin)


def reconstruction_loss(x: torch.Tensor, lx: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference."""
    if x.shape != lx.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(lx.shape)}")
    return (x - lx).pow(2).mean()


def task_accuracy(task: str, outputs: torch.Tensor, labels) -> float:
    outputs = outputs.detach()
    labels = torch.as_tensor(labels)
    if task == "exemplar":
        # nearest-neighbour retrieval of a same-group copy
        z = torch.nn.functional.normalize(outputs, dim=1)
        sim = z @ z.T
        sim.fill_diagonal_(-float("inf"))
        return float((labels[sim.argmax(dim=1)] == labels).float().mean())
    return float((outputs.argmax(dim=1) == labels).float().mean())


# ----------------------------------------------------------------------------
# Schedule
# ----------------------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, plateau, then linear decay to 0 at the last step."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    decay = cfg.decay_start * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * step / warmup
    if step < decay:
        return cfg.base_lr
    if total <= decay:
        return 0.0
    return cfg.base_lr * max(0.0, (total - step) / (total - decay))


# ----------------------------------------------------------------------------
# FGSM baseline
# ----------------------------------------------------------------------------


def draw_fgsm_scales(count: int, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """|TruncNormal(0, epsilon)| truncated at two standard deviations."""
    if epsilon == 0:
        return np.zeros(count)
    return np.abs(stats.truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=epsilon, size=count, random_state=rng))


def fgsm_perturb(extractor, head, task, inputs, labels, cfg: FgsmConfig, seed, margin: float = 0.5):
    """One signed-gradient step per example with a randomized scale.

    Returns ``(perturbed, scales, perturbation)``; ``perturbation`` is exactly
    ``scales[i] * sign(grad)`` for example ``i``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = torch.as_tensor(inputs).detach().clone().requires_grad_(True)
    loss = ssl_loss(task, extractor, head, x, labels, margin)
    (grad,) = torch.autograd.grad(loss, x)
    scales = draw_fgsm_scales(len(x), cfg.epsilon, rng)
    shape = (len(x),) + (1,) * (x.ndim - 1)
    delta = torch.as_tensor(scales, dtype=x.dtype).reshape(shape) * grad.sign()
    return (x + delta).detach(), scales, delta


# ----------------------------------------------------------------------------
# Train state
# ----------------------------------------------------------------------------


@dataclass
class TrainState:
    cfg: TrainConfig
    extractor: FeatureExtractor
    head: Head
    lens: Lens | None
    opt_f: torch.optim.Adam
    opt_l: torch.optim.Adam | None
    step: int = 0
    perm_set: object = None

    def f_params(self) -> list[nn.Parameter]:
        return list(self.extractor.parameters()) + list(self.head.parameters())

    def lens_params(self) -> list[nn.Parameter]:
        return list(self.lens.parameters()) if self.lens is not None else []

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for prefix, module in (("extractor", self.extractor), ("head", self.head), ("lens", self.lens)):
            if module is None:
                continue
            for key, value in module.state_dict().items():
                arrays[f"{prefix}/{key}"] = value.detach().cpu().numpy()
        for prefix, opt in (("opt_f", self.opt_f), ("opt_l", self.opt_l)):
            if opt is None:
                continue
            for idx, st in opt.state_dict()["state"].items():
                for name, value in st.items():
                    arrays[f"{prefix}/{idx}/{name}"] = torch.as_tensor(value).detach().cpu().numpy()
        return arrays

    def meta(self) -> dict:
        return {
            "kind": "train_state",
            "step": self.step,
            "train_config": self.cfg.to_dict(),
            "prelogits_dim": self.extractor.prelogits_dim,
            "has_lens": self.lens is not None,
            "head_out": self.head.out_dim,
        }


def _head_for(cfg: TrainConfig, prelogits_dim: int, seed: int) -> Head:
    patches = cfg.patch.grid**2
    in_dim = head_input_dim(cfg.task, prelogits_dim, patches)
    classes = None if cfg.task == "exemplar" else class_count(cfg.task, cfg.jigsaw_permutations)
    return build_task_head(cfg.task, in_dim, classes, seed=seed)


def model_input_size(cfg: TrainConfig) -> int:
    if cfg.task in ("relpatch", "jigsaw"):
        return patch_grid(cfg.extractor.input_size, cfg.patch.grid, cfg.patch.region_fraction).patch
    return cfg.extractor.input_size


def init_state(cfg: TrainConfig) -> TrainState:
    extractor = build_feature_extractor(replace(cfg.extractor, input_size=model_input_size(cfg)), seed=cfg.seed)
    head = _head_for(cfg, extractor.prelogits_dim, cfg.seed + 1)
    lens = build_lens(cfg.lens, seed=cfg.seed + 2, input_size=model_input_size(cfg)) if cfg.uses_lens else None
    opt_f = torch.optim.Adam(list(extractor.parameters()) + list(head.parameters()), lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps)
    opt_l = torch.optim.Adam(lens.parameters(), lr=0.0, betas=cfg.adam_betas, eps=cfg.adam_eps) if lens is not None else None
    perm_set = select_permutation_subset(cfg.jigsaw_permutations, cfg.patch.grid, seed=cfg.seed) if cfg.task == "jigsaw" else None
    return TrainState(cfg, extractor, head, lens, opt_f, opt_l, 0, perm_set)


def _load_optimizer(opt: torch.optim.Adam, arrays: dict, prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if key.startswith(prefix + "/"):
            _, idx, name = key.split("/", 2)
            state.setdefault(int(idx), {})[name] = torch.from_numpy(value.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def _load_module(module: nn.Module, arrays: dict, prefix: str) -> None:
    sd = {k[len(prefix) + 1 :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def save_state(state: TrainState, path) -> None:
    ckpt.save_container(path, state.to_arrays(), state.meta())


def load_state(path) -> TrainState:
    arrays, meta = ckpt.load_container(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path} does not hold a training state")
    state = init_state(TrainConfig.from_dict(meta["train_config"]))
    _load_module(state.extractor, arrays, "extractor")
    _load_module(state.head, arrays, "head")
    if state.lens is not None:
        _load_module(state.lens, arrays, "lens")
        _load_optimizer(state.opt_l, arrays, "opt_l")
    _load_optimizer(state.opt_f, arrays, "opt_f")
    state.step = int(meta["step"])
    return state


# ----------------------------------------------------------------------------
# Step
# ----------------------------------------------------------------------------


def make_pretext_batch(cfg: TrainConfig, images: np.ndarray, seed, perm_set=None) -> PretextBatch:
    if cfg.task == "rotation":
        return make_rotation_batch(images)
    if cfg.task == "exemplar":
        return make_exemplar_batch(images, cfg.exemplar_copies, cfg.exemplar_aug, seed)
    if cfg.task == "relpatch":
        return make_relpatch_batch(images, cfg.patch, seed)
    if cfg.task == "jigsaw":
        return make_jigsaw_batch(images, perm_set, cfg.patch, seed)
    raise ValueError(f"unknown task {cfg.task!r}")


def _set_lr(opt, lr):
    if opt is not None:
        for group in opt.param_groups:
            group["lr"] = lr


def _apply(opt, params, grads):
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    for p in params:
        p.grad = None


def train_step(state: TrainState, batch: PretextBatch, lr: float, fgsm_seed=None) -> dict:
    """One synchronous update of extractor/head and lens. Returns the step's metrics."""
    cfg = state.cfg
    task, margin = cfg.task, cfg.triplet_margin
    x = torch.from_numpy(batch.inputs)
    labels = torch.from_numpy(batch.labels)
    metrics = {"loss_ssl": None, "loss_adv": None, "loss_rec": None, "task_accuracy": None}

    f_params = state.f_params()
    if state.lens is not None and cfg.adversarial.mode != "none":
        lensed = apply_to_patches(state.lens, x)
        feed_raw = cfg.adversarial.feed_raw and task != "exemplar"
        f_inputs = torch.cat([lensed, x]) if feed_raw else lensed
        f_labels = torch.cat([labels, labels]) if feed_raw else labels
        outputs = task_forward(task, state.extractor, state.head, f_inputs)
        loss_f = pretext_objective(task, outputs, f_labels, margin)
        out_lensed = outputs[: len(x)]
        loss_adv = adversarial_objective(cfg.adversarial.mode, task, out_lensed, labels, margin)
        loss_rec = reconstruction_loss(x, lensed)
        loss_lens = loss_adv + cfg.adversarial.lam * loss_rec
        _check_finite(state, batch, loss_f=loss_f, loss_lens=loss_lens)
        grads_f = torch.autograd.grad(loss_f, f_params, retain_graph=True)
        lens_params = state.lens_params()
        grads_l = torch.autograd.grad(loss_lens, lens_params)
        _set_lr(state.opt_f, lr)
        _set_lr(state.opt_l, lr)
        _apply(state.opt_f, f_params, grads_f)
        _apply(state.opt_l, lens_params, grads_l)
        metrics.update(loss_adv=float(loss_adv.detach()), loss_rec=float(loss_rec.detach()))
        acc_outputs, acc_labels = outputs, f_labels
    else:
        f_inputs = x
        if cfg.fgsm is not None:
            f_inputs, _, _ = fgsm_perturb(state.extractor, state.head, task, x, labels, cfg.fgsm, fgsm_seed, margin)
        outputs = task_forward(task, state.extractor, state.head, f_inputs)
        loss_f = pretext_objective(task, outputs, labels, margin)
        _check_finite(state, batch, loss_f=loss_f)
        grads_f = torch.autograd.grad(loss_f, f_params)
        _set_lr(state.opt_f, lr)
        _apply(state.opt_f, f_params, grads_f)
        acc_outputs, acc_labels = outputs, labels
    metrics["loss_ssl"] = float(loss_f.detach())
    metrics["task_accuracy"] = task_accuracy(task, acc_outputs, acc_labels)
    state.step += 1
    return metrics


def _check_finite(state: TrainState, batch: PretextBatch, **losses) -> None:
    bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss {bad} at step {state.step}; aborting", step=state.step)


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: list[Path]
    metrics_path: Path
    records: list[dict] = field(default_factory=list)

    def final_mean(self, key: str, last: int | None = None) -> float:
        rows = [r[key] for r in self.records if r.get(key) is not None]
        if last is not None:
            rows = rows[-last:]
        return float(np.mean(rows)) if rows else float("nan")


def steps_per_epoch(cfg: TrainConfig, n: int) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(n // cfg.batch_size, 1)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def step_seed(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 11, step])


def batch_indices(cfg: TrainConfig, n: int, step: int, spe: int) -> np.ndarray:
    epoch, within = divmod(step, spe)
    order = epoch_order(cfg.seed, epoch, n)
    start = (within * cfg.batch_size) % n
    idx = np.take(order, np.arange(start, start + cfg.batch_size), mode="wrap")
    return idx


def checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt"


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted((out_dir / "checkpoints").glob("epoch_*.ckpt"))
    return found[-1] if found else None


def _format_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def run_training(
    cfg: TrainConfig,
    dataset: LabeledDataset,
    out_dir,
    resume: bool = False,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs, writing metrics.jsonl and checkpoints under ``out_dir``.

    Batch order and every random draw are functions of ``(seed, step)`` only,
    so a run resumed from any checkpoint replays the uninterrupted run exactly.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    images = inject_shortcut(dataset.images, cfg.shortcut, seed=cfg.seed)
    n = len(images)
    spe = steps_per_epoch(cfg, n)
    total = cfg.epochs * spe

    state = None
    if resume and (latest := latest_checkpoint(out_dir)) is not None:
        state = load_state(latest)
        if state.cfg.to_dict() != cfg.to_dict():
            raise ValueError(f"checkpoint {latest} was written with a different configuration")
        log.info("resuming from %s at step %d", latest, state.step)
    if state is None:
        state = init_state(cfg)

    records = []
    if metrics_path.exists() and state.step > 0:
        for line in metrics_path.read_text().splitlines():
            rec = json.loads(line)
            if rec["step"] < state.step:
                records.append(rec)
    ckpt.atomic_write_text(metrics_path, "".join(_format_record(r) + "\n" for r in records))

    checkpoints = sorted((out_dir / "checkpoints").glob("epoch_*.ckpt")) if state.step else []
    with open(metrics_path, "a") as fh:
        while state.step < total:
            step = state.step
            epoch = step // spe
            idx = batch_indices(cfg, n, step, spe)
            rng = step_seed(cfg.seed, step)
            batch = make_pretext_batch(cfg, images[idx], rng, state.perm_set)
            lr = lr_schedule(step, cfg, spe)
            try:
                metrics = train_step(state, batch, lr, fgsm_seed=rng)
            except NonFiniteLossError as exc:
                dump = out_dir / "diagnostics" / f"nonfinite_step_{step:08d}.ckpt"
                ckpt.save_container(
                    dump,
                    {"inputs": batch.inputs, "labels": batch.labels, "batch_indices": idx.astype(np.int64)},
                    {"kind": "nonfinite_batch", "step": step, "epoch": epoch},
                )
                raise NonFiniteLossError(f"{exc}; offending batch (step {step}) written to {dump}", step, dump) from exc
            record = {"step": step, "epoch": epoch, "lr": lr, **metrics}
            records.append(record)
            fh.write(_format_record(record) + "\n")
            fh.flush()
            if progress is not None:
                progress(record)
            if state.step % spe == 0:
                done = state.step // spe
                if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                    path = checkpoint_path(out_dir, done)
                    save_state(state, path)
                    checkpoints.append(path)
    return TrainResult(state, checkpoints, metrics_path, records)


# ----------------------------------------------------------------------------
# Lambda sweep
# ----------------------------------------------------------------------------


@dataclass
class SweepRow:
    lam: float
    accuracy: float
    final_recon_loss: float
    checkpoint: str


def sweep_lambda(
    cfg: TrainConfig,
    values: Sequence[float],
    dataset: LabeledDataset,
    out_dir,
    evaluate: Callable[[Path], float],
) -> list[SweepRow]:
    """Train one model per lambda, score each with ``evaluate(checkpoint)``.

    Rows come back sorted by accuracy (best first). ``final_recon_loss`` is
    the mean reconstruction loss over the last epoch.
    """
    if not values:
        raise ValueError("need at least one lambda value")
    rows = []
    out_dir = Path(out_dir)
    for lam in values:
        run_cfg = replace(cfg, adversarial=replace(cfg.adversarial, lam=float(lam)))
        result = run_training(run_cfg, dataset, out_dir / f"lambda_{lam:g}", resume=True)
        spe = steps_per_epoch(run_cfg, len(dataset))
        final_ckpt = result.checkpoints[-1]
        rows.append(SweepRow(float(lam), float(evaluate(final_ckpt)), result.final_mean("loss_rec", last=spe), str(final_ckpt)))
    rows.sort(key=lambda r: (-r.accuracy, r.lam))
    return rows
