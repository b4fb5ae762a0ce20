"""Experiment configuration: one JSON file, validated in full before any compute."""

from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .dataio import PatchAugConfig, ShortcutConfig, patch_grid
from .evaluation import ProbeConfig
from .models import FeatureExtractorConfig, LensConfig
from .pretext import ExemplarAugConfig, PatchTaskConfig
from .training import AdversarialConfig, FgsmConfig, TrainConfig, model_input_size

DATA_ENV = "SHORTCUT_LENS_DATA"
DEFAULT_LAMBDAS = (0.1, 0.3, 1.0, 3.0, 10.0)


class ConfigValidationError(ValueError):
    """Carries field-level messages for an invalid configuration."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(Strict):
    dataset: Literal["cifar10", "synthetic", "folder"] = "cifar10"
    root: str | None = None
    image_size: int = Field(32, ge=4)
    train_count: int | None = Field(None, ge=2)
    test_count: int | None = Field(None, ge=2)
    subset_seed: int = 0
    train_dir: str | None = None
    train_labels: str | None = None
    test_dir: str | None = None
    test_labels: str | None = None

    @model_validator(mode="after")
    def _folders(self):
        if self.dataset == "folder" and not (self.train_dir and self.test_dir):
            raise ValueError("dataset 'folder' needs train_dir and test_dir")
        return self


class ShortcutSection(Strict):
    kind: Literal["arrow", "chromatic", "none"] = "none"
    arrow_offset: tuple[int, int] = (2, 2)
    arrow_size: int = 7
    channel_shift: int = 2
    apply_probability: float = 1.0
    apply_to_eval: bool = True


class PatchAugSection(Strict):
    grayscale: bool = False
    grayscale_probability: float = Field(0.66, ge=0, le=1)
    jitter: int = Field(0, ge=0)
    standardize: bool = False


class ExemplarAugSection(Strict):
    enabled: bool = True
    translate: float = 0.2
    scale: tuple[float, float] = (0.8, 1.2)
    brightness: float = 0.2
    saturation: tuple[float, float] = (0.7, 1.3)
    grayscale_probability: float = Field(0.66, ge=0, le=1)


class TaskSection(Strict):
    name: Literal["rotation", "exemplar", "relpatch", "jigsaw"] = "rotation"
    grid: int = Field(3, ge=2)
    region_fraction: float = Field(1.0, gt=0, le=1)
    patch_aug: PatchAugSection = PatchAugSection()
    exemplar_copies: int = Field(8, ge=2)
    exemplar_aug: ExemplarAugSection = ExemplarAugSection()
    triplet_margin: float = Field(0.5, gt=0)
    jigsaw_permutations: int = Field(24, ge=2)


class ExtractorSection(Strict):
    width_factor: int = Field(1, ge=1)
    block_counts: tuple[int, ...] = (2, 2, 2)
    base_channels: int = Field(32, ge=1)
    unit: Literal["bottleneck", "basic"] = "bottleneck"
    stem: Literal["cifar", "imagenet"] = "cifar"
    norm: Literal["group", "batch"] = "group"


class LensSection(Strict):
    variant: Literal["unet", "flat"] = "flat"
    depth: int = Field(4, ge=1)
    base_channels: int = Field(32, ge=1)
    flat_units: int = Field(5, ge=1)
    unit: Literal["bottleneck", "basic"] = "bottleneck"
    norm: Literal["group", "batch"] = "group"
    zero_init_output: bool = True


class ModelSection(Strict):
    extractor: ExtractorSection = ExtractorSection()
    lens: LensSection = LensSection()


class AdversarialSection(Strict):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)
    mode: Literal["full", "least_likely", "none"] = "full"
    lam: float = Field(1.0, ge=0, alias="lambda")
    feed_raw: bool = True


class FgsmSection(Strict):
    epsilon: float = Field(0.04, ge=0)


class TrainingSection(Strict):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=2)
    steps_per_epoch: int | None = Field(None, ge=1)
    base_lr: float = Field(1e-3, gt=0)
    warmup_epochs: float = Field(1.0, ge=0)
    decay_start_epoch: float | None = Field(None, ge=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-7, gt=0)
    checkpoint_every: int = Field(1, ge=1)
    adversarial: AdversarialSection = AdversarialSection()
    fgsm: FgsmSection | None = None


class CueConflictSection(Strict):
    dir: str
    labels: str


class ProbeSection(Strict):
    batch_size: int = Field(256, ge=1)
    lr: float = Field(0.8, gt=0)
    epochs: int = Field(30, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    center: bool = True


class EvalSection(Strict):
    mode: Literal["auto", "concat_lensed", "duplicate", "plain"] = "auto"
    probe: ProbeSection = ProbeSection()
    batch_size: int = Field(256, ge=1)
    cueconflict: CueConflictSection | None = None


class AnalysisSection(Strict):
    sample_count: int = Field(1280, ge=1)
    clip_percentile: float = Field(95.0, ge=0, le=100)
    panel_rows: int = Field(8, ge=1)
    gain: float = Field(5.0, gt=0)
    seed: int = 0


class SweepSection(Strict):
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    parallel: int = Field(1, ge=1)


class ExperimentConfig(Strict):
    name: str = "experiment"
    seed: int = 0
    out_dir: str | None = None
    data: DataSection = DataSection()
    shortcut: ShortcutSection = ShortcutSection()
    task: TaskSection = TaskSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    eval: EvalSection = EvalSection()
    analysis: AnalysisSection = AnalysisSection()
    sweep: SweepSection = SweepSection()

    def data_root(self) -> str | None:
        return self.data.root or os.environ.get(DATA_ENV)

    def shortcut_config(self) -> ShortcutConfig:
        s = self.shortcut
        return ShortcutConfig(s.kind, tuple(s.arrow_offset), s.arrow_size, s.channel_shift, s.apply_probability)

    @property
    def patch_task(self) -> bool:
        return self.task.name in ("relpatch", "jigsaw")

    def train_config(self) -> TrainConfig:
        t, tr, m = self.task, self.training, self.model
        return TrainConfig(
            task=t.name,
            extractor=FeatureExtractorConfig(**m.extractor.model_dump(), input_size=self.data.image_size),
            lens=LensConfig(**m.lens.model_dump()),
            adversarial=AdversarialConfig(tr.adversarial.mode, tr.adversarial.lam, tr.adversarial.feed_raw),
            fgsm=FgsmConfig(tr.fgsm.epsilon) if tr.fgsm is not None else None,
            shortcut=self.shortcut_config(),
            patch=PatchTaskConfig(t.grid, t.region_fraction, PatchAugConfig(**t.patch_aug.model_dump())),
            exemplar_copies=t.exemplar_copies,
            exemplar_aug=ExemplarAugConfig(**t.exemplar_aug.model_dump()),
            triplet_margin=t.triplet_margin,
            jigsaw_permutations=t.jigsaw_permutations,
            epochs=tr.epochs,
            batch_size=tr.batch_size,
            steps_per_epoch=tr.steps_per_epoch,
            base_lr=tr.base_lr,
            warmup_epochs=tr.warmup_epochs,
            decay_start_epoch=tr.decay_start_epoch,
            adam_betas=tuple(tr.adam_betas),
            adam_eps=tr.adam_eps,
            seed=self.seed,
            checkpoint_every=tr.checkpoint_every,
        )

    def probe_config(self) -> ProbeConfig:
        p = self.eval.probe
        return ProbeConfig(p.batch_size, p.lr, p.epochs, p.momentum, p.center, seed=self.seed)

    def validate_semantics(self) -> None:
        """Cross-field checks that need the module configs (raises ValueError)."""
        cfg = self.train_config()
        cfg.extractor.validate()
        if self.patch_task:
            patch_grid(self.data.image_size, self.task.grid, self.task.region_fraction)
            if self.task.name == "relpatch" and self.task.grid != 3:
                raise ValueError("task.grid must be 3 for relpatch")
        size = model_input_size(cfg)
        replace(cfg.extractor, input_size=size).validate()
        if cfg.uses_lens:
            cfg.lens.validate(size)
        if self.eval.mode == "concat_lensed" and not cfg.uses_lens:
            raise ValueError("eval.mode 'concat_lensed' needs a lens (training.adversarial.mode must not be 'none')")

    def snapshot(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True) + "\n"


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown key '{loc}'")
        else:
            lines.append(f"{loc}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: dict, seed: int | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigValidationError("config must be a JSON object")
    if seed is not None:
        data = {**data, "seed": seed}
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigValidationError(format_validation_error(exc)) from exc
    try:
        cfg.validate_semantics()
    except ValueError as exc:
        raise ConfigValidationError(str(exc)) from exc
    return cfg


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data, seed)
