"""Feature extractor, lens and task heads.

All networks take and return channels-last tensors (``[N, H, W, 3]`` for
images) to match the data pipeline; the channel-first permute happens inside
``forward``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

Norm = Literal["group", "batch"]
UnitKind = Literal["bottleneck", "basic"]


class ModelConfigError(ValueError):
    pass


class GroupNorm(nn.GroupNorm):
    # the channels-last GroupNorm backward kernel of some CPU builds segfaults
    def forward(self, x):
        return super().forward(x.contiguous())


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return GroupNorm(math.gcd(channels, 8), channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    raise ModelConfigError(f"unknown normalization {kind!r}")


class PreActBottleneck(nn.Module):
    """Pre-activation bottleneck unit: 1x1 reduce, 3x3, 1x1 expand."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "group", mid: int | None = None):
        super().__init__()
        mid = mid or max(cout // 4, 1)
        self.norm1 = make_norm(norm, cin)
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.norm2 = make_norm(norm, mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.norm3 = make_norm(norm, mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False) if stride != 1 or cin != cout else None

    def forward(self, x):
        pre = F.relu(self.norm1(x))
        shortcut = self.proj(pre) if self.proj is not None else x
        h = self.conv1(pre)
        h = self.conv2(F.relu(self.norm2(h)))
        h = self.conv3(F.relu(self.norm3(h)))
        return h + shortcut


class PreActBasic(nn.Module):
    """Pre-activation unit with two 3x3 convolutions."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "group"):
        super().__init__()
        self.norm1 = make_norm(norm, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm2 = make_norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False) if stride != 1 or cin != cout else None

    def forward(self, x):
        pre = F.relu(self.norm1(x))
        shortcut = self.proj(pre) if self.proj is not None else x
        h = self.conv1(pre)
        h = self.conv2(F.relu(self.norm2(h)))
        return h + shortcut


def make_unit(kind: str, cin: int, cout: int, stride: int, norm: str) -> nn.Module:
    if kind == "bottleneck":
        return PreActBottleneck(cin, cout, stride, norm)
    if kind == "basic":
        return PreActBasic(cin, cout, stride, norm)
    raise ModelConfigError(f"unknown unit kind {kind!r}")


# ----------------------------------------------------------------------------
# Feature extractor
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Pre-activation ResNet.

    Stage ``s`` has ``base_channels * width_factor * 2**s`` inner channels;
    bottleneck units expand them four-fold. ``stem='imagenet'`` is the 7x7/2
    convolution plus 3x3/2 max-pool of ResNet50 v2, ``stem='cifar'`` a single
    3x3/1 convolution for small inputs.
    """

    width_factor: int = 1
    block_counts: tuple[int, ...] = (2, 2, 2)
    input_size: int = 32
    base_channels: int = 32
    unit: UnitKind = "bottleneck"
    stem: Literal["cifar", "imagenet"] = "cifar"
    norm: Norm = "group"

    @property
    def expansion(self) -> int:
        return 4 if self.unit == "bottleneck" else 1

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * self.width_factor * 2**stage * self.expansion

    @property
    def prelogits_dim(self) -> int:
        return self.stage_channels(len(self.block_counts) - 1)

    @property
    def total_stride(self) -> int:
        stem = 4 if self.stem == "imagenet" else 1
        return stem * 2 ** (len(self.block_counts) - 1)

    def validate(self) -> None:
        if self.width_factor < 1 or self.base_channels < 1:
            raise ModelConfigError("width_factor and base_channels must be >= 1")
        if not self.block_counts or min(self.block_counts) < 1:
            raise ModelConfigError("every stage needs at least one unit")
        if self.input_size % self.total_stride:
            raise ModelConfigError(
                f"input size {self.input_size} is not divisible by the total stride {self.total_stride}"
            )


def resnet50_v2_config(width_factor: int = 4, input_size: int = 224) -> FeatureExtractorConfig:
    return FeatureExtractorConfig(
        width_factor=width_factor,
        block_counts=(3, 4, 6, 3),
        input_size=input_size,
        base_channels=16,
        unit="bottleneck",
        stem="imagenet",
        norm="batch",
    )


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: FeatureExtractorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        stem_out = cfg.base_channels * cfg.width_factor
        if cfg.stem == "imagenet":
            self.stem = nn.Sequential(
                nn.Conv2d(3, stem_out, 7, stride=2, padding=3, bias=False), nn.MaxPool2d(3, stride=2, padding=1)
            )
        else:
            self.stem = nn.Conv2d(3, stem_out, 3, padding=1, bias=False)
        units = []
        cin = stem_out
        for stage, count in enumerate(cfg.block_counts):
            cout = cfg.stage_channels(stage)
            for i in range(count):
                stride = 2 if (i == 0 and stage > 0) else 1
                units.append(make_unit(cfg.unit, cin, cout, stride, cfg.norm))
                cin = cout
        self.units = nn.Sequential(*units)
        self.final_norm = make_norm(cfg.norm, cin)

    @property
    def prelogits_dim(self) -> int:
        return self.cfg.prelogits_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[N, H, W, 3] images -> [N, prelogits_dim] pooled representation."""
        h = self.stem(x.permute(0, 3, 1, 2).contiguous())
        h = F.relu(self.final_norm(self.units(h)))
        return h.mean(dim=(2, 3))

    forward_features = forward


def build_feature_extractor(cfg: FeatureExtractorConfig, seed: int = 0) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FeatureExtractor(cfg)


# ----------------------------------------------------------------------------
# Lens
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class LensConfig:
    """``unet``: n residual units per encoder/decoder side with k channels at
    full resolution; ``flat``: ``flat_units`` residual units at constant
    resolution. Both end in a 1x1 convolution whose output is added to the
    input image."""

    variant: Literal["unet", "flat"] = "flat"
    depth: int = 4
    base_channels: int = 32
    flat_units: int = 5
    unit: UnitKind = "bottleneck"
    norm: Norm = "group"
    zero_init_output: bool = True
    residual_output: bool = True

    def validate(self, input_size: int | None = None) -> None:
        if self.variant not in ("unet", "flat"):
            raise ModelConfigError(f"unknown lens variant {self.variant!r}")
        if self.base_channels < 1:
            raise ModelConfigError("base_channels must be >= 1")
        if not self.residual_output:
            raise ModelConfigError("the lens output is always residual")
        if self.variant == "unet":
            if self.depth < 1:
                raise ModelConfigError("unet depth must be >= 1")
            if input_size is not None and input_size % 2**self.depth:
                raise ModelConfigError(f"unet depth {self.depth} needs input size divisible by {2 ** self.depth}")
        elif self.flat_units < 1:
            raise ModelConfigError("flat lens needs at least one unit")


class Lens(nn.Module):
    def __init__(self, cfg: LensConfig, input_size: int | None = None):
        super().__init__()
        cfg.validate(input_size)
        self.cfg = cfg
        k = cfg.base_channels
        if cfg.variant == "flat":
            self.body = nn.Sequential(
                *[make_unit(cfg.unit, 3 if i == 0 else k, k, 1, cfg.norm) for i in range(cfg.flat_units)]
            )
        else:
            n = cfg.depth
            self.encoder = nn.ModuleList(
                make_unit(cfg.unit, 3 if i == 0 else k * 2 ** (i - 1), k * 2**i, 1, cfg.norm) for i in range(n)
            )
            self.bottleneck = nn.Sequential(
                make_unit(cfg.unit, k * 2 ** (n - 1), k * 2**n, 1, cfg.norm),
                make_unit(cfg.unit, k * 2**n, k * 2**n, 1, cfg.norm),
            )
            # decoder level i sees the upsampled deeper map concatenated with encoder skip i
            self.decoder = nn.ModuleList(
                make_unit(cfg.unit, k * 2 ** (i + 1) + k * 2**i, k * 2**i, 1, cfg.norm) for i in range(n)
            )
        self.out_norm = make_norm(cfg.norm, k)
        self.out_conv = nn.Conv2d(k, 3, 1, bias=True)
        if cfg.zero_init_output:
            zero_output_head(self)

    def residual(self, h: torch.Tensor) -> torch.Tensor:
        if self.cfg.variant == "flat":
            h = self.body(h)
        else:
            skips = []
            for unit in self.encoder:
                h = unit(h)
                skips.append(h)
                h = F.max_pool2d(h, 2, 2)
            h = self.bottleneck(h)
            for i in reversed(range(self.cfg.depth)):
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
                h = self.decoder[i](torch.cat([h, skips[i]], dim=1))
        return self.out_conv(F.relu(self.out_norm(h)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"lens expects [N, H, W, 3] input, got {tuple(x.shape)}")
        if self.cfg.variant == "unet" and (x.shape[1] % 2**self.cfg.depth or x.shape[2] % 2**self.cfg.depth):
            raise ValueError(f"unet lens of depth {self.cfg.depth} cannot process {x.shape[1]}x{x.shape[2]} images")
        return x + self.residual(x.permute(0, 3, 1, 2).contiguous()).permute(0, 2, 3, 1)


def zero_output_head(lens: Lens) -> None:
    with torch.no_grad():
        lens.out_conv.weight.zero_()
        lens.out_conv.bias.zero_()


def build_lens(cfg: LensConfig, seed: int = 0, input_size: int | None = None) -> Lens:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Lens(cfg, input_size)


def lens_apply(lens: Lens, batch: torch.Tensor) -> torch.Tensor:
    return lens(batch)


def apply_to_patches(fn, inputs: torch.Tensor) -> torch.Tensor:
    """Apply an image->X function to ``[M, H, W, 3]`` or ``[M, P, h, w, 3]`` inputs."""
    if inputs.ndim == 4:
        return fn(inputs)
    m, p = inputs.shape[:2]
    out = fn(inputs.reshape(m * p, *inputs.shape[2:]))
    return out.reshape(m, p, *out.shape[1:])


# ----------------------------------------------------------------------------
# Heads
# ----------------------------------------------------------------------------


class Head(nn.Module):
    def __init__(self, layers: nn.Module, in_dim: int, out_dim: int):
        super().__init__()
        self.layers = layers
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim}-dim features, got {features.shape[-1]}")
        return self.layers(features)


EXEMPLAR_EMBED_DIM = 256


def head_input_dim(task: str, prelogits_dim: int, patches: int = 9) -> int:
    if task == "relpatch":
        return 2 * prelogits_dim
    if task == "jigsaw":
        return patches * prelogits_dim
    return prelogits_dim


def build_task_head(
    task: str, in_dim: int, class_count: int | None = None, seed: int = 0, zero_init: bool = False
) -> Head:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if task in ("rotation", "relpatch"):
            layers = nn.Linear(in_dim, class_count)
            out = class_count
        elif task == "jigsaw":
            hidden = max(in_dim // 2, 1)
            layers = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, class_count))
            out = class_count
        elif task == "exemplar":
            layers = nn.Linear(in_dim, EXEMPLAR_EMBED_DIM)
            out = EXEMPLAR_EMBED_DIM
        else:
            raise ValueError(f"unknown task {task!r}")
    if zero_init:
        last = layers[-1] if isinstance(layers, nn.Sequential) else layers
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
    return Head(layers, in_dim, out)


def task_forward(task: str, extractor: nn.Module, head: Head, inputs: torch.Tensor) -> torch.Tensor:
    """Logits (or embeddings) for pretext inputs of the given task."""
    if task in ("rotation", "exemplar"):
        if inputs.ndim != 4:
            raise ValueError(f"{task} expects image batches, got shape {tuple(inputs.shape)}")
        return head(extractor(inputs))
    if task in ("relpatch", "jigsaw"):
        if inputs.ndim != 5:
            raise ValueError(f"{task} expects patch stacks [M, P, h, w, 3], got shape {tuple(inputs.shape)}")
        feats = apply_to_patches(extractor, inputs)
        return head(feats.reshape(feats.shape[0], -1))
    raise ValueError(f"unknown task {task!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_dict(cfg) -> dict:
    out = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
