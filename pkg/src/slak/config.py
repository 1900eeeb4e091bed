"""Model configuration and named presets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError

DW_VARIANTS = ("full", "decomposed_parallel", "decomposed_sequential", "dilated", "stacked_small")


@dataclass(frozen=True)
class ModelConfig:
    stage_blocks: tuple = (3, 3, 9, 3)
    stage_dims: tuple = (96, 192, 384, 768)
    stage_kernels: tuple = (51, 49, 47, 13)
    short_edge: int = 5
    dw_variant: str = "decomposed_parallel"
    small_kernel: int = 5
    dilation_rate: int = 3
    stack_count: int = 10
    layer_scale_init: float = 1e-6
    drop_path_rate: float = 0.0
    num_classes: int = 1000
    in_channels: int = 3
    input_size: int = 224
    activation: str = "gelu"

    def __post_init__(self):
        for name in ("stage_blocks", "stage_dims", "stage_kernels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        n = len(self.stage_dims)
        if not n:
            raise ConfigError("at least one stage is required", "stage_dims")
        for name in ("stage_blocks", "stage_kernels"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"length {len(getattr(self, name))} differs from stage_dims length {n}", name)
        if any(b < 0 for b in self.stage_blocks):
            raise ConfigError("block counts must be >= 0", "stage_blocks")
        if any(d < 1 for d in self.stage_dims):
            raise ConfigError("dims must be >= 1", "stage_dims")
        if any(k < 1 for k in self.stage_kernels):
            raise ConfigError("kernel sizes must be >= 1", "stage_kernels")
        if self.dw_variant not in DW_VARIANTS:
            raise ConfigError(f"unknown variant {self.dw_variant!r}; choose from {DW_VARIANTS}", "dw_variant")
        if self.dw_variant in ("decomposed_parallel", "decomposed_sequential"):
            if self.short_edge < 1 or self.short_edge % 2 == 0:
                raise ConfigError("must be a positive odd integer", "short_edge")
            if self.short_edge > min(self.stage_kernels):
                raise ConfigError(f"{self.short_edge} exceeds the smallest stage kernel", "short_edge")
        if self.dilation_rate < 1:
            raise ConfigError("must be >= 1", "dilation_rate")
        if self.stack_count < 1:
            raise ConfigError("must be >= 1", "stack_count")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("must be >= 1", "num_classes" if self.num_classes < 1 else "in_channels")
        if self.input_size < 4 or self.input_size % 4:
            raise ConfigError("must be a multiple of 4", "input_size")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("must be in [0, 1)", "drop_path_rate")
        if self.activation not in ("gelu", "identity"):
            raise ConfigError("must be 'gelu' or 'identity'", "activation")

    def dilated_kernel(self, stage_kernel: int) -> int:
        """Odd kernel size whose dilated span covers ``stage_kernel``."""
        k = math.ceil((stage_kernel - 1) / self.dilation_rate) + 1
        return k if k % 2 else k + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("stage_blocks", "stage_dims", "stage_kernels"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model fields {sorted(extra)}", sorted(extra)[0])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def round_width(dim: float) -> int:
    return max(8, int(round(round(dim) / 8.0)) * 8)


def widen(config: ModelConfig, factor: float) -> ModelConfig:
    return replace(config, stage_dims=tuple(round_width(d * factor) for d in config.stage_dims))


def slak_tiny(**kw) -> ModelConfig:
    return ModelConfig(**kw)


def convnext_tiny(**kw) -> ModelConfig:
    base = dict(stage_kernels=(7, 7, 7, 7), dw_variant="full")
    base.update(kw)
    return ModelConfig(**base)


def slak_micro(**kw) -> ModelConfig:
    base = dict(stage_blocks=(2, 2, 2), stage_dims=(32, 64, 128), stage_kernels=(31, 29, 13),
                short_edge=5, num_classes=2, input_size=64)
    base.update(kw)
    return ModelConfig(**base)


PRESETS = {"slak-t": slak_tiny, "convnext-t": convnext_tiny, "slak-micro": slak_micro}
