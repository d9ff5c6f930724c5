"""Serializable model and training configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from fractions import Fraction

from .discriminators import ImageDiscriminatorConfig, VideoDiscriminatorConfig
from .generator import GeneratorConfig
from .latent import LatentConfig
from .temporal_shift import ShiftSpec

MODES = ("NT", "NT-VAR", "TSB", "NT-MC")
MODE_SIGMAS = {
    "NT": (1.0, 1.0, 1.0),
    "NT-MC": (1.0, 1.0, 1.0),
    "NT-VAR": (0.5, 1.0, 2.0),
    "TSB": (0.5, 1.0, 2.0),
}


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    return mode


def default_generator_widths(resolution: int) -> tuple[int, ...]:
    """Up-sampling widths reaching ``resolution`` from a 3x3 or 4x4 seed."""
    for seed in (3, 4):
        n = 0
        while seed * 2 ** n < resolution:
            n += 1
        if seed * 2 ** n == resolution and n > 0:
            return tuple(max(16 >> i, 1) for i in range(n))
    raise ValueError(f"resolution {resolution} is not 3*2^k or 4*2^k")


def default_image_disc_widths(resolution: int) -> tuple[int, ...]:
    n_down = len(default_generator_widths(resolution))
    return tuple(min(2 ** i, 16) for i in range(n_down)) + (16,)


@dataclass
class ModelConfig:
    mode: str = "TSB"
    resolution: int = 96
    frames: int = 16
    label_sizes: tuple[int, ...] = (10,)
    latent_dims: tuple[int, int, int] = (20, 20, 80)
    sigmas: tuple[float, float, float] | None = None
    embed_dim: int = 120
    gru_hidden: int = 2048
    g_base_width: int = 96
    g_widths: tuple[int, ...] | None = None
    num_temporal_blocks: int = 2
    shift_past: float = 0.125
    shift_future: float = 0.125
    attention_stage: int | None = 3
    d_base_width: int = 96
    d_image_widths: tuple[int, ...] | None = None
    d_video_widths: tuple[int, ...] = (1, 2, 4, 8)
    frames_judged: int = 4
    sn_power_iters: int | None = 1

    def __post_init__(self):
        check_mode(self.mode)
        for name in ("label_sizes", "latent_dims", "sigmas", "g_widths", "d_image_widths", "d_video_widths"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, tuple(value))
        if self.g_widths is None:
            self.g_widths = default_generator_widths(self.resolution)
        if self.d_image_widths is None:
            self.d_image_widths = default_image_disc_widths(self.resolution)
        if self.sigmas is None:
            self.sigmas = MODE_SIGMAS[self.mode]
        if self.attention_stage is not None:
            self.attention_stage = min(self.attention_stage, len(self.g_widths))
        if not 1 <= self.frames_judged <= self.frames:
            raise ValueError(f"frames_judged must be in [1, {self.frames}]")

    @property
    def temporal(self) -> bool:
        return self.mode == "TSB"

    def latent_config(self) -> LatentConfig:
        return LatentConfig(self.latent_dims, self.sigmas)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_width=self.g_base_width, widths=self.g_widths, resolution=self.resolution,
            frames=self.frames, temporal=self.temporal, num_temporal_blocks=self.num_temporal_blocks,
            shift=ShiftSpec(Fraction(self.shift_past).limit_denominator(1 << 16),
                            Fraction(self.shift_future).limit_denominator(1 << 16)),
            attention_stage=self.attention_stage)

    def image_disc_config(self) -> ImageDiscriminatorConfig:
        return ImageDiscriminatorConfig(self.d_base_width, self.d_image_widths, self.frames_judged,
                                        self.sn_power_iters)

    def video_disc_config(self) -> VideoDiscriminatorConfig:
        return VideoDiscriminatorConfig(self.d_base_width, self.d_video_widths, power_iters=self.sn_power_iters)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small widths for single-CPU runs at 48x48, T=8; critic matrices are small enough for exact SN."""
        base = dict(resolution=48, frames=8, gru_hidden=256, g_base_width=4, g_widths=(16, 8, 4, 2),
                    attention_stage=2, d_base_width=8, d_image_widths=(1, 2, 4, 8),
                    d_video_widths=(1, 2, 4, 8), sn_power_iters=None)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    lr_g: float = 5e-5
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.0, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    d_steps_per_g: int = 1
    steps: int = 2000
    seed: int = 0
    alpha: float | None = None
    flow_block: int = 8
    flow_radius: int = 4
    flow_temperature: float = 0.05

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.batch_size < 1 or self.d_steps_per_g < 1:
            raise ValueError("batch_size and d_steps_per_g must be positive")

    def motion_weight(self, mode: str) -> float:
        if self.alpha is not None:
            return self.alpha
        return 1.0 if mode == "NT-MC" else 0.0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)
