"""Frame generator with optional temporal residual blocks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .latent import LatentConfig, SequenceGenerator
from .temporal_shift import ShiftSpec, TemporalShift

BN_EPS = 1e-5


@dataclass(frozen=True)
class GeneratorConfig:
    base_width: int = 96
    widths: tuple[int, ...] = (16, 8, 4, 2, 1)
    resolution: int = 96
    frames: int = 16
    temporal: bool = True
    num_temporal_blocks: int = 2
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    attention_stage: int | None = 3

    def __post_init__(self):
        seed = self.seed_size
        if seed * 2 ** len(self.widths) != self.resolution:
            raise ValueError(
                f"{len(self.widths)} up-sampling stages from a {seed}x{seed} seed "
                f"cannot reach {self.resolution}x{self.resolution}")
        if self.num_temporal_blocks > len(self.widths):
            raise ValueError("num_temporal_blocks exceeds the number of blocks")
        if self.attention_stage is not None and not 1 <= self.attention_stage <= len(self.widths):
            raise ValueError(f"attention_stage must be in [1, {len(self.widths)}]")

    @property
    def seed_size(self) -> int:
        return max(1, self.resolution // 2 ** len(self.widths))


class ConditionalBatchNorm(nn.Module):
    """Batch norm with gain ``1 + W_g c`` and bias ``W_b c`` computed from a condition row."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False, eps=BN_EPS)
        self.gain = nn.Linear(cond_dim, channels, bias=False)
        self.bias = nn.Linear(cond_dim, channels, bias=False)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        out = self.bn(x)
        g = 1 + self.gain(cond)
        b = self.bias(cond)
        return out * g[:, :, None, None] + b[:, :, None, None]


def conditional_batchnorm(x: torch.Tensor, cond: torch.Tensor, module: ConditionalBatchNorm,
                          train: bool) -> torch.Tensor:
    module.train(train)
    return module(x, cond)


class SelfAttention(nn.Module):
    """Non-local attention over the spatial positions of each frame, gated by ``gamma``."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.query = nn.Conv2d(channels, inner, 1, bias=False)
        self.key = nn.Conv2d(channels, inner, 1, bias=False)
        self.value = nn.Conv2d(channels, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        """``[N, HW, HW]``; row ``i`` is the distribution of query ``i`` over keys."""
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        return torch.softmax(q.transpose(1, 2) @ k, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        attn = self.attention_map(x)
        v = self.value(x).flatten(2)
        out = (v @ attn.transpose(1, 2)).view(n, c, h, w)
        return x + self.gamma * out


class ResBlockUp(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, shift: TemporalShift | None = None):
        super().__init__()
        self.shift = shift
        self.bn1 = ConditionalBatchNorm(in_ch, cond_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = ConditionalBatchNorm(out_ch, cond_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if self.shift is not None:
            x = self.shift(x)
        h = F.relu(self.bn1(x, cond))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h, cond)))
        s = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.skip is not None:
            s = self.skip(s)
        return h + s


def temporal_resblock(x: torch.Tensor, cond: torch.Tensor, block: ResBlockUp) -> torch.Tensor:
    """Run one up-block on ``[B*T, C, H, W]`` features with per-frame condition rows."""
    return block(x, cond)


class ImageGenerator(nn.Module):
    """Maps ``[B, T, d + e]`` frame codes to ``[B, T, 3, H, W]`` clips in [-1, 1]."""

    def __init__(self, cfg: GeneratorConfig, cond_dim: int):
        super().__init__()
        self.cfg = cfg
        a, c = cfg.base_width, cfg.widths
        s = cfg.seed_size
        self.input = nn.Linear(cond_dim, s * s * c[0] * a)
        blocks = []
        for i in range(len(c)):
            in_ch = a * c[i]
            out_ch = a * c[i + 1] if i + 1 < len(c) else a * c[i]
            shift = None
            if cfg.temporal and i < cfg.num_temporal_blocks:
                shift = TemporalShift(cfg.frames, cfg.shift)
            blocks.append(ResBlockUp(in_ch, out_ch, cond_dim, shift))
        self.blocks = nn.ModuleList(blocks)
        att_ch = blocks[cfg.attention_stage - 1].conv2.out_channels if cfg.attention_stage else 0
        self.attention = SelfAttention(att_ch) if cfg.attention_stage else None
        out_ch = a * c[-1]
        self.out_bn = nn.BatchNorm2d(out_ch, eps=BN_EPS)
        self.out_conv = nn.Conv2d(out_ch, 3, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.orthogonal_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        for m in self.modules():
            if isinstance(m, ConditionalBatchNorm):
                nn.init.zeros_(m.gain.weight)
                nn.init.zeros_(m.bias.weight)

    def forward(self, zf: torch.Tensor) -> torch.Tensor:
        b, t, width = zf.shape
        if t != self.cfg.frames:
            raise ValueError(f"got {t} frame codes, generator is configured for T={self.cfg.frames}")
        if width != self.input.in_features:
            raise ValueError(f"frame code width {width} != {self.input.in_features}")
        cond = zf.reshape(b * t, width)
        s, ch = self.cfg.seed_size, self.cfg.widths[0] * self.cfg.base_width
        h = self.input(cond).view(b * t, ch, s, s)
        for i, block in enumerate(self.blocks, start=1):
            h = block(h, cond)
            if self.attention is not None and i == self.cfg.attention_stage:
                h = self.attention(h)
        h = torch.tanh(self.out_conv(F.relu(self.out_bn(h))))
        return h.view(b, t, 3, h.shape[-2], h.shape[-1])


class VideoGenerator(nn.Module):
    """Sequence generator followed by the image generator."""

    def __init__(self, latent: LatentConfig, gcfg: GeneratorConfig, label_sizes: Sequence[int],
                 embed_dim: int = 120, gru_hidden: int = 2048):
        super().__init__()
        self.latent = latent
        self.cfg = gcfg
        self.sequence = SequenceGenerator(latent, label_sizes, embed_dim, gru_hidden)
        self.image = ImageGenerator(gcfg, self.sequence.out_dim)

    def frame_codes(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.sequence(z, y, self.cfg.frames)

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.image(self.frame_codes(z, y))


def generate_video(zf: torch.Tensor, image_generator: ImageGenerator, train: bool = False) -> torch.Tensor:
    """Render frame codes (``[T, d+e]`` or ``[B, T, d+e]``); ``train`` selects batch statistics."""
    squeeze = zf.dim() == 2
    if squeeze:
        zf = zf.unsqueeze(0)
    was_training = image_generator.training
    image_generator.train(train)
    try:
        out = image_generator(zf)
    finally:
        image_generator.train(was_training)
    return out[0] if squeeze else out
