"""Frame and clip critics with projection conditioning and spectral normalization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils import parametrize

SN_EPS = 1e-12


def _power_iteration(weight: torch.Tensor, u: torch.Tensor, power_iters: int):
    with torch.no_grad():
        v = F.normalize(weight.t() @ u, dim=0, eps=SN_EPS)
        for _ in range(max(1, power_iters)):
            v = F.normalize(weight.t() @ u, dim=0, eps=SN_EPS)
            u = F.normalize(weight @ v, dim=0, eps=SN_EPS)
    return u, v


def _top_singular_pair(weight: torch.Tensor):
    with torch.no_grad():
        U, _, Vh = torch.linalg.svd(weight, full_matrices=False)
    return U[:, 0], Vh[0]


def _divide(weight: torch.Tensor, u: torch.Tensor, v: torch.Tensor):
    sigma = u @ weight @ v
    if float(sigma.detach().abs()) <= SN_EPS:
        return weight, sigma.detach() * 0
    return weight / sigma, sigma


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, power_iters: int = 1):
    """Divide a 2-D ``weight`` by its power-iteration estimate of the top singular value.

    Returns ``(normalized, u_next, sigma)``. ``u`` is the persistent left vector; a
    zero matrix is returned unchanged with ``sigma = 0``.
    """
    if weight.dim() != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {tuple(weight.shape)}")
    u, v = _power_iteration(weight, u, power_iters)
    normed, sigma = _divide(weight, u, v)
    return normed, u, sigma


class SpectralNorm(nn.Module):
    """Parametrization with persistent ``u``/``v`` buffers refreshed on every training forward.

    ``power_iters`` warm-started power iterations per forward; ``None`` takes the exact top
    singular pair instead (the converged fixed point), recomputed in both modes.
    """

    def __init__(self, weight: torch.Tensor, power_iters: int | None = 1):
        super().__init__()
        mat = weight.detach().reshape(weight.shape[0], -1)
        u = F.normalize(torch.randn(mat.shape[0], dtype=weight.dtype), dim=0, eps=SN_EPS)
        self.register_buffer("u", u)
        self.register_buffer("v", F.normalize(mat.t() @ u, dim=0, eps=SN_EPS))
        self.register_buffer("sigma", torch.ones((), dtype=weight.dtype))
        self.power_iters = power_iters

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        mat = weight.reshape(weight.shape[0], -1)
        if self.power_iters is None:
            u, v = _top_singular_pair(mat.detach())
        elif self.training:
            u, v = _power_iteration(mat, self.u, self.power_iters)
        else:
            u, v = self.u.clone(), self.v.clone()
        normed, sigma = _divide(mat, u, v)
        if self.training:
            with torch.no_grad():
                self.u.copy_(u)
                self.v.copy_(v)
                self.sigma.copy_(sigma.detach())
        return normed.view_as(weight)


def sn(module: nn.Module, name: str = "weight", power_iters: int | None = 1) -> nn.Module:
    parametrize.register_parametrization(module, name, SpectralNorm(getattr(module, name), power_iters))
    return module


def normalized_weights(module: nn.Module) -> dict[str, torch.Tensor]:
    """Effective (normalized) weight of every spectrally normalized layer, as 2-D matrices.

    Read in eval mode so the audit itself runs no power iteration.
    """
    was = module.training
    module.eval()
    out = {}
    try:
        with torch.no_grad():
            for name, m in module.named_modules():
                if parametrize.is_parametrized(m):
                    for pname in m.parametrizations:
                        w = getattr(m, pname).detach()
                        out[f"{name}.{pname}" if name else pname] = w.reshape(w.shape[0], -1)
    finally:
        module.train(was)
    return out


class ProjectionHead(nn.Module):
    """``psi(phi) + <e_y, phi>`` with one embedding table per label factor (rows summed)."""

    def __init__(self, features: int, label_sizes: Sequence[int], power_iters: int | None = 1):
        super().__init__()
        self.label_sizes = tuple(label_sizes)
        self.linear = sn(nn.Linear(features, 1), power_iters=power_iters)
        self.embeddings = nn.ModuleList(sn(nn.Embedding(n, features), power_iters=power_iters)
                                        for n in self.label_sizes)

    def embed(self, y: torch.Tensor) -> torch.Tensor:
        y = torch.as_tensor(y, dtype=torch.long)
        if y.dim() == 1:
            y = y.unsqueeze(1)
        if y.shape[1] != len(self.label_sizes):
            raise ValueError(f"labels have {y.shape[1]} factors, expected {len(self.label_sizes)}")
        for f, n in enumerate(self.label_sizes):
            if (y[:, f] < 0).any() or (y[:, f] >= n).any():
                raise ValueError(f"unknown label value in factor {f} (vocabulary size {n})")
        return sum(emb(y[:, f]) for f, emb in enumerate(self.embeddings))

    def forward(self, phi: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.linear(phi).squeeze(1) + (self.embed(y) * phi).sum(dim=1)


class DBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool, preactivation: bool,
                 power_iters: int | None = 1):
        super().__init__()
        self.conv1 = sn(nn.Conv2d(in_ch, out_ch, 3, padding=1), power_iters=power_iters)
        self.conv2 = sn(nn.Conv2d(out_ch, out_ch, 3, padding=1), power_iters=power_iters)
        self.skip = (sn(nn.Conv2d(in_ch, out_ch, 1), power_iters=power_iters)
                     if in_ch != out_ch or downsample else None)
        self.downsample = downsample
        self.preactivation = preactivation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(x) if self.preactivation else x
        h = self.conv2(F.relu(self.conv1(h)))
        if self.downsample:
            h = F.avg_pool2d(h, 2)
        s = x
        if self.skip is not None:
            s = self.skip(s)
        if self.downsample:
            s = F.avg_pool2d(s, 2)
        return h + s


@dataclass(frozen=True)
class ImageDiscriminatorConfig:
    base_width: int = 96
    widths: tuple[int, ...] = (1, 2, 4, 8, 16, 16)
    frames_judged: int = 4
    power_iters: int | None = 1


class ImageDiscriminator(nn.Module):
    """Residual frame critic; the last block keeps resolution, features are sum-pooled."""

    def __init__(self, cfg: ImageDiscriminatorConfig, label_sizes: Sequence[int]):
        super().__init__()
        if cfg.frames_judged < 1:
            raise ValueError("frames_judged must be >= 1")
        self.cfg = cfg
        chans = [3] + [cfg.base_width * c for c in cfg.widths]
        self.blocks = nn.ModuleList(
            DBlock(chans[i], chans[i + 1], downsample=i < len(cfg.widths) - 1, preactivation=i > 0,
                   power_iters=cfg.power_iters)
            for i in range(len(cfg.widths)))
        self.head = ProjectionHead(chans[-1], label_sizes, cfg.power_iters)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        h = frames
        for block in self.blocks:
            h = block(h)
        return F.relu(h).sum(dim=(2, 3))

    def forward(self, frames: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """``frames`` is ``[B, N, 3, H, W]``; returns one score per clip, averaged over its N frames."""
        b, n = frames.shape[:2]
        phi = self.features(frames.reshape(b * n, *frames.shape[2:]))
        y = torch.as_tensor(y, dtype=torch.long)
        y_rep = y.repeat_interleave(n, dim=0)
        return self.head(phi, y_rep).view(b, n).mean(dim=1)


@dataclass(frozen=True)
class VideoDiscriminatorConfig:
    base_width: int = 96
    widths: tuple[int, ...] = (1, 2, 4, 8)
    kernel: int = 4
    temporal_strides: tuple[int, ...] = (1, 2, 2, 2)
    power_iters: int | None = 1


class VideoDiscriminator(nn.Module):
    """3D conv stack (spatial stride 2 everywhere) followed by sum pooling and projection.

    The temporal kernel of a layer is clipped to ``t_in + 2`` so short clips keep at
    least one output step.
    """

    def __init__(self, cfg: VideoDiscriminatorConfig, label_sizes: Sequence[int], frames: int):
        super().__init__()
        if len(cfg.temporal_strides) != len(cfg.widths):
            raise ValueError("one temporal stride per layer required")
        self.cfg = cfg
        self.frames = frames
        chans = [3] + [cfg.base_width * c for c in cfg.widths]
        layers = []
        t = frames
        for i, st in enumerate(cfg.temporal_strides):
            kt = min(cfg.kernel, t + 2)
            layers.append(sn(nn.Conv3d(chans[i], chans[i + 1], (kt, cfg.kernel, cfg.kernel),
                                       stride=(st, 2, 2), padding=1), power_iters=cfg.power_iters))
            t = (t + 2 - kt) // st + 1
        self.convs = nn.ModuleList(layers)
        self.head = ProjectionHead(chans[-1], label_sizes, cfg.power_iters)

    def features(self, video: torch.Tensor) -> torch.Tensor:
        if video.shape[1] != self.frames:
            raise ValueError(f"clip has {video.shape[1]} frames, expected T={self.frames}")
        h = video.transpose(1, 2)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return h.sum(dim=(2, 3, 4))

    def forward(self, video: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(video), y)


def sample_frame_subset(frames: int, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """``n`` distinct frame indices drawn uniformly without replacement, sorted."""
    if not 1 <= n <= frames:
        raise ValueError(f"N must be in [1, {frames}], got {n}")
    return torch.randperm(frames, generator=generator)[:n].sort().values


def gather_frames(videos: torch.Tensor, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Independent frame subset per clip: ``[B, T, ...] -> [B, n, ...]``."""
    idx = torch.stack([sample_frame_subset(videos.shape[1], n, generator) for _ in range(videos.shape[0])])
    return videos[torch.arange(videos.shape[0])[:, None], idx]


def d_image_score(frames: torch.Tensor, y, disc: ImageDiscriminator) -> torch.Tensor:
    return disc(frames, y)


def d_video_score(video: torch.Tensor, y, disc: VideoDiscriminator) -> torch.Tensor:
    return disc(video, y)
