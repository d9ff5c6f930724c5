"""Partitioned Gaussian latent space and its expansion into per-frame codes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

SUBSPACES = ("A", "B", "C")


@dataclass(frozen=True)
class LatentConfig:
    dims: tuple[int, int, int] = (20, 20, 80)
    sigmas: tuple[float, float, float] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if len(self.dims) != 3 or len(self.sigmas) != 3:
            raise ValueError("dims and sigmas need one entry per subspace (A, B, C)")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"subspace dims must be positive, got {self.dims}")

    @property
    def d(self) -> int:
        return sum(self.dims)

    def bounds(self, which: str) -> tuple[int, int]:
        if which not in SUBSPACES:
            raise ValueError(f"subspace must be one of {SUBSPACES}, got {which!r}")
        i = SUBSPACES.index(which)
        start = sum(self.dims[:i])
        return start, start + self.dims[i]

    def scale_vector(self) -> torch.Tensor:
        return torch.cat([torch.full((n,), float(s)) for n, s in zip(self.dims, self.sigmas)])


def _check_sigmas(cfg: LatentConfig, allow_zero: bool) -> None:
    for name, s in zip(SUBSPACES, cfg.sigmas):
        if s < 0 or (s == 0 and not allow_zero):
            raise ValueError(f"sigma_{name} must be positive, got {s}")


def sample_latent(cfg: LatentConfig, n: int | None = None, generator: torch.Generator | None = None,
                  dtype=torch.float32, allow_zero_sigma: bool = False) -> torch.Tensor:
    """Draw ``[Z_A, Z_B, Z_C]`` codes; shape ``[d]`` or ``[n, d]``."""
    _check_sigmas(cfg, allow_zero_sigma)
    shape = (cfg.d,) if n is None else (n, cfg.d)
    eps = torch.randn(shape, generator=generator, dtype=torch.float64)
    return (eps * cfg.scale_vector().to(torch.float64)).to(dtype)


def resample_subspace(z: torch.Tensor, which: str, cfg: LatentConfig,
                      generator: torch.Generator | None = None) -> torch.Tensor:
    """Redraw one subspace of ``z`` (``[d]`` or ``[n, d]``); other coordinates are copied."""
    start, stop = cfg.bounds(which)
    if z.shape[-1] != cfg.d:
        raise ValueError(f"code width {z.shape[-1]} != d={cfg.d}")
    _check_sigmas(cfg, False)
    out = z.clone()
    sigma = cfg.sigmas[SUBSPACES.index(which)]
    fresh = torch.randn(z.shape[:-1] + (stop - start,), generator=generator, dtype=torch.float64)
    out[..., start:stop] = (fresh * sigma).to(z.dtype)
    return out


def _lerp_list(a: torch.Tensor, b: torch.Tensor, steps: int) -> list[torch.Tensor]:
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if a.shape != b.shape:
        raise ValueError(f"endpoint shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = []
    for k in range(steps):
        alpha = k / (steps - 1)
        out.append(a.clone() if k == 0 else b.clone() if k == steps - 1 else (1 - alpha) * a + alpha * b)
    return out


def interpolate_latent(z1: torch.Tensor, z2: torch.Tensor, steps: int) -> list[torch.Tensor]:
    return _lerp_list(z1, z2, steps)


class SequenceGenerator(nn.Module):
    """FC + GRU cell that unrolls one latent code into ``T`` frame codes and appends e(y).

    ``label_sizes`` lists the vocabulary size of each label factor. A single factor
    uses one ``embed_dim``-wide table; several factors each get ``embed_dim // F``
    columns and their rows are concatenated.
    """

    def __init__(self, latent: LatentConfig = LatentConfig(), label_sizes: Sequence[int] = (10,),
                 embed_dim: int = 120, gru_hidden: int = 2048):
        super().__init__()
        if gru_hidden < 1:
            raise ValueError("gru_hidden must be positive")
        if embed_dim % len(label_sizes):
            raise ValueError(f"embed_dim={embed_dim} not divisible by {len(label_sizes)} label factors")
        self.latent = latent
        self.label_sizes = tuple(int(n) for n in label_sizes)
        self.embed_dim = embed_dim
        d = latent.d
        self.fc = nn.Linear(d, d)
        self.gru = nn.GRUCell(d, gru_hidden)
        self.proj = nn.Linear(gru_hidden, d) if gru_hidden != d else nn.Identity()
        width = embed_dim // len(self.label_sizes)
        self.embeddings = nn.ModuleList(nn.Embedding(n, width) for n in self.label_sizes)

    @property
    def out_dim(self) -> int:
        return self.latent.d + self.embed_dim

    def expand(self, z: torch.Tensor, frames: int) -> torch.Tensor:
        """``[B, d]`` codes -> ``[B, T, d]`` per-frame codes (zero initial hidden state)."""
        if frames < 1:
            raise ValueError(f"frames must be >= 1, got {frames}")
        squeeze = z.dim() == 1
        if squeeze:
            z = z.unsqueeze(0)
        z_fc = self.fc(z)
        h = z_fc.new_zeros(z.shape[0], self.gru.hidden_size)
        rows = []
        for _ in range(frames):
            h = self.gru(z_fc, h)
            rows.append(self.proj(h))
        seq = torch.stack(rows, dim=1)
        return seq[0] if squeeze else seq

    def check_labels(self, y: torch.Tensor) -> torch.Tensor:
        y = torch.as_tensor(y, dtype=torch.long)
        if y.dim() == 0 or (y.dim() == 1 and len(self.label_sizes) > 1):
            y = y.unsqueeze(0)
        if y.dim() == 1:
            y = y.unsqueeze(1)
        if y.shape[1] != len(self.label_sizes):
            raise ValueError(f"labels have {y.shape[1]} factors, expected {len(self.label_sizes)}")
        for f, n in enumerate(self.label_sizes):
            col = y[:, f]
            if (col < 0).any() or (col >= n).any():
                raise ValueError(f"unknown label value in factor {f} (vocabulary size {n})")
        return y

    def embed(self, y: torch.Tensor) -> torch.Tensor:
        """Label(s) -> ``[B, e]`` embedding rows."""
        y = self.check_labels(y)
        return torch.cat([emb(y[:, f]) for f, emb in enumerate(self.embeddings)], dim=1)

    def attach(self, seq: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        """Append the same embedding row to every frame code: ``[B, T, d] -> [B, T, d + e]``."""
        return torch.cat([seq, emb.unsqueeze(1).expand(-1, seq.shape[1], -1)], dim=2)

    def attach_label(self, seq: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        out = self.attach(seq, self.embed(y))
        return out[0] if squeeze else out

    def forward(self, z: torch.Tensor, y: torch.Tensor, frames: int) -> torch.Tensor:
        return self.attach(self.expand(z, frames), self.embed(y))


def expand_sequence(z: torch.Tensor, frames: int, seqgen: SequenceGenerator) -> torch.Tensor:
    return seqgen.expand(z, frames)


def attach_label(seq: torch.Tensor, y, seqgen: SequenceGenerator) -> torch.Tensor:
    return seqgen.attach_label(seq, y)


def interpolate_labels(y1, y2, steps: int, seqgen: SequenceGenerator) -> list[torch.Tensor]:
    e1, e2 = seqgen.embed(y1)[0], seqgen.embed(y2)[0]
    return _lerp_list(e1, e2, steps)
