"""Temporal channel shift over [B, T, C, H, W] feature maps.

Channel layout after the shift: ``[0, n_future)`` holds frame ``t+1``,
``[n_future, n_future + n_past)`` holds frame ``t-1``, the rest is static.
Out-of-range neighbours are zero padded.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch
from torch import nn


@dataclass(frozen=True)
class ShiftSpec:
    frac_past: float | Fraction = Fraction(1, 8)
    frac_future: float | Fraction = Fraction(1, 8)

    def __post_init__(self):
        for name in ("frac_past", "frac_future"):
            value = getattr(self, name)
            if not 0 <= value < 0.5:
                raise ValueError(f"{name} must lie in [0, 1/2), got {value}")

    def counts(self, channels: int) -> tuple[int, int]:
        """Return ``(n_future, n_past)`` for a feature map with ``channels`` channels."""
        if channels < 1:
            raise ValueError(f"channels must be positive, got {channels}")
        n_past = int(channels * Fraction(self.frac_past))
        n_future = int(channels * Fraction(self.frac_future))
        return n_future, n_past


def _check(x: torch.Tensor) -> None:
    if x.dim() != 5:
        raise ValueError(f"expected a [B, T, C, H, W] tensor, got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ValueError(f"all dimensions must be positive, got shape {tuple(x.shape)}")


def shift_forward(x: torch.Tensor, spec: ShiftSpec) -> torch.Tensor:
    _check(x)
    n_future, n_past = spec.counts(x.shape[2])
    out = x.clone()
    if n_future:
        out[:, :, :n_future] = 0
        out[:, :-1, :n_future] = x[:, 1:, :n_future]
    if n_past:
        sl = slice(n_future, n_future + n_past)
        out[:, :, sl] = 0
        out[:, 1:, sl] = x[:, :-1, sl]
    return out


def shift_adjoint(g: torch.Tensor, spec: ShiftSpec) -> torch.Tensor:
    """Transpose of :func:`shift_forward`: each shifted group moves the other way in time."""
    _check(g)
    n_future, n_past = spec.counts(g.shape[2])
    out = g.clone()
    if n_future:
        out[:, :, :n_future] = 0
        out[:, 1:, :n_future] = g[:, :-1, :n_future]
    if n_past:
        sl = slice(n_future, n_future + n_past)
        out[:, :, sl] = 0
        out[:, :-1, sl] = g[:, 1:, sl]
    return out


class TemporalShift(nn.Module):
    """Shift applied to a flattened ``[B*T, C, H, W]`` tensor of ``frames`` per clip."""

    def __init__(self, frames: int, spec: ShiftSpec | None = None):
        super().__init__()
        self.frames = frames
        self.spec = spec if spec is not None else ShiftSpec()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bt, c, h, w = x.shape
        if bt % self.frames:
            raise ValueError(f"leading dim {bt} is not a multiple of frames={self.frames}")
        y = shift_forward(x.view(bt // self.frames, self.frames, c, h, w), self.spec)
        return y.view(bt, c, h, w)

    def extra_repr(self) -> str:
        return f"frames={self.frames}, past={self.spec.frac_past}, future={self.spec.frac_future}"
