"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
import torch


def check_video_array(X, frames: int | None = None, allow_range: bool = True) -> np.ndarray:
    """Validate a ``[n, T, 3, H, W]`` batch of clips and return it as float32 numpy."""
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ValueError(f"expected clips shaped [n, T, C, H, W], got {X.shape}")
    if X.shape[0] < 1 or min(X.shape) < 1:
        raise ValueError(f"empty dimension in clip batch of shape {X.shape}")
    if X.shape[2] != 3:
        raise ValueError(f"clips must have 3 colour channels, got {X.shape[2]}")
    if frames is not None and X.shape[1] != frames:
        raise ValueError(f"clips have {X.shape[1]} frames, expected {frames}")
    if not np.isfinite(X).all():
        raise ValueError("clips contain NaN or Inf")
    if allow_range and (X.min() < -1 - 1e-6 or X.max() > 1 + 1e-6):
        raise ValueError("clip values must lie in [-1, 1]")
    return X


def check_label_array(y, n: int, sizes=None) -> np.ndarray:
    """Return labels as ``[n, F]`` int64, checking them against vocabulary ``sizes`` if given."""
    y = np.asarray(y)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integer codes")
    y = y.astype(np.int64)
    if (y < 0).any():
        raise ValueError("labels must be non-negative")
    if sizes is not None:
        sizes = tuple(sizes)
        if y.shape[1] != len(sizes):
            raise ValueError(f"labels have {y.shape[1]} factors, expected {len(sizes)}")
        if (y >= np.asarray(sizes)[None, :]).any():
            raise ValueError("label code outside its vocabulary")
    return y
