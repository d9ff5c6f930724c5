"""scikit-learn style wrappers around the trainer and the block-matching flow."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig, check_mode
from .training import Trainer, estimate_flow
from .validation import check_label_array, check_video_array


class TSGAN(BaseEstimator):
    """Conditional video GAN estimator.

    ``fit(X, y)`` trains on clips ``X [n, T, 3, H, W]`` in [-1, 1] with integer labels ``y``
    (``[n]`` or ``[n, F]``); ``sample(y)`` draws new clips for the given labels.
    """

    def __init__(self, mode="TSB", steps=2000, batch_size=8, lr_g=5e-5, lr_d=2e-4, alpha=None,
                 label_sizes=None, model_overrides=None, random_state=0):
        self.mode = mode
        self.steps = steps
        self.batch_size = batch_size
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.alpha = alpha
        self.label_sizes = label_sizes
        self.model_overrides = model_overrides
        self.random_state = random_state

    def _configs(self, X, y):
        check_mode(self.mode)
        sizes = tuple(self.label_sizes) if self.label_sizes is not None else tuple(int(v) + 1 for v in y.max(axis=0))
        overrides = dict(self.model_overrides or {})
        overrides.update(mode=self.mode, resolution=X.shape[-1], frames=X.shape[1], label_sizes=sizes)
        mcfg = ModelConfig.desk(**overrides) if X.shape[-1] == 48 else ModelConfig(**overrides)
        tcfg = TrainConfig(lr_g=self.lr_g, lr_d=self.lr_d, batch_size=self.batch_size, steps=self.steps,
                           seed=self.random_state, alpha=self.alpha)
        return mcfg, tcfg

    def fit(self, X, y, callback=None):
        X = check_video_array(X)
        if X.shape[-1] != X.shape[-2]:
            raise ValueError("clips must be square")
        y = check_label_array(y, len(X), self.label_sizes)
        mcfg, tcfg = self._configs(X, y)
        self.trainer_ = Trainer(mcfg, tcfg, torch.from_numpy(X), torch.from_numpy(y))
        self.history_ = self.trainer_.run(self.steps, callback)
        self.label_sizes_ = mcfg.label_sizes
        return self

    def sample(self, y, random_state=None) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        y = check_label_array(y, len(np.asarray(y)), self.label_sizes_)
        seed = self.random_state if random_state is None else random_state
        gen = torch.Generator().manual_seed(seed)
        return self.trainer_.sample(torch.from_numpy(y), generator=gen).numpy()


class BlockMatchingFlow(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping clips to block-matching flow fields ``[n, T-1, 2, by, bx]``."""

    def __init__(self, block=8, radius=4):
        self.block = block
        self.radius = radius

    def fit(self, X, y=None):
        X = check_video_array(X, allow_range=False)
        if self.block < 1 or self.radius < 0:
            raise ValueError("block must be >= 1 and radius >= 0")
        if X.shape[1] < 2:
            raise ValueError("flow needs at least 2 frames")
        self.n_frames_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_frames_in_")
        X = check_video_array(X, frames=self.n_frames_in_, allow_range=False)
        return np.stack([estimate_flow(torch.from_numpy(v), self.block, self.radius) for v in X])
