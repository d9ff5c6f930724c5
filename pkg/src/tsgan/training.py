"""Adversarial training: hinge losses, motion constraint, train loop and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import sys
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig
from .discriminators import ImageDiscriminator, VideoDiscriminator, gather_frames
from .generator import VideoGenerator
from .latent import sample_latent

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSGANCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class CheckpointError(RuntimeError):
    pass


def _scores(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(list(x), dtype=torch.float64)
    if t.numel() == 0:
        raise ValueError("score list is empty")
    return t.reshape(-1)


def hinge_d_loss(real_scores, fake_scores) -> torch.Tensor:
    real, fake = _scores(real_scores), _scores(fake_scores)
    return F.relu(1 - real).mean() + F.relu(1 + fake).mean()


def hinge_g_loss(fake_scores) -> torch.Tensor:
    return -_scores(fake_scores).mean()


def generator_total_loss(l_g, l_m, alpha: float):
    return l_g + alpha * (1 - l_m)


# -- motion constraint ---------------------------------------------------------

def _displacements(radius: int) -> list[tuple[int, int]]:
    # nearest-to-zero first so argmin ties resolve toward zero motion
    d = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(d, key=lambda p: (abs(p[0]) + abs(p[1]), max(abs(p[0]), abs(p[1])), p[1], p[0]))


def _cost_volume(video: torch.Tensor, block: int, radius: int) -> tuple[torch.Tensor, list]:
    """Mean absolute difference per block and displacement: ``[..., D, T-1, nby, nbx]``."""
    t, h, w = video.shape[-4], video.shape[-2], video.shape[-1]
    if t < 2:
        raise ValueError("flow needs at least 2 frames")
    if block > h or block > w or block < 1:
        raise ValueError(f"block {block} does not fit a {h}x{w} frame")
    nby, nbx = h // block, w // block
    cur = video[..., :-1, :, : nby * block, : nbx * block]
    nxt = video[..., 1:, :, :, :]
    pad = F.pad(nxt.reshape(-1, *nxt.shape[-3:]), (radius, radius, radius, radius))
    pad = pad.reshape(*nxt.shape[:-2], h + 2 * radius, w + 2 * radius)
    ys = torch.arange(nby) * block
    xs = torch.arange(nbx) * block
    costs = []
    disps = _displacements(radius)
    for dx, dy in disps:
        shifted = pad[..., radius + dy: radius + dy + nby * block, radius + dx: radius + dx + nbx * block]
        diff = (cur - shifted).abs().mean(dim=-3)
        lead = diff.shape[:-2]
        c = diff.reshape(-1, 1, nby * block, nbx * block)
        c = F.avg_pool2d(c, block).reshape(*lead, nby, nbx)
        valid = (((ys + dy) >= 0) & ((ys + dy + block) <= h))[:, None] & \
                (((xs + dx) >= 0) & ((xs + dx + block) <= w))[None, :]
        costs.append(c.masked_fill(~valid, math.inf))
    return torch.stack(costs, dim=-4), disps


def estimate_flow(video, block: int = 8, radius: int = 4) -> np.ndarray:
    """Exhaustive block matching (SAD) between consecutive frames of a ``[T, C, H, W]`` clip.

    Returns ``[T-1, 2, H // block, W // block]`` displacements ``(dx, dy)`` of each block of
    frame ``t`` within frame ``t+1``; ties go to the smallest displacement.
    """
    v = torch.as_tensor(np.asarray(video, dtype=np.float64))
    costs, disps = _cost_volume(v, block, radius)
    best = costs.argmin(dim=-4)
    table = torch.tensor(disps, dtype=torch.float64)
    flow = table[best]
    return flow.permute(0, 3, 1, 2).numpy()


def soft_flow(videos: torch.Tensor, block: int = 8, radius: int = 4, temperature: float = 0.05) -> torch.Tensor:
    """Differentiable block matching: softmin-weighted displacement, ``[B, T-1, 2, nby, nbx]``."""
    costs, disps = _cost_volume(videos, block, radius)
    weights = torch.softmax(-costs / temperature, dim=-4)
    table = torch.tensor(disps, dtype=videos.dtype)
    flow = torch.einsum("bdthw,dk->btkhw", weights, table)
    return flow


def motion_similarity(real_flows, fake_flows, real_labels, fake_labels) -> torch.Tensor:
    """Mean cosine similarity over (fake i, real j) pairs whose labels match.

    Pairs involving a zero-norm flow are skipped; with no counted pair the result is 1.
    """
    rf = torch.as_tensor(real_flows)
    ff = torch.as_tensor(fake_flows, dtype=rf.dtype)
    rf, ff = rf.reshape(rf.shape[0], -1), ff.reshape(ff.shape[0], -1)
    if rf.shape[1] != ff.shape[1]:
        raise ValueError("real and generated flows have different geometry")
    ry = torch.as_tensor(np.asarray(real_labels)).reshape(rf.shape[0], -1)
    fy = torch.as_tensor(np.asarray(fake_labels)).reshape(ff.shape[0], -1)
    match = (fy[:, None, :] == ry[None, :, :]).all(dim=-1)
    rn, fn = rf.norm(dim=1), ff.norm(dim=1)
    match = match & (fn[:, None] > 0) & (rn[None, :] > 0)
    count = int(match.sum())
    if count == 0:
        return torch.ones((), dtype=rf.dtype)
    cos = (ff @ rf.t()) / (fn[:, None].clamp_min(1e-30) * rn[None, :].clamp_min(1e-30))
    return cos[match].sum() / count


# -- training loop -------------------------------------------------------------

def diversity(videos: torch.Tensor) -> float:
    return float(videos.detach().std(dim=0, unbiased=False).mean())


class Trainer:
    """Owns the generator, both critics, their optimizers, the RNG and the step counter."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, videos: torch.Tensor,
                 labels: torch.Tensor, run_id: str = "run"):
        self.model_cfg = model_cfg
        self.train_cfg = train_cfg
        self.run_id = run_id
        self.videos = torch.as_tensor(videos, dtype=torch.float32)
        labels = torch.as_tensor(labels, dtype=torch.long)
        self.labels = labels.unsqueeze(1) if labels.dim() == 1 else labels
        if self.videos.dim() != 5 or self.videos.shape[1] != model_cfg.frames:
            raise ValueError(f"videos must be [n, {model_cfg.frames}, 3, H, W], got {tuple(self.videos.shape)}")
        if self.labels.shape[0] != self.videos.shape[0]:
            raise ValueError("videos and labels differ in length")

        torch.manual_seed(train_cfg.seed)
        sizes = model_cfg.label_sizes
        self.generator = VideoGenerator(model_cfg.latent_config(), model_cfg.generator_config(), sizes,
                                        model_cfg.embed_dim, model_cfg.gru_hidden)
        self.d_image = ImageDiscriminator(model_cfg.image_disc_config(), sizes)
        self.d_video = VideoDiscriminator(model_cfg.video_disc_config(), sizes, model_cfg.frames)
        tc = train_cfg
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=tc.lr_g, betas=tc.betas, eps=tc.adam_eps)
        self.opt_d = torch.optim.Adam(list(self.d_image.parameters()) + list(self.d_video.parameters()),
                                      lr=tc.lr_d, betas=tc.betas, eps=tc.adam_eps)
        self.rng = torch.Generator().manual_seed(train_cfg.seed + 1)
        self.step = 0
        self.alpha = tc.motion_weight(model_cfg.mode)

    # -- pieces
    def _real_batch(self):
        idx = torch.randint(self.videos.shape[0], (self.train_cfg.batch_size,), generator=self.rng)
        return self.videos[idx], self.labels[idx]

    def _latent(self, n: int) -> torch.Tensor:
        return sample_latent(self.generator.latent, n, generator=self.rng)

    def _critic_scores(self, videos, y):
        frames = gather_frames(videos, self.model_cfg.frames_judged, self.rng)
        return self.d_image(frames, y), self.d_video(videos, y)

    def _set_d_grad(self, flag: bool):
        for p in list(self.d_image.parameters()) + list(self.d_video.parameters()):
            p.requires_grad_(flag)

    def train_step(self) -> dict:
        self.generator.train()
        self.d_image.train()
        self.d_video.train()
        metrics: dict = {}

        self._set_d_grad(True)
        for _ in range(self.train_cfg.d_steps_per_g):
            real, y = self._real_batch()
            with torch.no_grad():
                fake = self.generator(self._latent(real.shape[0]), y)
            ri, rv = self._critic_scores(real, y)
            fi, fv = self._critic_scores(fake, y)
            loss_di, loss_dv = hinge_d_loss(ri, fi), hinge_d_loss(rv, fv)
            loss_d = loss_di + loss_dv
            self._check_finite("loss_d", loss_d)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()

        self._set_d_grad(False)
        real, y = self._real_batch()
        fake = self.generator(self._latent(real.shape[0]), y)
        fi, fv = self._critic_scores(fake, y)
        loss_gi, loss_gv = hinge_g_loss(fi), hinge_g_loss(fv)
        loss_g = loss_gi + loss_gv
        l_m = None
        if self.alpha > 0:
            tc = self.train_cfg
            with torch.no_grad():
                rflow = soft_flow(real, tc.flow_block, tc.flow_radius, tc.flow_temperature)
            fflow = soft_flow(fake, tc.flow_block, tc.flow_radius, tc.flow_temperature)
            l_m = motion_similarity(rflow, fflow, y, y)
            loss_g = generator_total_loss(loss_g, l_m, self.alpha)
        self._check_finite("loss_g", loss_g)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()
        self._set_d_grad(True)

        self.step += 1
        metrics.update(step=self.step, loss_d=loss_d.item(), loss_d_image=loss_di.item(),
                       loss_d_video=loss_dv.item(), loss_g=loss_g.item(), loss_g_image=loss_gi.item(),
                       loss_g_video=loss_gv.item(), sn_raw_sigma_max=self.max_sn_sigma(),
                       diversity=diversity(fake))
        if l_m is not None:
            metrics["motion_similarity"] = l_m.item()
        return metrics

    def _check_finite(self, name: str, value: torch.Tensor):
        if not torch.isfinite(value).all():
            snapshot = {"step": self.step, "loss": name, "value": value.item(),
                        "rng_state": self.rng.get_state().tolist()}
            raise TrainingDivergedError(f"{name} is not finite at step {self.step}", snapshot)

    def max_sn_sigma(self) -> float:
        """Largest power-iteration estimate of an unnormalized critic weight's top singular value."""
        sigmas = [float(b) for n, b in list(self.d_image.named_buffers()) + list(self.d_video.named_buffers())
                  if n.endswith(".sigma")]
        return max(sigmas) if sigmas else 0.0

    def run(self, steps: int, callback: Callable[[dict], None] | None = None) -> list[dict]:
        """Train until ``self.step == steps``; returns the metric records produced."""
        history = []
        while self.step < steps:
            m = self.train_step()
            history.append(m)
            if callback is not None:
                callback(m)
        return history

    # -- sampling
    @torch.no_grad()
    def sample(self, labels, generator: torch.Generator | None = None, train_stats: bool = False) -> torch.Tensor:
        y = self.generator.sequence.check_labels(labels)
        z = sample_latent(self.generator.latent, y.shape[0], generator=generator)
        was = self.generator.training
        self.generator.train(train_stats)
        try:
            return self.generator(z, y)
        finally:
            self.generator.train(was)

    # -- persistence
    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "run_id": self.run_id,
            "step": self.step,
            "model_config": self.model_cfg.to_dict(),
            "train_config": self.train_cfg.to_dict(),
            "generator": self.generator.state_dict(),
            "d_image": self.d_image.state_dict(),
            "d_video": self.d_video.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.get_state(),
        }

    def load_state_dict(self, state: dict):
        self.generator.load_state_dict(state["generator"])
        self.d_image.load_state_dict(state["d_image"])
        self.d_video.load_state_dict(state["d_video"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.rng.set_state(state["rng"])
        self.step = int(state["step"])
        self.run_id = state.get("run_id", self.run_id)

    def save(self, path) -> Path:
        return save_checkpoint(self.state_dict(), path)

    @classmethod
    def from_checkpoint(cls, path, videos=None, labels=None, train_cfg: TrainConfig | None = None) -> "Trainer":
        """Rebuild a trainer; without data it can only sample."""
        state = load_checkpoint(path)
        model_cfg = ModelConfig.from_dict(state["model_config"])
        tcfg = train_cfg or TrainConfig.from_dict(state["train_config"])
        if videos is None:
            r = model_cfg.resolution
            videos = torch.zeros(1, model_cfg.frames, 3, r, r)
            labels = torch.zeros(1, len(model_cfg.label_sizes), dtype=torch.long)
        trainer = cls(model_cfg, tcfg, videos, labels, state.get("run_id", "run"))
        trainer.load_state_dict(state)
        return trainer


def _canonical(obj):
    # fresh tensor storage and interned strings: pickle memoizes by object identity, so this
    # makes equal states serialize to equal bytes regardless of how they were built
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone(memory_format=torch.contiguous_format)
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    return obj


def save_checkpoint(state: dict, path) -> Path:
    """Write ``state`` behind a versioned header carrying the payload length and SHA-256."""
    buf = io.BytesIO()
    torch.save(_canonical(state), buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(payload), hashlib.sha256(payload).digest())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header (corrupt or truncated)")
    magic, version, length, digest = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    payload = data[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header says {length} (truncated)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: payload checksum mismatch (corrupt)")
    return torch.load(io.BytesIO(payload), weights_only=False)


class MetricsLog:
    """Append-only line-delimited JSON metric records."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict):
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def truncate_after(self, step: int):
        """Drop records beyond ``step`` (used when resuming from an older checkpoint)."""
        kept = [r for r in self.read() if r.get("step", 0) <= step]
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept))
