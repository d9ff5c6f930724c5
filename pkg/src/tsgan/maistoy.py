"""Procedural shapes x colors x motions video dataset with held-out combination splits."""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("square", "triangle", "circle", "letter_L", "letter_B", "letter_M")
DEFAULT_SHAPES = ("square", "triangle", "circle", "letter_L", "letter_B")
REFERENCE_SHAPES = ("square", "triangle", "letter_L", "letter_B", "letter_M")
COLORS = ("red", "green", "blue", "yellow")
MOTIONS = ("right", "left", "up", "down")
FACTORS = ("shape", "color", "motion")

RGB = {"red": (230, 25, 25), "green": (25, 200, 25), "blue": (25, 25, 230), "yellow": (230, 230, 25)}
DIRECTION = {"right": (1, 0), "left": (-1, 0), "up": (0, -1), "down": (0, 1)}

REFERENCE_HELDOUT = (
    ("square", "red", "right"), ("square", "red", "left"),
    ("square", "red", "up"), ("square", "red", "down"),
    ("triangle", "blue", "right"), ("triangle", "blue", "left"),
    ("triangle", "blue", "up"), ("triangle", "blue", "down"),
    ("letter_M", "yellow", "right"), ("letter_M", "green", "right"),
    ("letter_M", "blue", "right"), ("letter_M", "red", "right"),
)

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SemanticLabel:
    shape: str
    color: str
    motion: str

    def __post_init__(self):
        for name, vocab in zip(FACTORS, (SHAPES, COLORS, MOTIONS)):
            if getattr(self, name) not in vocab:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}; expected one of {vocab}")

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.motion)


@dataclass(frozen=True)
class RenderParams:
    resolution: int = 48
    frames: int = 8
    velocity: float = 2.0
    scale_range: tuple[float, float] = (0.25, 0.35)
    background: tuple[int, int, int] = (128, 128, 128)
    velocity_jitter: float = 0.1
    jitter: bool = True
    triangle_filled: bool = True
    supersample: int = 4
    seed: int = 0


# -- rasterization ---------------------------------------------------------------

def _poly(draw, pts, cx, cy, s, fill):
    draw.polygon([(cx + x * s, cy + y * s) for x, y in pts], fill=fill)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: float, cy: float, s: float, fill,
                triangle_filled: bool = True):
    """Draw ``shape`` of side ``s`` centred at ``(cx, cy)`` (supersampled pixel units)."""
    h = s / 2
    if shape == "square":
        _poly(draw, [(-.5, -.5), (.5, -.5), (.5, .5), (-.5, .5)], cx, cy, s, fill)
    elif shape == "triangle":
        pts = [(cx, cy - h), (cx + h, cy + h), (cx - h, cy + h)]
        if triangle_filled:
            draw.polygon(pts, fill=fill)
        else:
            draw.line(pts + [pts[0]], fill=fill, width=max(1, int(s * 0.18)), joint="curve")
    elif shape == "circle":
        draw.ellipse([cx - h, cy - h, cx + h, cy + h], fill=fill)
    elif shape == "letter_L":
        _poly(draw, [(-.5, -.5), (-.15, -.5), (-.15, .2), (.5, .2), (.5, .5), (-.5, .5)], cx, cy, s, fill)
    elif shape == "letter_B":
        stroke = max(1, int(s * 0.2))
        _poly(draw, [(-.5, -.5), (-.2, -.5), (-.2, .5), (-.5, .5)], cx, cy, s, fill)
        draw.ellipse([cx - h, cy - h, cx + h * 0.8, cy], outline=fill, width=stroke)
        draw.ellipse([cx - h, cy, cx + h, cy + h], outline=fill, width=stroke)
    elif shape == "letter_M":
        _poly(draw, [(-.5, .5), (-.5, -.5), (-.25, -.5), (0, -.05), (.25, -.5), (.5, -.5), (.5, .5),
                     (.28, .5), (.28, -.05), (0, .35), (-.28, -.05), (-.28, .5)], cx, cy, s, fill)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def trajectory(label: SemanticLabel, rp: RenderParams) -> tuple[np.ndarray, float]:
    """Per-frame shape centres ``[T, 2]`` (x, y) and the shape side, from the render seed."""
    rng = np.random.default_rng(rp.seed)
    res, t = rp.resolution, rp.frames
    lo, hi = rp.scale_range
    side = res * (rng.uniform(lo, hi) if rp.jitter else (lo + hi) / 2)
    speed = rp.velocity + (rng.uniform(-rp.velocity_jitter, rp.velocity_jitter) if rp.jitter else 0.0)
    travel = abs(speed) * (t - 1)
    margin = side / 2 + 1
    if res - 2 * margin - travel < 0:
        raise ValueError(f"infeasible trajectory: {t} frames at {speed:.2f} px/frame with side {side:.1f} "
                         f"do not fit a {res}px frame")
    dx, dy = DIRECTION[label.motion]

    def pick(low, high):
        return rng.uniform(low, high) if rp.jitter else (low + high) / 2

    start = []
    for d in (dx, dy):
        if d == 0:
            start.append(pick(margin, res - margin))
        elif d > 0:
            start.append(pick(margin, res - margin - travel))
        else:
            start.append(pick(margin + travel, res - margin))
    steps = np.arange(t)[:, None] * speed * np.array([dx, dy], dtype=float)[None, :]
    return np.asarray(start)[None, :] + steps, side


def render_frames(label: SemanticLabel, rp: RenderParams) -> np.ndarray:
    """``[T, H, W, 3]`` uint8 frames."""
    centres, side = trajectory(label, rp)
    ss, res = rp.supersample, rp.resolution
    out = np.empty((rp.frames, res, res, 3), dtype=np.uint8)
    for i, (cx, cy) in enumerate(centres):
        img = Image.new("RGB", (res * ss, res * ss), tuple(rp.background))
        draw = ImageDraw.Draw(img)
        # pixel centres sit at +0.5 in PIL coordinates
        _draw_shape(draw, label.shape, cx * ss, cy * ss, side * ss, RGB[label.color], rp.triangle_filled)
        out[i] = np.asarray(img.resize((res, res), Image.BOX))
    return out


def to_video_tensor(frames: np.ndarray) -> np.ndarray:
    """uint8 ``[T, H, W, 3]`` -> float32 ``[T, 3, H, W]`` in [-1, 1]."""
    return (frames.astype(np.float32) / 127.5 - 1.0).transpose(0, 3, 1, 2)


def render_video(label: SemanticLabel, rp: RenderParams) -> np.ndarray:
    return to_video_tensor(render_frames(label, rp))


def shape_mask(frames: np.ndarray, background: Sequence[int], threshold: int = 24) -> np.ndarray:
    """Boolean ``[T, H, W]`` mask of pixels that differ from the background colour."""
    diff = np.abs(frames.astype(np.int16) - np.asarray(background, dtype=np.int16)).max(axis=-1)
    return diff > threshold


def mask_centroids(mask: np.ndarray) -> np.ndarray:
    """Per-frame ``(x, y)`` centroid of a ``[T, H, W]`` mask."""
    ys, xs = np.mgrid[: mask.shape[1], : mask.shape[2]]
    area = mask.sum(axis=(1, 2))
    if (area == 0).any():
        raise ValueError("empty shape mask in at least one frame")
    return np.stack([(mask * xs).sum(axis=(1, 2)) / area, (mask * ys).sum(axis=(1, 2)) / area], axis=1)


def check_motion(frames: np.ndarray, motion: str, background) -> bool:
    """True when the mean centroid displacement points in the labelled direction."""
    if frames.shape[0] < 2:
        return True
    c = mask_centroids(shape_mask(frames, background))
    step = np.diff(c, axis=0).mean(axis=0)
    d = np.asarray(DIRECTION[motion], dtype=float)
    return float(step @ d) > 0 and abs(float(step @ d[::-1])) < abs(float(step @ d))


# -- manifest ------------------------------------------------------------------

@dataclass
class DatasetSpec:
    shapes: tuple[str, ...] = DEFAULT_SHAPES
    colors: tuple[str, ...] = COLORS
    motions: tuple[str, ...] = MOTIONS
    videos_per_combination: int = 10
    resolution: int = 48
    frames: int = 8
    velocity: float = 2.0
    scale_range: tuple[float, float] = (0.25, 0.35)
    velocity_jitter: float = 0.1
    triangle_filled: bool = True
    seed: int = 0
    heldout: list | str | None = None

    def __post_init__(self):
        for name, vocab in (("shapes", SHAPES), ("colors", COLORS), ("motions", MOTIONS)):
            values = tuple(getattr(self, name))
            bad = [v for v in values if v not in vocab]
            if bad or not values:
                raise ValueError(f"invalid {name}: {bad or 'empty'}")
            setattr(self, name, values)
        self.scale_range = tuple(self.scale_range)
        if self.videos_per_combination < 1:
            raise ValueError("videos_per_combination must be >= 1")

    def render_params(self, seed: int) -> RenderParams:
        return RenderParams(resolution=self.resolution, frames=self.frames, velocity=self.velocity,
                            scale_range=self.scale_range, velocity_jitter=self.velocity_jitter,
                            triangle_filled=self.triangle_filled, seed=seed)

    def heldout_combinations(self) -> list[tuple[str, str, str]]:
        if self.heldout is None:
            return []
        if self.heldout == "reference":
            return list(REFERENCE_HELDOUT)
        if self.heldout == "pattern":
            return heldout_pattern(self.shapes, self.colors, self.motions)
        return [tuple(c) for c in self.heldout]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


@dataclass
class VideoRecord:
    id: str
    path: str
    label: SemanticLabel
    frames: int
    resolution: int
    seed: int
    split: str = "train"

    def to_dict(self) -> dict:
        return {"id": self.id, "path": self.path, "label": dataclasses.asdict(self.label),
                "T": self.frames, "resolution": self.resolution, "seed": self.seed, "split": self.split}

    @classmethod
    def from_dict(cls, d: dict) -> "VideoRecord":
        return cls(d["id"], d["path"], SemanticLabel(**d["label"]), d["T"], d["resolution"], d["seed"],
                   d.get("split", "train"))


@dataclass
class DatasetManifest:
    records: list[VideoRecord]
    vocabulary: dict[str, list[str]]
    global_seed: int = 0
    heldout_combinations: list[tuple[str, str, str]] = field(default_factory=list)
    render: dict = field(default_factory=dict)
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in manifest")

    def __len__(self):
        return len(self.records)

    def combinations(self) -> list[tuple[str, str, str]]:
        return [r.label.as_tuple() for r in self.records]

    def subset(self, records: list[VideoRecord]) -> "DatasetManifest":
        return dataclasses.replace(self, records=records)

    def split(self, name: str) -> "DatasetManifest":
        return self.subset([r for r in self.records if r.split == name])

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "global_seed": self.global_seed,
            "vocabulary": {k: list(v) for k, v in self.vocabulary.items()},
            "heldout_combinations": [list(c) for c in self.heldout_combinations],
            "render": self.render,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != MANIFEST_VERSION:
            raise ValueError(f"manifest format_version {version} unsupported (expected {MANIFEST_VERSION})")
        return cls(records=[VideoRecord.from_dict(r) for r in d["records"]],
                   vocabulary={k: list(v) for k, v in d["vocabulary"].items()},
                   global_seed=d.get("global_seed", 0),
                   heldout_combinations=[tuple(c) for c in d.get("heldout_combinations", [])],
                   render=d.get("render", {}), format_version=version)

    def save(self, root) -> Path:
        path = Path(root) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        return cls.from_dict(json.loads((Path(root) / "manifest.json").read_text()))


def heldout_pattern(shapes: Sequence[str], colors: Sequence[str], motions: Sequence[str]) -> list:
    """Every motion of (first shape, first colour) and of (second shape, third colour), plus the
    first motion of the last shape in every colour."""
    out = [(shapes[0], colors[0], m) for m in motions]
    if len(shapes) > 1:
        out += [(shapes[1], colors[2 % len(colors)], m) for m in motions]
    out += [(shapes[-1], c, motions[0]) for c in reversed(colors)]
    seen, unique = set(), []
    for c in out:
        if c not in seen:
            seen.add(c)
            unique.append(c)
    return unique


def _video_seed(global_seed: int, combo_index: int, replicate: int) -> int:
    return int(np.random.SeedSequence([global_seed, combo_index, replicate]).generate_state(1)[0])


def build_dataset(spec: DatasetSpec, root, overwrite: bool = False) -> DatasetManifest:
    """Render every combination ``videos_per_combination`` times and write PNG frames + manifest."""
    root = Path(root)
    if (root / "manifest.json").exists() and not overwrite:
        raise FileExistsError(f"{root / 'manifest.json'} exists; pass overwrite to replace it")
    records = []
    combos = list(itertools.product(spec.shapes, spec.colors, spec.motions))
    for ci, (shape, color, motion) in enumerate(combos):
        label = SemanticLabel(shape, color, motion)
        for rep in range(spec.videos_per_combination):
            seed = _video_seed(spec.seed, ci, rep)
            rp = spec.render_params(seed)
            frames = render_frames(label, rp)
            if not check_motion(frames, motion, rp.background):
                raise RuntimeError(f"rendered motion does not match label {label} (seed {seed})")
            vid = f"{shape}-{color}-{motion}-{rep:03d}"
            rel = f"videos/{vid}"
            out_dir = root / rel
            try:
                out_dir.mkdir(parents=True, exist_ok=True)
                for t, frame in enumerate(frames):
                    Image.fromarray(frame).save(out_dir / f"frame_{t:03d}.png")
            except OSError as exc:
                raise OSError(f"failed writing frames to {out_dir}: {exc}") from exc
            records.append(VideoRecord(vid, rel, label, spec.frames, spec.resolution, seed))
    manifest = DatasetManifest(
        records=records,
        vocabulary={"shape": list(spec.shapes), "color": list(spec.colors), "motion": list(spec.motions)},
        global_seed=spec.seed, render=spec.to_dict())
    held = spec.heldout_combinations()
    if held:
        train, heldout = generalization_split(manifest, held)
        manifest = manifest.subset(train.records + heldout.records)
        manifest.heldout_combinations = list(train.heldout_combinations)
    manifest.save(root)
    return manifest


def generalization_split(manifest: DatasetManifest, held_out: Iterable) -> tuple[DatasetManifest, DatasetManifest]:
    """Partition records by label combination; returns (train, heldout) with split tags set."""
    held = []
    vocab = manifest.vocabulary
    for combo in held_out:
        combo = tuple(combo)
        if len(combo) != 3 or any(v not in vocab[f] for f, v in zip(FACTORS, combo)):
            raise ValueError(f"held-out combination {combo} is not in the dataset vocabulary")
        held.append(combo)
    held_set = set(held)
    train, heldout = [], []
    for r in manifest.records:
        is_held = r.label.as_tuple() in held_set
        rec = dataclasses.replace(r, split="heldout" if is_held else "train")
        (heldout if is_held else train).append(rec)
    meta = dict(heldout_combinations=held)
    return (dataclasses.replace(manifest, records=train, **meta),
            dataclasses.replace(manifest, records=heldout, **meta))


# -- loading -------------------------------------------------------------------

class LabelSpace:
    """Integer encoding of selected label factors against a manifest vocabulary."""

    def __init__(self, vocabulary: dict[str, Sequence[str]], factors: Sequence[str] = FACTORS):
        bad = [f for f in factors if f not in FACTORS]
        if bad:
            raise ValueError(f"unknown label factors {bad}")
        self.factors = tuple(factors)
        self.vocabulary = {f: list(vocabulary[f]) for f in self.factors}

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(self.vocabulary[f]) for f in self.factors)

    @property
    def num_combinations(self) -> int:
        return int(np.prod(self.sizes))

    def encode(self, label: SemanticLabel) -> list[int]:
        return [self.vocabulary[f].index(getattr(label, f)) for f in self.factors]

    def decode(self, codes: Sequence[int]) -> dict[str, str]:
        return {f: self.vocabulary[f][int(c)] for f, c in zip(self.factors, codes)}

    def flat(self, y: np.ndarray) -> np.ndarray:
        """Factor codes ``[n, F]`` -> combination index ``[n]``."""
        y = np.asarray(y).reshape(len(y), -1)
        return np.ravel_multi_index(tuple(y.T), self.sizes)

    def unflat(self, idx: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(idx), self.sizes), axis=1)

    def all_codes(self) -> np.ndarray:
        return self.unflat(np.arange(self.num_combinations))


def read_frames(path) -> np.ndarray:
    files = sorted(Path(path).glob("frame_*.png"))
    if not files:
        raise FileNotFoundError(f"no frame_*.png files under {path}")
    return np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])


def ingest_clip(path, frames: int, resize: int | None = None, crop: int | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Random ``frames``-long window, optional resize + random crop, scaled to [-1, 1] ``[T, 3, H, W]``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    src = read_frames(path) if not isinstance(path, np.ndarray) else path
    n = src.shape[0]
    if n < frames:
        raise ValueError(f"clip {path if not isinstance(path, np.ndarray) else ''} has {n} frames, need {frames}")
    start = int(rng.integers(0, n - frames + 1))
    clip = src[start: start + frames]
    if resize is not None:
        clip = np.stack([np.asarray(Image.fromarray(f).resize((resize, resize), Image.BILINEAR)) for f in clip])
    if crop is not None:
        h, w = clip.shape[1:3]
        if crop > h or crop > w:
            raise ValueError(f"crop {crop} larger than frame {h}x{w}")
        oy = int(rng.integers(0, h - crop + 1))
        ox = int(rng.integers(0, w - crop + 1))
        clip = clip[:, oy: oy + crop, ox: ox + crop]
    return to_video_tensor(clip)


def load_videos(root, manifest: DatasetManifest | None = None, factors: Sequence[str] = FACTORS,
                split: str | None = None) -> tuple[np.ndarray, np.ndarray, LabelSpace, list[VideoRecord]]:
    """Load clips as ``[n, T, 3, H, W]`` float32 plus ``[n, F]`` integer labels."""
    root = Path(root)
    manifest = manifest if manifest is not None else DatasetManifest.load(root)
    if split is not None:
        manifest = manifest.split(split)
    space = LabelSpace(manifest.vocabulary, factors)
    x = np.stack([to_video_tensor(read_frames(root / r.path)) for r in manifest.records])
    y = np.asarray([space.encode(r.label) for r in manifest.records], dtype=np.int64)
    return x, y, space, list(manifest.records)
