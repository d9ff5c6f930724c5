"""Sample-quality metrics: S3 with its classifier pipeline, IS, FID, retrieval and probes."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.neighbors import NearestNeighbors
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .latent import SUBSPACES, interpolate_labels, interpolate_latent, resample_subspace
from .validation import check_video_array

# -- S3 ------------------------------------------------------------------------


@dataclass(frozen=True)
class AccuracyTriple:
    """Percent accuracies: synthetic->real, real->synthetic, real->real."""

    SeR: float
    ReS: float
    ReR: float

    def __post_init__(self):
        for name in ("SeR", "ReS", "ReR"):
            v = getattr(self, name)
            if not 0 <= v <= 100:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")


def s3(triple: AccuracyTriple | Sequence[float]) -> float:
    """``sqrt((SeR/ReR)^2 * (ReS/ReR))``."""
    ser, res, rer = (triple.SeR, triple.ReS, triple.ReR) if isinstance(triple, AccuracyTriple) else triple
    if rer <= 0:
        raise ValueError("ReR must be positive")
    if ser < 0 or res < 0:
        raise ValueError("accuracies must be non-negative")
    return math.sqrt((ser / rer) ** 2 * (res / rer))


class ClassifierDivergedError(RuntimeError):
    pass


class _Video3DNet(nn.Module):
    def __init__(self, widths: Sequence[int], n_classes: int):
        super().__init__()
        layers, c_in = [], 3
        for i, w in enumerate(widths):
            layers += [nn.Conv3d(c_in, w, 3, padding=1), nn.BatchNorm3d(w), nn.ReLU(inplace=True),
                       nn.MaxPool3d((1, 2, 2) if i == 0 else 2, ceil_mode=True)]
            c_in = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, n_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x.transpose(1, 2)).mean(dim=(2, 3, 4))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class VideoClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small 3D-conv action classifier; ``transform`` returns penultimate-layer features."""

    def __init__(self, widths=(8, 16, 32, 64), epochs=30, batch_size=16, lr=1e-3, weight_decay=1e-4,
                 random_state=0):
        self.widths = widths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X = torch.as_tensor(check_video_array(X), dtype=torch.float32)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("y must be a 1-D array with one label per clip")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        y_idx = torch.as_tensor(y_idx, dtype=torch.long)
        torch.manual_seed(self.random_state)
        self.net_ = _Video3DNet(self.widths, len(self.classes_))
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(self.random_state)
        self.loss_curve_ = []
        self.net_.train()
        for _ in range(self.epochs):
            order = torch.randperm(len(X), generator=gen)
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start: start + self.batch_size]
                if len(idx) < 2:
                    continue
                loss = F.cross_entropy(self.net_(X[idx]), y_idx[idx])
                if not torch.isfinite(loss):
                    raise ClassifierDivergedError(f"classifier loss became {loss.item()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_curve_.append(total / len(X))
        self.net_.eval()
        return self

    @torch.no_grad()
    def _batched(self, X, fn):
        check_is_fitted(self, "net_")
        X = torch.as_tensor(check_video_array(X), dtype=torch.float32)
        return torch.cat([fn(X[i: i + 64]) for i in range(0, len(X), 64)]).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return self._batched(X, lambda b: torch.softmax(self.net_(b).double(), dim=1))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        return self._batched(X, lambda b: self.net_.features(b).double())

    def fingerprint(self) -> str:
        params = json.dumps({k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
                            sort_keys=True)
        return hashlib.sha256(params.encode()).hexdigest()[:16]


# generators used by the S3 pipeline: callables (labels [n, F], rng) -> videos [n, T, 3, H, W]

class ReplayGenerator:
    """Returns real clips carrying the requested labels.

    Each label keeps a cursor over its pool that persists across calls, so successive requests
    consume disjoint clips (wrapping around once a pool is exhausted).
    """

    def __init__(self, X, y):
        self.X = np.asarray(X)
        self.y = np.asarray(y).reshape(len(self.X), -1)
        self._cursor: dict[tuple, int] = {}

    @classmethod
    def for_splits(cls, real_train, real_test) -> "ReplayGenerator":
        """Replays the test clips on the first request and the training clips on the second,
        matching the order in which :func:`s3_pipeline` asks for them."""
        (x_tr, y_tr), (x_te, y_te) = real_train, real_test
        y_tr = np.asarray(y_tr).reshape(len(y_tr), -1)
        y_te = np.asarray(y_te).reshape(len(y_te), -1)
        return cls(np.concatenate([x_te, x_tr]), np.concatenate([y_te, y_tr]))

    def __call__(self, labels, rng: np.random.Generator | None = None) -> np.ndarray:
        labels = np.asarray(labels).reshape(len(labels), -1)
        out = []
        for lab in labels:
            key = tuple(lab)
            pool = np.flatnonzero((self.y == lab).all(axis=1))
            if len(pool) == 0:
                raise ValueError(f"no real clip carries label {key}")
            i = self._cursor.get(key, 0)
            out.append(self.X[pool[i % len(pool)]])
            self._cursor[key] = i + 1
        return np.stack(out)


class ConstantGenerator:
    def __init__(self, shape: Sequence[int], value: float = 0.0):
        self.shape = tuple(shape)
        self.value = value

    def __call__(self, labels, rng=None) -> np.ndarray:
        return np.full((len(labels),) + self.shape, self.value, dtype=np.float32)


class LabelShuffledGenerator:
    """Wraps a generator and feeds it a random permutation of the requested labels."""

    def __init__(self, base: Callable, seed: int = 0):
        self.base = base
        self.seed = seed

    def __call__(self, labels, rng=None) -> np.ndarray:
        perm = np.random.default_rng(self.seed).permutation(len(labels))
        return self.base(np.asarray(labels)[perm], rng)


class CheckpointGenerator:
    """Samples a trained model (eval-mode statistics) in fixed-size chunks."""

    def __init__(self, trainer, seed: int = 0, chunk: int = 16):
        self.trainer = trainer
        self.seed = seed
        self.chunk = chunk

    def __call__(self, labels, rng=None) -> np.ndarray:
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        gen = torch.Generator().manual_seed(self.seed)
        parts = [self.trainer.sample(labels[i: i + self.chunk], generator=gen)
                 for i in range(0, len(labels), self.chunk)]
        return torch.cat(parts).numpy()


@dataclass
class S3Result:
    triple: AccuracyTriple
    s3: float
    classifier_fingerprint: str
    real_classifier: VideoClassifier = field(repr=False)
    synth_classifier: VideoClassifier = field(repr=False)


def _flat_labels(y, sizes: Sequence[int] | None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        return y
    if sizes is None:
        sizes = tuple(int(v) + 1 for v in y.max(axis=0))
    return np.ravel_multi_index(tuple(y.T), tuple(sizes))


def s3_pipeline(real_train, real_test, generator: Callable, classifier_params: dict | None = None,
                label_sizes: Sequence[int] | None = None, seed: int = 0) -> S3Result:
    """Train on real / evaluate on real and generated, then train on generated / evaluate on real.

    Generated sets reuse the real label lists, so they match the real splits in size and balance.
    """
    (x_tr, y_tr), (x_te, y_te) = real_train, real_test
    params = dict(classifier_params or {})
    rng = np.random.default_rng(seed)
    f_tr, f_te = _flat_labels(y_tr, label_sizes), _flat_labels(y_te, label_sizes)

    real_clf = VideoClassifier(**params).fit(x_tr, f_tr)
    rer = 100.0 * real_clf.score(x_te, f_te)
    g_te = generator(np.asarray(y_te), rng)
    res = 100.0 * real_clf.score(g_te, f_te)
    g_tr = generator(np.asarray(y_tr), rng)
    syn_clf = VideoClassifier(**params).fit(g_tr, f_tr)
    ser = 100.0 * syn_clf.score(x_te, f_te)
    triple = AccuracyTriple(ser, res, rer)
    return S3Result(triple, s3(triple), real_clf.fingerprint(), real_clf, syn_clf)


def stratified_split(y, test_fraction: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, test) splitting every label combination by ``test_fraction``."""
    y = np.asarray(y).reshape(len(y), -1)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for key in np.unique(y, axis=0):
        idx = np.flatnonzero((y == key).all(axis=1))
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        test += idx[:n_test].tolist()
        train += idx[n_test:].tolist()
    return np.sort(train), np.sort(test)


# -- IS / FID ------------------------------------------------------------------

def inception_score(probs, splits: int = 10) -> tuple[float, float]:
    """Mean and std over ``splits`` chunks of ``exp(E_x KL(p(y|x) || p(y)))``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("rows must be non-negative probability vectors summing to 1")
    if splits < 1 or len(p) % splits:
        raise ValueError(f"{len(p)} rows are not divisible into {splits} splits")
    scores = []
    for part in np.split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        # KL is non-negative; values at rounding level are zero, so uniform rows give exactly 1
        kl = terms.sum(axis=1)
        kl[kl <= 64 * np.finfo(np.float64).eps] = 0.0
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


class MatrixSqrtError(ArithmeticError):
    pass


def _psd_sqrt(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if (w < -tol * scale).any():
        raise MatrixSqrtError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(features_real, features_fake, tol: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (rows are samples)."""
    a = np.asarray(features_real, dtype=np.float64)
    b = np.asarray(features_fake, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per feature set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature widths differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a, tol)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2
    w = np.linalg.eigvalsh(inner)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if (w < -tol * scale).any():
        raise MatrixSqrtError(f"square root of the covariance product did not converge (eigenvalue {w.min():.3g})")
    tr_sqrt = float(np.sqrt(np.clip(w, 0, None)).sum())
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(value, 0.0)


# -- retrieval, interpolation, probes ----------------------------------------------

def nearest_neighbors(query, reference, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean k-NN: ``(indices [q, k], distances [q, k])`` with distances nondecreasing."""
    reference = np.asarray(reference, dtype=np.float64)
    if k > len(reference):
        raise ValueError(f"k={k} exceeds the {len(reference)} reference samples")
    nn_index = NearestNeighbors(n_neighbors=k, algorithm="brute", metric="euclidean").fit(reference)
    dist, idx = nn_index.kneighbors(np.asarray(query, dtype=np.float64))
    return idx, dist


def knn_retrieval(generated, real, real_ids: Sequence[str], k: int, classifier: VideoClassifier) -> list[dict]:
    """Nearest real clips (by classifier features) for every generated clip."""
    idx, dist = nearest_neighbors(classifier.transform(generated), classifier.transform(real), k)
    return [{"ids": [real_ids[j] for j in row], "distances": d.tolist()} for row, d in zip(idx, dist)]


@torch.no_grad()
def _render_codes(generator, seq: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
    was = generator.training
    generator.eval()
    try:
        zf = generator.sequence.attach(seq.unsqueeze(0), emb.unsqueeze(0))
        return generator.image(zf)[0]
    finally:
        generator.train(was)


@torch.no_grad()
def interpolation_grid(generator, mode: str, endpoints, steps: int, *, label=None, z=None) -> list[torch.Tensor]:
    """Clips along a straight line between two latent codes (``intra_class``, label fixed) or
    two label embeddings (``class``, code fixed)."""
    seqgen = generator.sequence
    frames = generator.cfg.frames
    if mode == "intra_class":
        z1, z2 = endpoints
        emb = seqgen.embed(label)[0]
        return [_render_codes(generator, seqgen.expand(zk, frames), emb)
                for zk in interpolate_latent(torch.as_tensor(z1), torch.as_tensor(z2), steps)]
    if mode == "class":
        y1, y2 = endpoints
        seq = seqgen.expand(torch.as_tensor(z), frames)
        return [_render_codes(generator, seq, ek) for ek in interpolate_labels(y1, y2, steps, seqgen)]
    raise ValueError(f"mode must be 'intra_class' or 'class', got {mode!r}")


def diversity_probe(videos) -> float:
    """Mean over pixels of the across-sample standard deviation."""
    v = np.asarray(videos, dtype=np.float64)
    if len(v) < 1:
        raise ValueError("need at least one sample")
    # std is shift invariant; centering on one sample makes identical samples give exactly 0
    return float((v - v[:1]).std(axis=0).mean())


def temporal_change(videos) -> float:
    """Mean absolute difference between consecutive frames."""
    v = np.asarray(videos, dtype=np.float64)
    return float(np.abs(np.diff(v, axis=1)).mean())


@torch.no_grad()
def subspace_probe(generator, z, y, n_resamples: int, seed: int = 0) -> dict[str, float]:
    """Mean per-pixel RGB distance between ``G(z, y)`` and generations with one subspace redrawn.

    Resample ``i`` of every subspace uses ``torch.Generator().manual_seed(seed + i)``.
    """
    if n_resamples <= 0:
        return {}
    z = torch.as_tensor(z)
    was = generator.training
    generator.eval()
    try:
        base = generator(z.unsqueeze(0), y)[0]
        report = {}
        for which in SUBSPACES:
            dists = []
            for i in range(n_resamples):
                zi = resample_subspace(z, which, generator.latent, torch.Generator().manual_seed(seed + i))
                out = generator(zi.unsqueeze(0), y)[0]
                dists.append(float((out - base).pow(2).sum(dim=1).sqrt().mean()))
            report[which] = float(np.mean(dists))
        return report
    finally:
        generator.train(was)


# -- report --------------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "which", "seed", "config_fingerprint"],
    "properties": {
        "schema_version": {"const": 1},
        "which": {"enum": ["s3", "is", "fid", "knn", "interp", "probe"]},
        "seed": {"type": "integer"},
        "checkpoint": {"type": ["string", "null"]},
        "config_fingerprint": {"type": "string"},
        "accuracy": {
            "type": ["object", "null"],
            "required": ["SeR", "ReS", "ReR"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 100} for k in ("SeR", "ReS", "ReR")},
        },
        "s3": {"type": ["number", "null"], "minimum": 0},
        "is_mean": {"type": ["number", "null"], "minimum": 1},
        "is_std": {"type": ["number", "null"], "minimum": 0},
        "fid": {"type": ["number", "null"], "minimum": 0},
        "probes": {"type": "object"},
    },
    "additionalProperties": False,
}


@dataclass
class EvalReport:
    which: str
    seed: int
    config_fingerprint: str
    checkpoint: str | None = None
    accuracy: dict | None = None
    s3: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    fid: float | None = None
    probes: dict = field(default_factory=dict)
    schema_version: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        jsonschema.validate(d, REPORT_SCHEMA)
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(**d)
