"""Command line entry point: ``tsgan {dataset,train,sample,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import evaluation as ev
from .config import MODES, ModelConfig, TrainConfig
from .latent import sample_latent
from .maistoy import FACTORS, DatasetManifest, DatasetSpec, build_dataset, load_videos
from .training import MetricsLog, Trainer, TrainingDivergedError

log = logging.getLogger("tsgan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEFAULT_EVAL = {"classifier": {"epochs": 30, "batch_size": 16, "lr": 1e-3}, "test_fraction": 0.5,
                "generator": "checkpoint", "n": 32, "k": 3, "steps": 5, "splits": 1, "n_resamples": 4}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config --------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    return dict(cfg.get(name) or {})


def _set(section: dict, **values):
    section.update({k: v for k, v in values.items() if v is not None})


def _run_dir(args, cfg) -> Path:
    return Path(args.out) / cfg.get("run_id", "run")


def _write_config(run_dir: Path, cfg: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _split_list(text):
    return None if text is None else [t.strip() for t in text.split(",") if t.strip()]


# -- dataset -------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = _load_config(args.config)
    if args.run_id:
        cfg["run_id"] = args.run_id
    ds = _section(cfg, "dataset")
    heldout = args.heldout
    if heldout == "none":
        heldout = None
        ds["heldout"] = None
    _set(ds, shapes=_split_list(args.shapes), colors=_split_list(args.colors), motions=_split_list(args.motions),
         videos_per_combination=args.videos_per_combination, resolution=args.resolution, frames=args.frames,
         seed=args.seed, heldout=heldout)
    spec = DatasetSpec(**ds)
    cfg["dataset"] = spec.to_dict()
    run_dir = _run_dir(args, cfg)
    root = run_dir / "dataset"
    if (root / "manifest.json").exists() and not args.force:
        raise UsageError(f"{root / 'manifest.json'} exists; pass --force to overwrite")
    _write_config(run_dir, cfg)
    manifest = build_dataset(spec, root, overwrite=args.force)
    combos = sorted(set(manifest.combinations()))
    n_train = len(manifest.split("train"))
    print(f"dataset: {root}")
    print(f"combinations: {len(combos)} ({len(spec.shapes)} shapes x {len(spec.colors)} colors x "
          f"{len(spec.motions)} motions)")
    print(f"videos: {len(manifest)} (train {n_train}, heldout {len(manifest) - n_train})")
    print(f"heldout combinations: {len(manifest.heldout_combinations)}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _model_config(cfg: dict) -> ModelConfig:
    model = _section(cfg, "model")
    preset = model.pop("preset", "desk")
    if preset == "desk":
        return ModelConfig.desk(**model)
    if preset == "full":
        return ModelConfig(**model)
    raise UsageError(f"unknown model preset {preset!r}")


def _data_root(cfg: dict) -> Path:
    data = cfg.get("data")
    if not data:
        raise UsageError("no dataset given (use --data or a 'data' entry in the config)")
    return Path(data)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.resume and args.config is None and args.run_id:
        saved = Path(args.out) / args.run_id / "config.json"
        if saved.exists():
            cfg = json.loads(saved.read_text())
    if args.run_id:
        cfg["run_id"] = args.run_id
    if args.data:
        cfg["data"] = str(args.data)
    model = _section(cfg, "model")
    _set(model, mode=args.mode, preset=args.preset)
    cfg["model"] = model
    train = _section(cfg, "train")
    _set(train, steps=args.steps, seed=args.seed, batch_size=args.batch_size, alpha=args.alpha,
         lr_g=args.lr_g, lr_d=args.lr_d)
    cfg["train"] = train
    cfg.setdefault("factors", list(FACTORS))
    cfg.setdefault("checkpoint_every", 500)
    if args.checkpoint_every is not None:
        cfg["checkpoint_every"] = args.checkpoint_every

    root = _data_root(cfg)
    manifest = DatasetManifest.load(root)
    x, y, space, _ = load_videos(root, manifest, cfg["factors"], split="train")
    model_d = dict(cfg["model"])
    model_d.setdefault("label_sizes", list(space.sizes))
    model_d.setdefault("resolution", int(x.shape[-1]))
    model_d.setdefault("frames", int(x.shape[1]))
    cfg["model"] = model_d
    mcfg = _model_config(cfg)
    tcfg = TrainConfig.from_dict(cfg["train"])
    cfg["vocabulary"] = space.vocabulary
    run_dir = _run_dir(args, cfg)
    ckpt_dir = run_dir / "checkpoints"
    latest = ckpt_dir / "latest.ckpt"
    metrics = MetricsLog(run_dir / "metrics.log")

    if args.resume:
        if not latest.exists():
            raise UsageError(f"nothing to resume: {latest} does not exist")
        trainer = Trainer.from_checkpoint(latest, torch.from_numpy(x), torch.from_numpy(y), tcfg)
        metrics.truncate_after(trainer.step)
        log.info("resumed %s at step %d", run_dir, trainer.step)
    else:
        if latest.exists() and not args.force:
            raise UsageError(f"{run_dir} already holds checkpoints; use --resume or --force")
        trainer = Trainer(mcfg, tcfg, torch.from_numpy(x), torch.from_numpy(y), cfg.get("run_id", "run"))
        metrics.path.write_text("")
    _write_config(run_dir, cfg)

    def save():
        path = trainer.save(ckpt_dir / f"step_{trainer.step:07d}.ckpt")
        latest.write_bytes(path.read_bytes())

    if trainer.step == 0 and not (ckpt_dir / "step_0000000.ckpt").exists():
        save()
    every = int(cfg["checkpoint_every"])

    def on_step(record):
        metrics.append(record)
        if every > 0 and trainer.step % every == 0:
            save()
        if args.verbose and trainer.step % 50 == 0:
            print(json.dumps(record, sort_keys=True))

    try:
        trainer.run(tcfg.steps, on_step)
    except TrainingDivergedError as exc:
        (run_dir / "diverged.json").write_text(json.dumps(exc.snapshot, indent=2) + "\n")
        raise
    save()
    print(f"trained {run_dir} to step {trainer.step}")
    return EXIT_OK


# -- sample --------------------------------------------------------------------

def _to_uint8(video: np.ndarray) -> np.ndarray:
    """[T, 3, H, W] in [-1, 1] -> [T, H, W, 3] uint8."""
    v = np.clip((np.asarray(video) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    return v.transpose(0, 2, 3, 1)


def save_grid(videos: np.ndarray, path) -> Path:
    """One row per clip, one column per frame."""
    frames = np.stack([_to_uint8(v) for v in videos])
    n, t, h, w, _ = frames.shape
    grid = frames.transpose(0, 2, 1, 3, 4).reshape(n * h, t * w, 3)
    Image.fromarray(grid).save(path)
    return Path(path)


def save_gif(video: np.ndarray, path, duration: int = 125) -> Path:
    frames = [Image.fromarray(f) for f in _to_uint8(video)]
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=duration, loop=0)
    return Path(path)


def _checkpoint_run_config(ckpt: Path) -> dict:
    cfg_path = ckpt.resolve().parent.parent / "config.json"
    return json.loads(cfg_path.read_text()) if cfg_path.exists() else {}


def _parse_labels(text: str | None, n: int, sizes, vocabulary: dict | None, factors) -> np.ndarray:
    if text is None:
        flat = np.arange(n) % int(np.prod(sizes))
        return np.stack(np.unravel_index(flat, sizes), axis=1)
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != len(sizes):
        raise UsageError(f"--label needs {len(sizes)} comma-separated factors")
    codes = []
    for i, p in enumerate(parts):
        if p.lstrip("-").isdigit():
            c = int(p)
        elif vocabulary and p in vocabulary[factors[i]]:
            c = vocabulary[factors[i]].index(p)
        else:
            raise UsageError(f"unknown label value {p!r}")
        if not 0 <= c < sizes[i]:
            raise UsageError(f"label code {c} outside [0, {sizes[i]})")
        codes.append(c)
    return np.tile(np.asarray(codes, dtype=np.int64), (n, 1))


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    ckpt = Path(args.checkpoint)
    run_cfg = _checkpoint_run_config(ckpt)
    trainer = Trainer.from_checkpoint(ckpt)
    run_id = args.run_id or cfg.get("run_id") or trainer.run_id
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    sizes = trainer.model_cfg.label_sizes
    labels = _parse_labels(args.label, args.n, sizes, run_cfg.get("vocabulary"), run_cfg.get("factors", FACTORS))
    videos = trainer.sample(torch.from_numpy(labels), generator=torch.Generator().manual_seed(seed)).numpy()
    out = Path(args.out) / run_id / "samples"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"seed{seed}"
    save_grid(videos, out / f"{stem}_grid.png")
    for i, v in enumerate(videos):
        save_gif(v, out / f"{stem}_{i:03d}.gif")
    (out / f"{stem}_labels.json").write_text(json.dumps(labels.tolist()) + "\n")
    print(f"wrote {len(videos)} samples to {out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------

def _fingerprint(d: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    evcfg = {**DEFAULT_EVAL, **_section(cfg, "eval")}
    evcfg["classifier"] = {**DEFAULT_EVAL["classifier"], **evcfg.get("classifier", {})}
    _set(evcfg, generator=args.generator, n=args.n, k=args.k, steps=args.steps, splits=args.splits)
    if args.classifier_epochs is not None:
        evcfg["classifier"]["epochs"] = args.classifier_epochs
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    evcfg["classifier"]["random_state"] = seed
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    run_cfg = _checkpoint_run_config(ckpt) if ckpt else {}
    if args.data:
        cfg["data"] = str(args.data)
    elif "data" not in cfg and "data" in run_cfg:
        cfg["data"] = run_cfg["data"]
    run_id = args.run_id or cfg.get("run_id") or run_cfg.get("run_id") or "run"
    trainer = Trainer.from_checkpoint(ckpt) if ckpt else None
    factors = run_cfg.get("factors", cfg.get("factors", list(FACTORS)))
    which = args.which

    report = ev.EvalReport(which=which, seed=seed, config_fingerprint=_fingerprint(evcfg),
                           checkpoint=str(ckpt) if ckpt else None)
    out = Path(args.out) / run_id / "reports"

    def real_data():
        root = _data_root(cfg)
        return load_videos(root, factors=factors, split="train")

    def make_generator(real_train, real_test):
        kind = evcfg["generator"]
        if kind == "replay":
            return ev.ReplayGenerator.for_splits(real_train, real_test)
        if kind == "constant":
            return ev.ConstantGenerator(real_train[0].shape[1:])
        if kind == "checkpoint":
            if trainer is None:
                raise UsageError("--generator checkpoint requires --checkpoint")
            return ev.CheckpointGenerator(trainer, seed=seed)
        raise UsageError(f"unknown generator {kind!r}")

    if which == "is" and args.stub == "uniform":
        k = int(evcfg.get("classes", 10))
        n = int(evcfg["n"])
        probs = np.full((n, k), 1.0 / k)
        report.is_mean, report.is_std = ev.inception_score(probs, int(evcfg["splits"]))
    elif which in ("s3", "is", "fid", "knn"):
        x, y, space, records = real_data()
        tr, te = ev.stratified_split(y, evcfg["test_fraction"], seed)
        gen = make_generator((x[tr], y[tr]), (x[te], y[te]))
        if which == "s3":
            res = ev.s3_pipeline((x[tr], y[tr]), (x[te], y[te]), gen, evcfg["classifier"], space.sizes, seed)
            report.accuracy = {"SeR": res.triple.SeR, "ReS": res.triple.ReS, "ReR": res.triple.ReR}
            report.s3 = res.s3
            report.probes["classifier_fingerprint"] = res.classifier_fingerprint
        else:
            clf = ev.VideoClassifier(**evcfg["classifier"]).fit(x[tr], space.flat(y[tr]))
            n = int(evcfg["n"])
            lab = space.all_codes()[np.arange(n) % space.num_combinations]
            fake = gen(lab, np.random.default_rng(seed))
            report.probes["classifier_fingerprint"] = clf.fingerprint()
            if which == "is":
                report.is_mean, report.is_std = ev.inception_score(clf.predict_proba(fake), int(evcfg["splits"]))
            elif which == "fid":
                report.fid = ev.fid(clf.transform(x[te]), clf.transform(fake))
            else:
                ids = [records[i].id for i in range(len(records))]
                report.probes["knn"] = ev.knn_retrieval(fake, x, ids, int(evcfg["k"]), clf)
    elif which in ("interp", "probe"):
        if trainer is None:
            raise UsageError(f"--which {which} requires --checkpoint")
        g = torch.Generator().manual_seed(seed)
        sizes = trainer.model_cfg.label_sizes
        y0 = torch.zeros(1, len(sizes), dtype=torch.long)
        z1 = sample_latent(trainer.generator.latent, 1, generator=g)[0]
        z2 = sample_latent(trainer.generator.latent, 1, generator=g)[0]
        if which == "interp":
            steps = int(evcfg["steps"])
            grid = ev.interpolation_grid(trainer.generator, "intra_class", (z1, z2), steps, label=y0)
            y1 = torch.tensor([[s - 1 for s in sizes]])
            grid_c = ev.interpolation_grid(trainer.generator, "class", (y0, y1), steps, z=z1)
            out.mkdir(parents=True, exist_ok=True)
            save_grid(torch.stack(grid).numpy(), out / "interp_intra_class.png")
            save_grid(torch.stack(grid_c).numpy(), out / "interp_class.png")
            report.probes["interp_files"] = ["interp_intra_class.png", "interp_class.png"]
        else:
            n = int(evcfg["n"])
            flat = np.arange(n) % int(np.prod(sizes))
            lab = torch.from_numpy(np.stack(np.unravel_index(flat, sizes), axis=1))
            fake = trainer.sample(lab, generator=g).numpy()
            report.probes["diversity"] = ev.diversity_probe(fake)
            report.probes["temporal_change"] = ev.temporal_change(fake)
            report.probes["subspace"] = ev.subspace_probe(trainer.generator, z1, y0, int(evcfg["n_resamples"]), seed)
    else:
        raise UsageError(f"unknown --which {which!r}")

    path = report.save(out / f"{which}.json")
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "probes"}, sort_keys=True))
    print(f"report: {path}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsgan", description="Conditional video GAN toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config with nested sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="runs", help="output root")
        sp.add_argument("--run-id")
        sp.add_argument("-v", "--verbose", action="store_true")

    d = sub.add_parser("dataset", help="render the synthetic moving-shapes dataset")
    common(d)
    d.add_argument("--shapes")
    d.add_argument("--colors")
    d.add_argument("--motions")
    d.add_argument("--videos-per-combination", type=int)
    d.add_argument("--resolution", type=int)
    d.add_argument("--frames", type=int)
    d.add_argument("--heldout", choices=["reference", "pattern", "none"])
    d.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train a generator")
    common(t)
    t.add_argument("--data", help="dataset root holding manifest.json")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--preset", choices=["desk", "full"])
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--lr-g", type=float)
    t.add_argument("--lr-d", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write PNG grids and GIFs from a checkpoint")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--label", help="comma-separated factor values or codes")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a checkpoint or a reference generator")
    common(e)
    e.add_argument("--which", required=True, choices=["s3", "is", "fid", "knn", "interp", "probe"])
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--generator", choices=["checkpoint", "replay", "constant"])
    e.add_argument("--stub", choices=["uniform"], help="replace the classifier softmax (is only)")
    e.add_argument("--n", type=int)
    e.add_argument("--k", type=int)
    e.add_argument("--steps", type=int)
    e.add_argument("--splits", type=int)
    e.add_argument("--classifier-epochs", type=int)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tsgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"tsgan {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
