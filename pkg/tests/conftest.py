import numpy as np
import pytest
import torch
from hypothesis import settings

from tsgan.config import ModelConfig, TrainConfig
from tsgan.maistoy import DatasetSpec, build_dataset, load_videos

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

MINI_SPEC = dict(shapes=("square", "circle"), colors=("red", "blue"), motions=("right", "left", "up", "down"),
                 videos_per_combination=10, resolution=48, frames=8, seed=0)


def tiny_model(mode="TSB", **overrides):
    """16x16, T=4 model that builds and runs in milliseconds."""
    base = dict(mode=mode, resolution=16, frames=4, label_sizes=(3,), latent_dims=(2, 2, 4), embed_dim=6,
                gru_hidden=8, g_base_width=2, g_widths=(4, 2), attention_stage=1, d_base_width=2,
                d_image_widths=(1, 2), d_video_widths=(1, 2, 2, 2), frames_judged=2)
    base.update(overrides)
    return ModelConfig(**base)


def toy_videos(n=6, frames=4, res=16, classes=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, frames, 3, res, res, generator=g) * 2 - 1
    y = torch.arange(n) % classes
    return x, y


@pytest.fixture
def tiny_trainer():
    from tsgan.training import Trainer

    x, y = toy_videos()
    return Trainer(tiny_model(), TrainConfig(batch_size=4, seed=3), x, y)


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory):
    """2 shapes x 2 colors x 4 motions x 10 videos at 48x48, T=8."""
    root = tmp_path_factory.mktemp("mini")
    manifest = build_dataset(DatasetSpec(**MINI_SPEC), root)
    x, y, space, records = load_videos(root, manifest)
    return {"root": root, "manifest": manifest, "x": x, "y": y, "space": space, "records": records}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criterion -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
