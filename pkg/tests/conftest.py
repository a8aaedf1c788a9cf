"""Shared fixtures: tiny untrained models for contract tests and toy-trained
checkpoints (cascade and single-stage) for trend tests.

The toy models train once per session on one CPU core (a few minutes each).
"""

from __future__ import annotations

import time

import pytest
import torch

from cascade_sr.config import RunConfig
from cascade_sr.data import make_synthetic_dataset
from cascade_sr.denoiser import DenoiserConfig, init_params
from cascade_sr.trainer import run_training

torch.set_num_threads(1)

TOY_STEPS = 1500
TOY_DATA = {"n": 200, "size": (64, 64), "seed": 0, "n_val": 20}

# toy training: full 64x64 images, lr 1e-3 dropping to 1e-4 at the midpoint
TOY_OVERRIDES = {
    "train.steps": TOY_STEPS,
    "train.lr": 1e-3,
    "train.lr_final": 1e-4,
    "train.batch_size": 8,
    "train.checkpoint_every": 0,
    "data.crop_size": None,
}


@pytest.fixture(scope="session")
def tiny_model():
    return init_params(DenoiserConfig(base_channels=8, encoder_channels=8, embed_dim=16), seed=0)


@pytest.fixture(scope="session")
def toy_data():
    ds = make_synthetic_dataset(TOY_DATA["n"], TOY_DATA["size"], TOY_DATA["seed"])
    return ds.split(TOY_DATA["n_val"])


@pytest.fixture(scope="session")
def validation_gt():
    """128x128 held-out images (same generator, different seed) for x8 evaluation."""
    return make_synthetic_dataset(20, (128, 128), 1234)


def _train(train_set, overrides, out_dir):
    cfg = RunConfig().updated({**TOY_OVERRIDES, **overrides})
    t0 = time.perf_counter()
    bundle = run_training(cfg, train_set, out_dir=out_dir)
    bundle.wallclock = time.perf_counter() - t0
    return bundle


@pytest.fixture(scope="session")
def toy_cascade(toy_data, tmp_path_factory):
    """Shared cascade denoiser: s_fix = 2 stages up to x8 (three stage levels)."""
    return _train(toy_data[0], {"train.fixed_scale": 2.0, "train.max_scale": 8.0}, tmp_path_factory.mktemp("cascade"))


@pytest.fixture(scope="session")
def toy_single(toy_data, tmp_path_factory):
    """Single-stage variant: one x8 pass, identical data and step budget."""
    return _train(toy_data[0], {"train.fixed_scale": 8.0, "train.max_scale": 8.0}, tmp_path_factory.mktemp("single"))


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; printed live and again in the terminal summary."""
    line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
