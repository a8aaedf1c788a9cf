import csv
import math

import numpy as np
import pytest
import torch

from cascade_sr.base_sr import base_upsample
from cascade_sr.checkpoint import CheckpointError, load_checkpoint
from cascade_sr.config import RunConfig
from cascade_sr.data import Dataset, make_synthetic_dataset
from cascade_sr.diffusion import build_schedule
from cascade_sr.imaging import bicubic_resize
from cascade_sr.scale_plan import ScaleDistribution
from cascade_sr.trainer import (
    LOG_FIELDS,
    TrainingDiverged,
    lr_at,
    make_train_sample,
    new_train_state,
    noise_augment,
    run_training,
    train_step,
)

SMALL = {
    "train.batch_size": 2,
    "train.max_scale": 4.0,
    "data.crop_size": (32, 32),
    "model.base_channels": 8,
    "model.encoder_channels": 8,
    "model.embed_dim": 16,
}


def gt(seed=0, size=64, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = (3, size, size) if batch is None else (batch, 3, size, size)
    return torch.rand(shape, generator=g) * 2 - 1


def test_first_stage_conditions_on_initial_lr():
    rng = np.random.default_rng(0)
    s = make_train_sample(gt(), ScaleDistribution(), 3, rng, stage=1, scale=1.7)
    assert s.x_lr.shape == s.x_init.shape == (3, 8, 8)
    assert torch.equal(s.x_lr, s.x_init)


def test_scale_two_builds_half_resolution_condition():
    x = gt()
    s = make_train_sample(x, ScaleDistribution(), 1, np.random.default_rng(0), stage=1, scale=2.0)
    assert s.x_lr.shape[-2:] == (32, 32)
    assert s.x_hr.shape[-2:] == s.x_lr_up.shape[-2:] == s.cmap.shape == (64, 64)
    assert torch.equal(s.x_lr, bicubic_resize(x, (32, 32)))
    assert torch.equal(s.x_lr_up, bicubic_resize(s.x_lr, (64, 64)))
    assert torch.equal(s.x_hr, x)


def test_later_stage_resolutions():
    s = make_train_sample(gt(), ScaleDistribution(), 3, np.random.default_rng(0), stage=3, scale=1.5)
    assert s.x_init.shape[-2:] == (8, 8)
    assert s.x_lr.shape[-2:] == (32, 32)
    assert s.x_hr.shape[-2:] == (48, 48)


def test_stage_frequencies_uniform():
    rng = np.random.default_rng(1)
    x = gt(size=16)
    counts = np.zeros(3)
    for _ in range(10_000):
        counts[make_train_sample(x, ScaleDistribution(), 3, rng).stage - 1] += 1
    np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.02)


def test_ground_truth_too_small():
    with pytest.raises(ValueError):
        make_train_sample(gt(size=8), ScaleDistribution(), 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_train_sample(gt(), ScaleDistribution(), 2, np.random.default_rng(0), stage=3)


def test_noise_augment_identity_at_zero():
    x = gt()
    assert noise_augment(x, 0, build_schedule()) is x


@pytest.mark.parametrize("k", [3, 5])
def test_noise_augment_variance(k):
    sched = build_schedule()
    x = torch.full((100_000,), 0.25, dtype=torch.float64)
    out = noise_augment(x, k, sched, torch.Generator().manual_seed(k))
    assert float(out.var()) == pytest.approx(sched.kappa**2 * sched.eta_at(k), rel=0.02)
    assert abs(float(out.mean()) - 0.25) < 4 * math.sqrt(sched.kappa**2 * sched.eta_at(k) / 1e5)


def test_noise_augment_range():
    with pytest.raises(ValueError):
        noise_augment(gt(), 15, build_schedule())
    with pytest.raises(ValueError):
        noise_augment(gt(), -1, build_schedule())


def test_lr_schedule_two_phase():
    cfg = RunConfig().updated({"train.steps": 1000})
    assert lr_at(0, cfg) == 1e-4 and lr_at(499, cfg) == 1e-4
    assert lr_at(500, cfg) == 1e-5 and lr_at(999, cfg) == 1e-5
    cfg = cfg.updated({"train.lr_drop_step": 10})
    assert lr_at(9, cfg) == 1e-4 and lr_at(10, cfg) == 1e-5


def small_batch(seed=0):
    return make_train_sample(gt(seed, 32, batch=2), ScaleDistribution(), 2, np.random.default_rng(seed), stage=2, scale=2.0)


def test_oracle_prediction_gives_zero_loss():
    cfg = RunConfig().updated(SMALL)
    state = new_train_state(cfg)
    batch = small_batch()
    target = batch.x_hr - base_upsample(batch.x_init, batch.resolution)
    before = {k: v.clone() for k, v in state.model.state_dict().items()}
    _, loss = train_step(state, batch, cfg.build_schedule(), predict=lambda *a: target)
    assert loss == 0.0
    assert all(torch.equal(before[k], v) for k, v in state.model.state_dict().items())


def test_loss_non_negative_and_step_counts():
    cfg = RunConfig().updated(SMALL)
    state = new_train_state(cfg)
    for seed in range(3):
        state, loss = train_step(state, small_batch(seed), cfg.build_schedule(), lr=1e-3)
        assert loss >= 0 and math.isfinite(loss)
    assert state.step == 3
    assert state.optimizer.param_groups[0]["lr"] == 1e-3


def test_augmentation_never_reaches_target():
    cfg = RunConfig().updated(SMALL)
    state = new_train_state(cfg)
    batch = small_batch()
    seen = {}
    train_step(state, batch, cfg.build_schedule(), noise_aug_steps=5, hook=seen.update)
    g = base_upsample(batch.x_init, batch.resolution)
    assert torch.equal(seen["target"], batch.x_hr - g)
    assert torch.equal(seen["clean_cond"], batch.x_lr_up - g)
    assert not torch.equal(seen["cond"], seen["clean_cond"])
    # x_t is built from the clean conditioning residual
    sched = cfg.build_schedule()
    eta = torch.tensor(sched.eta, dtype=torch.float32)[seen["t"] - 1].view(-1, 1, 1, 1)
    eps = (seen["x_t"] - (1 - eta) * seen["target"] - eta * seen["clean_cond"]) / (sched.kappa * eta.sqrt())
    assert abs(float(eps.mean())) < 0.2 and 0.8 < float(eps.std()) < 1.2


def test_non_finite_loss_aborts_with_diagnostics():
    cfg = RunConfig().updated(SMALL)
    state = new_train_state(cfg)
    with torch.no_grad():
        next(state.model.conv_out.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="grad-norm"):
        train_step(state, small_batch(), cfg.build_schedule())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        run_training(RunConfig().updated(SMALL), Dataset([]))


def test_resume_matches_uninterrupted(tmp_path):
    cfg = RunConfig().updated({**SMALL, "train.steps": 6, "train.checkpoint_every": 3, "train.log_every": 1})
    ds = make_synthetic_dataset(6, (32, 32), 0, crop_size=(32, 32))
    full = run_training(cfg, ds, out_dir=tmp_path / "full")
    run_training(cfg, ds, out_dir=tmp_path / "part", max_steps=3)
    resumed = run_training(cfg, ds, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_000003.pt")
    assert [r["loss"] for r in resumed.log] == [r["loss"] for r in full.log[3:]]
    a, b = full.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    with open(tmp_path / "part" / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == LOG_FIELDS
    assert [int(r["step"]) for r in rows] == list(range(6))
    assert (tmp_path / "full" / "config.resolved.txt").is_file()


def test_same_seed_same_run():
    cfg = RunConfig().updated({**SMALL, "train.steps": 3})
    ds = make_synthetic_dataset(6, (32, 32), 0, crop_size=(32, 32))
    a = run_training(cfg, ds)
    b = run_training(cfg, ds)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]


def test_resume_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.pt"
    torch.save({"format": "something-else"}, bad)
    ds = make_synthetic_dataset(4, (32, 32), 0, crop_size=(32, 32))
    with pytest.raises(CheckpointError):
        run_training(RunConfig().updated(SMALL), ds, resume=bad)
    cfg = RunConfig().updated({**SMALL, "train.steps": 1})
    run_training(cfg, ds, out_dir=tmp_path / "r")
    doc = torch.load(tmp_path / "r" / "checkpoint.pt", weights_only=True)
    doc["version"] = 99
    torch.save(doc, tmp_path / "v99.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "v99.pt")
