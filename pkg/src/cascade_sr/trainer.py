"""Training loop for the shared cascade denoiser.

Each batch picks one stage ``i ~ U{1..n}`` and one scale ``s_i`` from the
mixed distribution, builds the stage's LR/HR pair from the ground truth with
the canonical resampler, moves both into residual space around the base
model's render, noises the HR residual with the forward marginal and
regresses the clean residual with an L1 loss.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .base_sr import BaseSRModel, base_upsample
from .checkpoint import CheckpointBundle, load_checkpoint
from .config import RunConfig
from .data import Dataset
from .denoiser import CoordinateDenoiser, CoordinateMap, init_params, make_coordinate_map
from .diffusion import DiffusionSchedule, forward_marginal
from .imaging import bicubic_resize
from .scale_plan import ScaleDistribution, n_stages_for, sample_train_scale

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSample:
    """One stage-``i`` training example (or a batch sharing ``i`` and ``s_i``)."""

    x_init: torch.Tensor
    x_lr: torch.Tensor
    x_lr_up: torch.Tensor
    x_hr: torch.Tensor
    stage: int
    scale: float
    cmap: CoordinateMap

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.x_hr.shape[-2:])


def stage_resolutions(
    gt_res: tuple[int, int], stage: int, scale: float, fixed_scale: float, n_stages: int
) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """(initial, stage input, stage output) grids for a ground truth of size ``gt_res``.

    The initial grid is ``gt / s_fix**n`` so that the largest stage output
    (stage ``n`` at ``s_fix``) fits the ground truth. Earlier stages ran at
    ``s_fix``.
    """
    H, W = gt_res
    init = (round(H / fixed_scale**n_stages), round(W / fixed_scale**n_stages))
    grow = fixed_scale ** (stage - 1)
    lr = (round(init[0] * grow), round(init[1] * grow))
    hr = (round(lr[0] * scale), round(lr[1] * scale))
    return init, lr, hr


def make_train_sample(
    x_gt: torch.Tensor,
    dist: ScaleDistribution,
    n_stages: int,
    rng: np.random.Generator,
    *,
    stage: int | None = None,
    scale: float | None = None,
) -> TrainSample:
    """Draw ``(i, s_i)`` and resize ``x_gt`` (CHW or BCHW) into a stage example."""
    stage = int(rng.integers(1, n_stages + 1)) if stage is None else int(stage)
    scale = sample_train_scale(dist, rng) if scale is None else float(scale)
    if not 1 <= stage <= n_stages:
        raise ValueError(f"stage {stage} outside [1, {n_stages}]")
    gt_res = tuple(x_gt.shape[-2:])
    init, lr, hr = stage_resolutions(gt_res, stage, scale, dist.fixed_scale, n_stages)
    if min(init) < 2:
        raise ValueError(
            f"ground truth {gt_res} too small for {n_stages} stages at x{dist.fixed_scale} (initial grid {init})"
        )
    if hr[0] > gt_res[0] or hr[1] > gt_res[1]:
        raise ValueError(f"ground truth {gt_res} smaller than stage output {hr}")
    x_init = bicubic_resize(x_gt, init)
    x_lr = x_init if lr == init else bicubic_resize(x_gt, lr)
    return TrainSample(
        x_init=x_init,
        x_lr=x_lr,
        x_lr_up=bicubic_resize(x_lr, hr),
        x_hr=bicubic_resize(x_gt, hr),
        stage=stage,
        scale=scale,
        cmap=make_coordinate_map(*hr, dtype=x_gt.dtype),
    )


def noise_augment(
    x_lr_up: torch.Tensor, k_steps: int, sched: DiffusionSchedule, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Add the noise of ``k_steps`` forward steps (variance ``kappa^2 eta_k``); no residual shift."""
    if not 0 <= k_steps < sched.n_steps:
        raise ValueError(f"augmentation steps {k_steps} outside [0, {sched.n_steps})")
    if k_steps == 0:
        return x_lr_up
    noise = torch.randn(x_lr_up.shape, generator=generator, dtype=x_lr_up.dtype)
    return x_lr_up + sched.kappa * math.sqrt(sched.eta_at(k_steps)) * noise


@dataclass
class TrainState:
    model: CoordinateDenoiser
    optimizer: torch.optim.Optimizer
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    generator: torch.Generator = field(default_factory=lambda: torch.Generator().manual_seed(0))
    config: dict = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "generator": self.generator.get_state(),
            "config": self.config,
        }

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]
        self.generator.set_state(state["generator"])
        self.config = state.get("config", {})


def new_train_state(cfg: RunConfig) -> TrainState:
    model = init_params(cfg.model, seed=cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr, betas=(cfg.train.beta1, cfg.train.beta2))
    return TrainState(
        model=model,
        optimizer=opt,
        rng=np.random.default_rng(cfg.seed),
        generator=torch.Generator().manual_seed(cfg.seed),
        config=cfg.to_flat(),
    )


def lr_at(step: int, cfg: RunConfig) -> float:
    drop = cfg.train.lr_drop_step if cfg.train.lr_drop_step is not None else cfg.train.steps // 2
    return cfg.train.lr if step < drop else cfg.train.lr_final


Hook = Callable[[dict], None]


def train_step(
    state: TrainState,
    batch: TrainSample,
    sched: DiffusionSchedule,
    base: BaseSRModel | None = None,
    *,
    lr: float | None = None,
    noise_aug_steps: int = 0,
    hook: Hook | None = None,
    predict: Callable | None = None,
) -> tuple[TrainState, float]:
    """One optimizer step of the L1 objective; returns the pre-update loss.

    ``hook`` receives the tensors entering the loss (for instrumentation).
    ``predict`` replaces the network output (oracle tests); when given no
    parameter update is made.
    """
    model = state.model
    model.train()
    res = batch.resolution
    g = base_upsample(batch.x_init, res, base)
    x0 = batch.x_hr - g
    y0 = batch.x_lr_up - g
    B = x0.shape[0]
    t = torch.randint(1, sched.n_steps + 1, (B,), generator=state.generator)
    eps = torch.randn(x0.shape, generator=state.generator, dtype=x0.dtype)
    x_t = forward_marginal(x0, y0, t, sched, eps)
    cond = noise_augment(y0, noise_aug_steps, sched, state.generator)
    if hook is not None:
        hook({"target": x0, "cond": cond, "x_t": x_t, "t": t, "clean_cond": y0})

    if predict is not None:
        with torch.no_grad():
            pred = predict(x_t, t, batch.scale, cond, batch.x_init, batch.cmap)
            return state, float(F.l1_loss(pred, x0))

    pred = model(x_t, t, batch.scale, cond, batch.x_init, batch.cmap)
    loss = F.l1_loss(pred, x0)
    if lr is not None:
        for grp in state.optimizer.param_groups:
            grp["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if not torch.isfinite(loss):
        grad_norm = math.sqrt(sum(float((p.grad**2).sum()) for p in model.parameters() if p.grad is not None))
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} (lr={state.optimizer.param_groups[0]['lr']}, "
            f"grad-norm={grad_norm})"
        )
    state.optimizer.step()
    state.step += 1
    return state, float(loss.detach())


def sample_batch(state: TrainState, dataset: Dataset, cfg: RunConfig) -> TrainSample:
    dist = ScaleDistribution(cfg.train.p_fixed, cfg.train.fixed_scale)
    n = n_stages_for(cfg.train.max_scale, cfg.train.fixed_scale)
    gt = dataset.sample_batch(cfg.train.batch_size, state.rng)
    return make_train_sample(gt, dist, n, state.rng)


LOG_FIELDS = ("step", "loss", "lr", "wallclock")


def run_training(
    cfg: RunConfig,
    dataset: Dataset,
    *,
    base: BaseSRModel | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> CheckpointBundle:
    """Train for ``cfg.train.steps`` steps (deterministic for a fixed seed).

    With ``out_dir`` a CSV log and periodic checkpoints (including optimizer
    and RNG state) are written; ``resume`` continues from such a checkpoint.
    ``max_steps`` stops early without altering the learning-rate schedule.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    base = base or BaseSRModel()
    sched = cfg.build_schedule()
    state = new_train_state(cfg)
    if resume is not None:
        bundle = load_checkpoint(resume)
        if bundle.train_state is None:
            raise ValueError(f"{resume} holds no training state to resume from")
        state.load_state_dict(bundle.train_state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.resolved.txt")
    log_path = out / "train_log.csv" if out is not None else None
    rows: list[dict] = []
    stop = cfg.train.steps if max_steps is None else min(cfg.train.steps, max_steps)
    t0 = time.perf_counter()
    writer_file = None
    try:
        if log_path is not None:
            new = resume is None or not log_path.exists()
            writer_file = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(writer_file, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
        while state.step < stop:
            lr = lr_at(state.step, cfg)
            batch = sample_batch(state, dataset, cfg)
            step = state.step
            state, loss = train_step(state, batch, sched, base, lr=lr, noise_aug_steps=cfg.train.noise_aug_steps)
            row = {"step": step, "loss": loss, "lr": lr, "wallclock": time.perf_counter() - t0}
            rows.append(row)
            if writer_file is not None and (step % cfg.train.log_every == 0 or state.step == stop):
                writer.writerow(row)
                writer_file.flush()
            if progress is not None:
                progress(step, loss)
            if out is not None and cfg.train.checkpoint_every and state.step % cfg.train.checkpoint_every == 0:
                _bundle(state, cfg, sched, base).save(out / f"checkpoint_{state.step:06d}.pt")
    finally:
        if writer_file is not None:
            writer_file.close()
    bundle = _bundle(state, cfg, sched, base)
    bundle.log = rows
    if out is not None:
        bundle.save(out / "checkpoint.pt")
    return bundle


def _bundle(state: TrainState, cfg: RunConfig, sched: DiffusionSchedule, base: BaseSRModel) -> CheckpointBundle:
    return CheckpointBundle(
        model=state.model,
        schedule=sched,
        config=cfg,
        base=base,
        train_state=state.state_dict(),
    )
