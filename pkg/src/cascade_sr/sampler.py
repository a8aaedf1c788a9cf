"""Cascaded inference with self-consistency guidance.

For every stage of the scale plan the sampler seeds ``x_T`` from the
conditioning residual plus noise, runs the reverse chain with the shared
denoiser, nudges each clean estimate towards agreement with the previous
stage's output (guidance), and finally adds the base render back.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .base_sr import BaseSRModel, base_upsample
from .denoiser import CoordinateDenoiser, denoise, make_coordinate_map
from .diffusion import DiffusionSchedule, resize_to, reverse_step, scg_update
from .imaging import bicubic_resize
from .scale_plan import DEFAULT_FIXED_SCALE, ScalePlan, Strategy, plan_scales

log = logging.getLogger(__name__)

MIN_INPUT_SIDE = 16


class ScgReference(str, enum.Enum):
    PREVIOUS_STAGE = "previous_stage"
    INITIAL_LR = "initial_lr"
    OFF = "off"

    @classmethod
    def parse(cls, value) -> "ScgReference":
        if isinstance(value, cls):
            return value
        aliases = {"prev": cls.PREVIOUS_STAGE, "init": cls.INITIAL_LR, "none": cls.OFF}
        key = str(value).lower()
        return aliases.get(key) or cls(key)


@dataclass(frozen=True)
class SamplerConfig:
    zeta: float | Sequence[float] = 0.1
    seed: int = 0
    scg_reference: ScgReference | str = ScgReference.PREVIOUS_STAGE
    strategy: Strategy | str = Strategy.REMAINDER_LAST
    fixed_scale: float = DEFAULT_FIXED_SCALE
    min_input_side: int = MIN_INPUT_SIDE

    def __post_init__(self):
        object.__setattr__(self, "scg_reference", ScgReference.parse(self.scg_reference))
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        zetas = [self.zeta] if isinstance(self.zeta, (int, float)) else list(self.zeta)
        if not zetas or any(not math.isfinite(z) or z < 0 for z in zetas):
            raise ValueError(f"guidance strengths must be finite and >= 0, got {self.zeta}")

    def zeta_for(self, stage: int, n_stages: int) -> float:
        """Guidance strength of 0-based ``stage``; a scalar broadcasts."""
        if isinstance(self.zeta, (int, float)):
            return float(self.zeta)
        if len(self.zeta) == 1:
            return float(self.zeta[0])
        if len(self.zeta) < n_stages:
            raise ValueError(f"{len(self.zeta)} guidance strengths for {n_stages} stages")
        return float(self.zeta[stage])


@dataclass
class SamplingTrace:
    plan: ScalePlan
    stages: list[torch.Tensor] = field(default_factory=list)
    denoiser_calls: int = 0
    consistency: list[float] = field(default_factory=list)


def self_consistency_residual(x_sr: torch.Tensor, reference: torch.Tensor, down=None) -> float:
    """Root-mean-square of ``reference - down(x_sr)`` (0 when perfectly consistent)."""
    down = down or resize_to(reference)
    projected = down(x_sr)
    if projected.shape != reference.shape:
        raise ValueError(f"projected {tuple(projected.shape)} vs reference {tuple(reference.shape)}")
    return float(((reference - projected).double() ** 2).mean().sqrt())


def _check_params(model: CoordinateDenoiser) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValueError(f"denoiser parameter {name} is not finite")


@torch.no_grad()
def super_resolve(
    x_init: torch.Tensor,
    scale: float,
    model: CoordinateDenoiser,
    base: BaseSRModel | None,
    sched: DiffusionSchedule,
    cfg: SamplerConfig = SamplerConfig(),
    *,
    return_trace: bool = False,
):
    """Upscale ``x_init`` (CHW or 1xCHW) by ``scale`` through the stage cascade.

    Returns an image of size ``round(h*S) x round(w*S)`` clipped to
    ``[-1, 1]``, plus a :class:`SamplingTrace` with ``return_trace=True``.
    """
    squeeze = x_init.ndim == 3
    x_init = (x_init.unsqueeze(0) if squeeze else x_init).float()
    h, w = x_init.shape[-2:]
    if min(h, w) < cfg.min_input_side:
        raise ValueError(f"input {h}x{w} below the {cfg.min_input_side}px minimum side")
    _check_params(model)
    model.eval()
    base = base or BaseSRModel()
    plan = plan_scales(scale, cfg.fixed_scale, (h, w), cfg.strategy)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    trace = SamplingTrace(plan=plan)
    T = sched.n_steps

    prev = x_init
    for i, (s_i, res) in enumerate(zip(plan.stage_scales, plan.stage_resolutions)):
        g = base_upsample(x_init, res, base)
        y0 = bicubic_resize(prev, res) - g
        cmap = make_coordinate_map(*res)
        zeta = cfg.zeta_for(i, plan.n_stages)
        ref = None
        if cfg.scg_reference is ScgReference.PREVIOUS_STAGE:
            ref = prev
        elif cfg.scg_reference is ScgReference.INITIAL_LR:
            ref = x_init
        if ref is not None:
            # the estimate lives in residual space; fold the base render into the target
            down = resize_to(ref)
            ref_res = ref - down(g)

        # x_T seeded from the conditioning residual; the (1 - eta_T) * x0 term is dropped
        eps = torch.randn(y0.shape, generator=gen)
        x_t = y0 + sched.kappa * math.sqrt(sched.eta_at(T)) * eps
        for t in range(T, 0, -1):
            x0_hat = denoise(model, x_t, t, s_i, y0, x_init, cmap, n_steps=T)
            trace.denoiser_calls += 1
            if ref is not None:
                x0_hat = scg_update(x0_hat, ref_res, zeta, down)
            noise = torch.randn(x_t.shape, generator=gen)
            x_t = reverse_step(x_t, x0_hat, t, sched, noise)
        x_sr = x_t + g
        if return_trace:
            trace.stages.append(x_sr[0] if squeeze else x_sr)
            trace.consistency.append(self_consistency_residual(x_sr, prev))
        prev = x_sr

    out = prev.clamp(-1.0, 1.0)
    out = out[0] if squeeze else out
    return (out, trace) if return_trace else out
