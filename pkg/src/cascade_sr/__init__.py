"""Self-cascaded residual-shifting diffusion for arbitrary-scale super-resolution."""

from .imaging import bicubic_resize, load_image, save_image
from .scale_plan import ScaleDistribution, ScalePlan, plan_scales, sample_train_scale
from .diffusion import (
    DiffusionSchedule,
    build_schedule,
    forward_marginal,
    reverse_step,
    scg_loss,
    scg_update,
)
from .metrics import ConsistencyMatrix, psnr, ssim, self_ssim

__version__ = "0.1.0"

__all__ = [
    "bicubic_resize",
    "load_image",
    "save_image",
    "ScaleDistribution",
    "ScalePlan",
    "plan_scales",
    "sample_train_scale",
    "DiffusionSchedule",
    "build_schedule",
    "forward_marginal",
    "reverse_step",
    "scg_loss",
    "scg_update",
    "ConsistencyMatrix",
    "psnr",
    "ssim",
    "self_ssim",
]
