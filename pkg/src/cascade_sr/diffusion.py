"""Residual-shifting diffusion: schedule, forward marginal, reverse step and
the self-consistency guidance (SCG) step.

Timesteps are 1-based, ``t in [1, T]``, with ``eta_0 := 0`` so the ``t = 1``
reverse step returns the clean estimate with no added noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .imaging import bicubic_resize

Downsample = Callable[[torch.Tensor], torch.Tensor]

DEFAULT_T = 15
DEFAULT_KAPPA = 2.0
DEFAULT_ETA_MIN = 1e-3
DEFAULT_ETA_MAX = 0.999


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Shift schedule ``eta_1 < ... < eta_T`` and noise level ``kappa``.

    ``eta`` is stored as a read-only float64 array indexed ``eta[t - 1]``.
    """

    eta: np.ndarray
    kappa: float

    def __post_init__(self):
        eta = np.array(self.eta, dtype=np.float64).reshape(-1)
        if eta.size < 2:
            raise ValueError("schedule needs at least two steps")
        if not np.all(np.isfinite(eta)) or np.any(np.diff(eta) <= 0):
            raise ValueError("eta must be finite and strictly increasing")
        if eta[0] <= 0 or eta[0] > 1e-2:
            raise ValueError(f"eta_1 must lie in (0, 1e-2], got {eta[0]}")
        if eta[-1] < 0.99 or eta[-1] > 1.0:
            raise ValueError(f"eta_T must lie in [0.99, 1], got {eta[-1]}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def n_steps(self) -> int:
        return int(self.eta.size)

    @property
    def alpha(self) -> np.ndarray:
        """Per-step increments; ``alpha_1 = eta_1``."""
        return np.diff(self.eta, prepend=0.0)

    def eta_at(self, t: int) -> float:
        """``eta_t`` with the convention ``eta_0 = 0``."""
        if t == 0:
            return 0.0
        self.check_t(t)
        return float(self.eta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.eta[t - 1] - (self.eta[t - 2] if t > 1 else 0.0))

    def check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.n_steps:
            raise ValueError(f"timestep {t} outside [1, {self.n_steps}]")

    def to_dict(self) -> dict:
        return {"n_steps": self.n_steps, "kappa": self.kappa, "eta": [float(v) for v in self.eta]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        sched = cls(eta=np.asarray(d["eta"], dtype=np.float64), kappa=float(d["kappa"]))
        if "n_steps" in d and int(d["n_steps"]) != sched.n_steps:
            raise ValueError("schedule n_steps does not match eta length")
        return sched

    def __eq__(self, other):
        if not isinstance(other, DiffusionSchedule):
            return NotImplemented
        return self.kappa == other.kappa and np.array_equal(self.eta, other.eta)

    __hash__ = None


def build_schedule(
    n_steps: int = DEFAULT_T,
    kappa: float = DEFAULT_KAPPA,
    eta_min: float = DEFAULT_ETA_MIN,
    eta_max: float = DEFAULT_ETA_MAX,
) -> DiffusionSchedule:
    """Schedule whose ``sqrt(eta_t)`` is geometric from ``sqrt(eta_min)`` to ``sqrt(eta_max)``."""
    if int(n_steps) != n_steps or n_steps < 2:
        raise ValueError(f"n_steps must be an integer >= 2, got {n_steps}")
    if not 0.0 < eta_min < eta_max <= 1.0:
        raise ValueError(f"need 0 < eta_min < eta_max <= 1, got {eta_min}, {eta_max}")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    frac = np.arange(int(n_steps), dtype=np.float64) / (n_steps - 1)
    sqrt_eta = np.sqrt(eta_min) * (np.sqrt(eta_max) / np.sqrt(eta_min)) ** frac
    eta = sqrt_eta**2
    eta[0], eta[-1] = eta_min, eta_max
    return DiffusionSchedule(eta=eta, kappa=kappa)


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for x in tensors[1:]:
        if x.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def eta_for(t, sched: DiffusionSchedule, like: torch.Tensor):
    """``eta_t`` as a float, or broadcastable per-sample tensor for a batch of timesteps."""
    if isinstance(t, torch.Tensor) and t.numel() > 1:
        if t.min() < 1 or t.max() > sched.n_steps:
            raise ValueError(f"timesteps outside [1, {sched.n_steps}]")
        eta = torch.tensor(sched.eta, dtype=like.dtype, device=like.device)[t.long() - 1]
        return eta.view(-1, *([1] * (like.ndim - 1)))
    sched.check_t(int(t))
    return sched.eta_at(int(t))


def forward_marginal(
    x0: torch.Tensor,
    y0: torch.Tensor,
    t,
    sched: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Sample ``q(x_t | x0, y0) = N(x0 + eta_t (y0 - x0), kappa^2 eta_t I)``.

    ``t`` is an int or a ``(B,)`` tensor of per-sample timesteps.
    """
    _same_shape(x0, y0, noise)
    eta_t = eta_for(t, sched, x0)
    # (1 - eta) x0 + eta y0 equals x0 + eta (y0 - x0) and is exactly y0 at eta = 1
    return (1 - eta_t) * x0 + eta_t * y0 + sched.kappa * eta_t**0.5 * noise


def reverse_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    sched: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}`` given the clean estimate."""
    _same_shape(x_t, x0_hat, noise)
    eta_t = sched.eta_at(t)
    eta_prev = sched.eta_at(t - 1)
    alpha_t = sched.alpha_at(t)
    mean = (eta_prev / eta_t) * x_t + (alpha_t / eta_t) * x0_hat
    if t == 1:
        return mean
    std = sched.kappa * (eta_prev / eta_t * alpha_t) ** 0.5
    return mean + std * noise


def resize_to(reference: torch.Tensor) -> Downsample:
    """Guidance operator projecting onto the grid of ``reference``."""
    size = tuple(reference.shape[-2:])
    return lambda x: bicubic_resize(x, size)


def scg_loss(x0_hat: torch.Tensor, reference: torch.Tensor, down: Downsample | None = None) -> torch.Tensor:
    """Sum of squared differences between ``reference`` and ``down(x0_hat)``."""
    down = down or resize_to(reference)
    projected = down(x0_hat)
    if projected.shape != reference.shape:
        raise ValueError(
            f"downsampled estimate {tuple(projected.shape)} does not match reference {tuple(reference.shape)}"
        )
    return ((reference - projected) ** 2).sum()


def scg_gradient(x0_hat: torch.Tensor, reference: torch.Tensor, down: Downsample | None = None) -> torch.Tensor:
    with torch.enable_grad():
        x = x0_hat.detach().requires_grad_(True)
        loss = scg_loss(x, reference.detach(), down)
        (grad,) = torch.autograd.grad(loss, x)
    return grad


def scg_update(
    x0_hat: torch.Tensor,
    reference: torch.Tensor,
    zeta: float,
    down: Downsample | None = None,
) -> torch.Tensor:
    """One gradient-descent step of size ``zeta`` on :func:`scg_loss`.

    Only the clean estimate is differentiated; the denoiser is never touched.
    """
    if zeta < 0:
        raise ValueError(f"guidance strength must be >= 0, got {zeta}")
    grad = scg_gradient(x0_hat, reference, down)
    return x0_hat.detach() - zeta * grad
