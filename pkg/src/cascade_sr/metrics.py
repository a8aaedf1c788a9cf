"""PSNR, SSIM and the cross-scale SelfSSIM consistency matrix.

Images live in ``[-1, 1]`` so the default dynamic range (``peak``) is 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import bicubic_resize, rgb_to_luma

DATA_RANGE = 2.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().double()
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def psnr(a, b, peak: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # separable valid-mode Gaussian filtering of (N, 1, H, W)
    x = F.conv2d(x, g.view(1, 1, -1, 1))
    return F.conv2d(x, g.view(1, 1, 1, -1))


def ssim_map(a, b, data_range: float = DATA_RANGE) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim >= 3:
        a, b = rgb_to_luma(a), rgb_to_luma(b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    a = a.reshape(-1, 1, *a.shape[-2:])
    b = b.reshape(-1, 1, *b.shape[-2:])
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    var_a = _filter(a * a, g) - mu_a**2
    var_b = _filter(b * b, g) - mu_b**2
    cov = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = DATA_RANGE) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5) on BT.601 luma."""
    a_t, b_t = _as_tensor(a), _as_tensor(b)
    if a_t.shape == b_t.shape and torch.equal(a_t, b_t):
        if min(a_t.shape[-2:]) < SSIM_WINDOW:
            raise ValueError("image smaller than the SSIM window")
        return 1.0
    return float(ssim_map(a_t, b_t, data_range).mean())


@dataclass(frozen=True)
class ConsistencyMatrix:
    scales: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.scales), len(self.scales)):
            raise ValueError("values must be square and match scales")
        if not np.all(np.isfinite(vals)):
            raise ValueError("non-finite consistency values")
        object.__setattr__(self, "values", vals)

    def entry(self, sa: float, sb: float) -> float:
        return float(self.values[self.scales.index(sa), self.scales.index(sb)])

    def format_table(self, digits: int = 3) -> str:
        width = max(8, digits + 4)
        head = "S".rjust(8) + "".join(f"{s:>{width}.2f}" for s in self.scales)
        rows = [head]
        for s, row in zip(self.scales, self.values):
            rows.append(f"{s:>8.2f}" + "".join(f"{v:>{width}.{digits}f}" for v in row))
        return "\n".join(rows)

    def to_csv_rows(self) -> list[list]:
        rows = [["scale"] + [f"{s:g}" for s in self.scales]]
        for s, row in zip(self.scales, self.values):
            rows.append([f"{s:g}"] + [f"{v:.6f}" for v in row])
        return rows


def self_ssim(
    outputs: Mapping[float, torch.Tensor],
    down: Callable[[torch.Tensor, tuple[int, int]], torch.Tensor] = bicubic_resize,
) -> ConsistencyMatrix:
    """Cross-scale SSIM of outputs produced from one input at several scales.

    For each pair the higher-resolution output is resampled onto the grid of
    the lower-resolution one and compared there. The diagonal is 1.
    """
    scales = tuple(float(s) for s in outputs)
    if len(scales) < 2:
        raise ValueError("need outputs at two or more scales")
    imgs = [outputs[s] for s in outputs]
    n = len(scales)
    vals = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = imgs[i], imgs[j]
            if a.shape[-2] * a.shape[-1] < b.shape[-2] * b.shape[-1]:
                a, b = b, a
            v = ssim(down(a, tuple(b.shape[-2:])), b)
            vals[i, j] = vals[j, i] = v
    return ConsistencyMatrix(scales=scales, values=vals)
