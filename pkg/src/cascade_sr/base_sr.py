"""Base continuous-resolution SR model anchoring the residual space.

The diffusion stages model ``x - g(x_init)`` where ``g`` renders the initial
LR image at the stage grid. ``bicubic`` mode uses the shared resampler and
needs no training; ``learned`` mode adds a coordinate-queried correction on
top of it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset
from .imaging import bicubic_resize
from .metrics import psnr

log = logging.getLogger(__name__)

MIN_GAIN_DB = 0.2


class BaseTrainingError(RuntimeError):
    pass


class CoordinateQueryUpsampler(nn.Module):
    """LR feature encoder plus a per-pixel decoder queried at HR pixel centres.

    Each HR pixel receives the bicubically interpolated LR features, its
    fractional offset inside the LR pixel and the cell size, and predicts a
    correction added to plain bicubic upsampling.
    """

    def __init__(self, channels: int = 32, n_blocks: int = 2, hidden: int = 64):
        super().__init__()
        self.channels, self.n_blocks, self.hidden = channels, n_blocks, hidden
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.body = nn.ModuleList(
            nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
                          nn.Conv2d(channels, channels, 3, padding=1))
            for _ in range(n_blocks)
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(channels + 4, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 1), nn.ReLU(),
            nn.Conv2d(hidden, 3, 1),
        )

    def query(self, lr_shape: tuple[int, int], size: tuple[int, int], like: torch.Tensor) -> torch.Tensor:
        (h, w), (H, W) = lr_shape, size
        ys = (torch.arange(H, dtype=like.dtype) + 0.5) * h / H
        xs = (torch.arange(W, dtype=like.dtype) + 0.5) * w / W
        fy = (ys - torch.floor(ys) - 0.5)[:, None].expand(H, W)
        fx = (xs - torch.floor(xs) - 0.5)[None, :].expand(H, W)
        cy = torch.full((H, W), h / H, dtype=like.dtype)
        cx = torch.full((H, W), w / W, dtype=like.dtype)
        return torch.stack([fy, fx, cy, cx]).to(like.device)

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        feat = self.head(x)
        res = feat
        for blk in self.body:
            res = res + blk(res)
        feat = bicubic_resize(feat + res, size)
        q = self.query(tuple(x.shape[-2:]), size, x).unsqueeze(0).expand(x.shape[0], -1, -1, -1)
        return bicubic_resize(x, size) + self.decoder(torch.cat([feat, q], dim=1))


@dataclass
class BaseSRModel:
    mode: str = "bicubic"
    net: CoordinateQueryUpsampler | None = None

    def __post_init__(self):
        if self.mode not in ("bicubic", "learned"):
            raise ValueError(f"unknown base SR mode {self.mode!r}")
        if self.mode == "bicubic" and self.net is not None:
            raise ValueError("bicubic mode takes no parameters")
        if self.mode == "learned":
            if self.net is None:
                raise ValueError("learned mode requires trained parameters")
            if not all(torch.isfinite(p).all() for p in self.net.parameters()):
                raise ValueError("learned base model has non-finite parameters")

    def state(self) -> dict:
        if self.mode == "bicubic":
            return {"mode": "bicubic"}
        n = self.net
        return {
            "mode": "learned",
            "arch": {"channels": n.channels, "n_blocks": n.n_blocks, "hidden": n.hidden},
            "weights": {k: v.detach().clone() for k, v in n.state_dict().items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "BaseSRModel":
        if state["mode"] == "bicubic":
            return cls("bicubic")
        net = CoordinateQueryUpsampler(**state["arch"])
        net.load_state_dict(state["weights"])
        net.eval()
        return cls("learned", net)


def base_upsample(x_init: torch.Tensor, target_res: tuple[int, int], model: BaseSRModel | None = None) -> torch.Tensor:
    """Render ``x_init`` on the ``target_res`` grid (deterministic)."""
    model = model or BaseSRModel()
    H, W = int(target_res[0]), int(target_res[1])
    h, w = x_init.shape[-2:]
    if H < h or W < w:
        raise ValueError(f"target {(H, W)} smaller than input {(h, w)}")
    if model.mode == "bicubic":
        return bicubic_resize(x_init, (H, W))
    if model.net is None:
        raise ValueError("learned mode requires trained parameters")
    squeeze = x_init.ndim == 3
    x = x_init.unsqueeze(0) if squeeze else x_init
    with torch.no_grad():
        out = model.net(x, (H, W))
    return out[0] if squeeze else out


def _lr_pair(hr: torch.Tensor, scale: float) -> tuple[torch.Tensor, tuple[int, int]]:
    H, W = hr.shape[-2:]
    h, w = max(1, round(H / scale)), max(1, round(W / scale))
    return bicubic_resize(hr, (h, w)), (H, W)


def validation_gain(model: BaseSRModel, val: Dataset, scale: float = 2.0) -> tuple[float, float]:
    """Mean PSNR (learned, bicubic) at ``scale`` over the validation images."""
    ours, ref = [], []
    for hr in val.images:
        lr, size = _lr_pair(hr, scale)
        ours.append(psnr(base_upsample(lr, size, model).clamp(-1, 1), hr))
        ref.append(psnr(bicubic_resize(lr, size).clamp(-1, 1), hr))
    return float(np.mean(ours)), float(np.mean(ref))


def pretrain_base(
    dataset: Dataset,
    epochs: int,
    seed: int = 0,
    *,
    n_val: int | None = None,
    batch_size: int = 16,
    lr: float = 1e-3,
    channels: int = 32,
    n_blocks: int = 2,
    check: bool = True,
) -> BaseSRModel:
    """Fit the learned base model with L1 regression on mixed scales.

    Raises :class:`BaseTrainingError` when the held-out x2 PSNR does not beat
    bicubic by :data:`MIN_GAIN_DB` (with ``check=True``) or the loss diverges.
    """
    if len(dataset) < 4:
        raise BaseTrainingError(f"need at least 4 images to pretrain, got {len(dataset)}")
    n_val = n_val if n_val is not None else max(1, len(dataset) // 10)
    train, val = dataset.split(n_val)
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = CoordinateQueryUpsampler(channels, n_blocks)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps_per_epoch = max(1, math.ceil(len(train) / batch_size))
    for epoch in range(epochs):
        for _ in range(steps_per_epoch):
            hr = train.sample_batch(batch_size, rng)
            scale = 2.0 if rng.random() < 0.5 else float(rng.uniform(1.2, 4.0))
            lr_img, size = _lr_pair(hr, scale)
            loss = F.l1_loss(net(lr_img, size), hr)
            if not torch.isfinite(loss):
                raise BaseTrainingError(f"non-finite loss in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.debug("base epoch %d loss %.5f", epoch, loss.item())
    net.eval()
    model = BaseSRModel("learned", net)
    if check:
        ours, ref = validation_gain(model, val)
        log.info("base SR x2 validation PSNR %.3f dB vs bicubic %.3f dB", ours, ref)
        if not ours - ref >= MIN_GAIN_DB:
            raise BaseTrainingError(
                f"learned base model gains {ours - ref:.3f} dB over bicubic at x2, need {MIN_GAIN_DB}"
            )
    return model
