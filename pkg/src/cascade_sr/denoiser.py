"""Coordinate-conditioned denoiser predicting the clean residual image.

Layout (toy scale):

* ``E_lr`` / ``E_init``: small residual CNN encoders for the stage
  conditioning image and the initial LR image. ``E_init`` runs at the LR
  grid and its features are bicubically upsampled to the stage grid.
* ``E_c``: Fourier features of the pixel-centre coordinate map followed by
  two convolutions.
* coordinate adapter: an encoder mirroring the denoiser's, without
  modulation, fed with ``E_c`` features plus the denoiser input features and
  the (timestep, scale) embedding. Each level emits zero-initialised
  ``(gamma, beta)`` maps that modulate the denoiser's residual blocks as
  ``h * (1 + gamma) + beta``.
* denoiser: 2-level U-Net of residual blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import bicubic_resize


@dataclass(frozen=True)
class CoordinateMap:
    """Pixel-centre coordinates in ``(-1, 1)``: channel 0 is vertical, 1 horizontal."""

    coords: torch.Tensor
    cell_size: tuple[float, float]

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.coords.shape[-2:])


def make_coordinate_map(h: int, w: int, dtype=torch.float32) -> CoordinateMap:
    if h < 1 or w < 1:
        raise ValueError(f"coordinate map needs positive size, got {(h, w)}")
    ys = -1.0 + (2.0 * torch.arange(h, dtype=torch.float64) + 1.0) / h
    xs = -1.0 + (2.0 * torch.arange(w, dtype=torch.float64) + 1.0) / w
    grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij")).to(dtype)
    return CoordinateMap(coords=grid, cell_size=(2.0 / h, 2.0 / w))


def fourier_encode(cmap: CoordinateMap | torch.Tensor, n_bands: int) -> torch.Tensor:
    """``[sin(2^b pi u), cos(2^b pi u)]`` for each axis ``u`` and band ``b``.

    Returns ``4 * n_bands`` channels ordered axis-major, then band, then
    (sin, cos).
    """
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    coords = cmap.coords if isinstance(cmap, CoordinateMap) else cmap
    freqs = (2.0 ** torch.arange(n_bands, dtype=coords.dtype, device=coords.device)) * math.pi
    # (..., 2, H, W) -> (..., 2, n_bands, H, W)
    arg = coords.unsqueeze(-3) * freqs.view(-1, 1, 1)
    feats = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-3)
    return feats.reshape(*coords.shape[:-3], 4 * n_bands, *coords.shape[-2:])


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=x.device) / half)
    arg = x.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(arg), torch.sin(arg)], dim=-1)


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2)
    n_fourier_bands: int = 6
    embed_dim: int = 64
    n_res_blocks: int = 1
    encoder_channels: int = 16
    encoder_blocks: int = 1
    image_channels: int = 3
    min_resolution: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        ints = [self.base_channels, self.n_fourier_bands, self.embed_dim, self.n_res_blocks,
                self.encoder_channels, self.encoder_blocks, self.image_channels, self.min_resolution]
        if any(int(v) != v or v < 1 for v in ints) or not self.channel_multipliers:
            raise ValueError(f"all denoiser sizes must be positive integers: {self}")
        if any(m < 1 for m in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if 2 ** (len(self.channel_multipliers) - 1) > self.min_resolution:
            raise ValueError(
                f"{len(self.channel_multipliers)} resolution levels need inputs of at least "
                f"{2 ** (len(self.channel_multipliers) - 1)} px, min_resolution is {self.min_resolution}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    """Pre-activation residual block with optional embedding and SFT modulation."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch) if emb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb=None, gamma=None, beta=None):
        h = self.norm1(x)
        if gamma is not None:
            h = h * (1 + gamma) + beta
        h = self.conv1(F.silu(h))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ConvEncoder(nn.Module):
    """EDSR-style head + residual body (no normalisation)."""

    def __init__(self, in_ch: int, ch: int, n_blocks: int):
        super().__init__()
        self.head = nn.Conv2d(in_ch, ch, 3, padding=1)
        self.body = nn.ModuleList(
            nn.Sequential(nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU(), nn.Conv2d(ch, ch, 3, padding=1))
            for _ in range(n_blocks)
        )
        self.tail = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.head(x)
        res = h
        for blk in self.body:
            res = res + blk(res)
        return h + self.tail(res)


class ModulationHead(nn.Module):
    """1x1 conv producing ``(gamma, beta)``; zero-initialised so SFT starts as identity."""

    def __init__(self, cond_ch: int, target_ch: int):
        super().__init__()
        self.proj = nn.Conv2d(cond_ch, 2 * target_ch, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, cond):
        gamma, beta = self.proj(cond).chunk(2, dim=1)
        return gamma, beta


def _resize_like(x, ref):
    if x.shape[-2:] == ref.shape[-2:]:
        return x
    return F.interpolate(x, size=ref.shape[-2:], mode="nearest")


class CoordinateDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        C = config.base_channels
        chans = [C * m for m in config.channel_multipliers]
        E = config.embed_dim
        enc_ch = config.encoder_channels
        img_ch = config.image_channels

        self.embed_mlp = nn.Sequential(nn.Linear(2 * E, E), nn.SiLU(), nn.Linear(E, E))
        self.lr_encoder = ConvEncoder(img_ch, enc_ch, config.encoder_blocks)
        self.init_encoder = ConvEncoder(img_ch, enc_ch, config.encoder_blocks)
        self.conv_in = nn.Conv2d(img_ch + 2 * enc_ch, chans[0], 3, padding=1)

        n_fourier = 4 * config.n_fourier_bands
        self.coord_encoder = nn.Sequential(
            nn.Conv2d(n_fourier, chans[0], 3, padding=1), nn.SiLU(), nn.Conv2d(chans[0], chans[0], 3, padding=1)
        )
        self.adapter_emb = nn.Linear(E, chans[0])

        # adapter mirrors the U-Net encoder without modulation
        self.adapter_blocks = nn.ModuleList()
        self.adapter_down = nn.ModuleList()
        prev = chans[0]
        for lvl, ch in enumerate(chans):
            self.adapter_blocks.append(
                nn.ModuleList(ResBlock(prev if i == 0 else ch, ch, E) for i in range(config.n_res_blocks))
            )
            prev = ch
            if lvl < len(chans) - 1:
                self.adapter_down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.enc_blocks = nn.ModuleList()
        self.enc_mods = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for lvl, ch in enumerate(chans):
            blocks, mods = nn.ModuleList(), nn.ModuleList()
            for i in range(config.n_res_blocks):
                cin = prev if i == 0 else ch
                blocks.append(ResBlock(cin, ch, E))
                mods.append(ModulationHead(ch, cin))
            self.enc_blocks.append(blocks)
            self.enc_mods.append(mods)
            prev = ch
            if lvl < len(chans) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_block = ResBlock(chans[-1], chans[-1], E)
        self.mid_mod = ModulationHead(chans[-1], chans[-1])

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        self.dec_mods = nn.ModuleList()
        prev = chans[-1]
        for lvl in reversed(range(len(chans) - 1)):
            ch = chans[lvl]
            self.ups.append(nn.Conv2d(prev, prev, 3, padding=1))
            cin = prev + ch
            self.dec_blocks.append(ResBlock(cin, ch, E))
            self.dec_mods.append(ModulationHead(ch, cin))
            prev = ch

        self.norm_out = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.conv_out = nn.Conv2d(chans[0], img_ch, 3, padding=1)

    def embed(self, t: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        E = self.config.embed_dim
        raw = torch.cat([sinusoidal_embedding(t, E), sinusoidal_embedding(100.0 * s, E)], dim=-1)
        return self.embed_mlp(raw)

    def forward(self, x_t, t, s, x_lr_up, x_init, cmap: CoordinateMap | torch.Tensor | None = None):
        B, _, H, W = x_t.shape
        if cmap is None:
            cmap = make_coordinate_map(H, W, x_t.dtype)
        coords = cmap.coords if isinstance(cmap, CoordinateMap) else cmap
        coords = coords.to(x_t)
        if coords.ndim == 3:
            coords = coords.unsqueeze(0).expand(B, -1, -1, -1)
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(B)
        s = torch.as_tensor(s, dtype=torch.float32, device=x_t.device).reshape(-1).expand(B)
        emb = self.embed(t, s)

        f_lr = self.lr_encoder(x_lr_up)
        f_init = bicubic_resize(self.init_encoder(x_init), (H, W))
        h = self.conv_in(torch.cat([x_t, f_lr, f_init], dim=1))

        # coordinate adapter -> per-level conditioning maps
        a = self.coord_encoder(fourier_encode(coords, self.config.n_fourier_bands)) + h
        a = a + self.adapter_emb(emb)[:, :, None, None]
        cond = []
        for lvl, blocks in enumerate(self.adapter_blocks):
            for blk in blocks:
                a = blk(a, emb)
            cond.append(a)
            if lvl < len(self.adapter_down):
                a = self.adapter_down[lvl](a)

        skips = []
        for lvl, (blocks, mods) in enumerate(zip(self.enc_blocks, self.enc_mods)):
            for blk, mod in zip(blocks, mods):
                h = blk(h, emb, *mod(cond[lvl]))
            if lvl < len(self.downs):
                skips.append(h)
                h = self.downs[lvl](h)

        h = self.mid_block(h, emb, *self.mid_mod(cond[-1]))

        for up, blk, mod in zip(self.ups, self.dec_blocks, self.dec_mods):
            skip = skips.pop()
            lvl = len(skips)
            h = up(_resize_like(h, skip))
            h = torch.cat([h, skip], dim=1)
            h = blk(h, emb, *mod(cond[lvl]))

        return self.conv_out(F.silu(self.norm_out(h)))


def init_params(config: DenoiserConfig = DenoiserConfig(), seed: int = 0) -> CoordinateDenoiser:
    """Fan-in scaled init (PyTorch defaults) under a private RNG; modulation heads are zero."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return CoordinateDenoiser(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def denoise(
    model: CoordinateDenoiser,
    x_t: torch.Tensor,
    t,
    s,
    x_lr_up: torch.Tensor,
    x_init: torch.Tensor,
    cmap: CoordinateMap | None = None,
    *,
    n_steps: int | None = None,
    max_scale: float | None = None,
) -> torch.Tensor:
    """Validated call of the denoiser; returns the clean-residual estimate."""
    if x_t.shape != x_lr_up.shape:
        raise ValueError(f"x_t {tuple(x_t.shape)} and conditioning {tuple(x_lr_up.shape)} differ")
    if cmap is not None and cmap.shape != tuple(x_t.shape[-2:]):
        raise ValueError(f"coordinate map {cmap.shape} does not match x_t {tuple(x_t.shape[-2:])}")
    min_res = 2 ** (len(model.config.channel_multipliers) - 1)
    if min(x_t.shape[-2:]) < min_res:
        raise ValueError(f"input {tuple(x_t.shape[-2:])} below the network's minimum size {min_res}")
    t_arr = torch.as_tensor(t)
    if n_steps is not None and (t_arr.min() < 1 or t_arr.max() > n_steps):
        raise ValueError(f"timestep outside [1, {n_steps}]")
    s_arr = torch.as_tensor(s, dtype=torch.float64)
    if not torch.all(torch.isfinite(s_arr)) or s_arr.min() < 1.0:
        raise ValueError(f"scale must be >= 1, got {s}")
    if max_scale is not None and s_arr.max() > max_scale * (1 + 1e-9):
        raise ValueError(f"scale {s} above the per-stage maximum {max_scale}")
    return model(x_t, t, s, x_lr_up, x_init, cmap)
