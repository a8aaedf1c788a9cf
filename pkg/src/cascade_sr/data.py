"""Datasets: flat image folders and the procedural desk-scale generator."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .imaging import load_image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)
SYNTHETIC_KINDS = ("field", "grating", "polygons", "mixed")


@dataclass
class Dataset:
    """In-memory list of CHW images in ``[-1, 1]`` plus per-item metadata.

    ``crop_size`` switches batch construction to random fixed-size patches;
    ``None`` trains on full images.
    """

    images: list[torch.Tensor]
    meta: list[dict] = field(default_factory=list)
    crop_size: tuple[int, int] | None = None
    seed: int | None = None
    source: str = "memory"

    def __post_init__(self):
        if not self.meta:
            self.meta = [{} for _ in self.images]
        if len(self.meta) != len(self.images):
            raise ValueError("meta and images differ in length")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.images[i]

    def split(self, n_val: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic train/val split: the last ``n_val`` items validate."""
        if not 0 <= n_val < len(self):
            raise ValueError(f"cannot hold out {n_val} of {len(self)} items")
        cut = len(self) - n_val
        mk = lambda sl: Dataset(self.images[sl], self.meta[sl], self.crop_size, self.seed, self.source)
        return mk(slice(0, cut)), mk(slice(cut, None))

    def crop(self, img: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.crop_size is None:
            return img
        ch, cw = self.crop_size
        H, W = img.shape[-2:]
        if ch > H or cw > W:
            raise ValueError(f"crop {self.crop_size} larger than image {(H, W)}")
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        return img[..., top : top + ch, left : left + cw]

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> torch.Tensor:
        if len(self) == 0:
            raise ValueError("dataset is empty")
        idx = rng.integers(0, len(self), size=batch_size)
        imgs = [self.crop(self.images[i], rng) for i in idx]
        shapes = {tuple(im.shape) for im in imgs}
        if len(shapes) != 1:
            raise ValueError(f"batch mixes image sizes {sorted(shapes)}; set crop_size")
        return torch.stack(imgs)

    def write_manifest(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        doc = {
            "source": self.source,
            "n_items": len(self),
            "seed": self.seed,
            "crop_size": list(self.crop_size) if self.crop_size else None,
            "items": self.meta,
        }
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def from_folder(cls, path: str | os.PathLike, crop_size: tuple[int, int] | None = None) -> "Dataset":
        root = Path(path)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset folder not found: {root}")
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"no images in {root}")
        images = [load_image(p) for p in files]
        meta = [{"file": p.name} for p in files]
        return cls(images, meta, crop_size, source=str(root))


def gaussian_random_field(size: tuple[int, int], rng: np.random.Generator, slope: float = 3.0) -> np.ndarray:
    """Zero-mean, unit-std field with power spectrum ~ ``|k|^-slope``."""
    h, w = size
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    k = np.sqrt(kx**2 + ky**2)
    k[0, 0] = np.inf
    amp = k ** (-slope / 2)
    spectrum = amp * (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w)))
    f = np.fft.ifft2(spectrum).real
    f -= f.mean()
    return f / (f.std() + 1e-12)


def grating(size: tuple[int, int], cycles: tuple[int, int], phase: float) -> np.ndarray:
    """Plane wave with an integer number of cycles per image along (y, x)."""
    h, w = size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.cos(2 * np.pi * (cycles[0] * yy / h + cycles[1] * xx / w) + phase)


def polygon_layer(size: tuple[int, int], rng: np.random.Generator, n_shapes: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """RGB overlay in ``[-1, 1]`` and a coverage mask of random filled polygons."""
    h, w = size
    canvas = Image.new("RGB", (w, h))
    mask = Image.new("L", (w, h))
    draw, mdraw = ImageDraw.Draw(canvas), ImageDraw.Draw(mask)
    for _ in range(n_shapes):
        n_vert = int(rng.integers(3, 7))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        radius = rng.uniform(0.15, 0.45) * min(h, w)
        ang = np.sort(rng.uniform(0, 2 * np.pi, n_vert))
        rad = radius * rng.uniform(0.5, 1.0, n_vert)
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a, r in zip(ang, rad)]
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        draw.polygon(pts, fill=color)
        mdraw.polygon(pts, fill=255)
    rgb = np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0
    return rgb, np.asarray(mask, dtype=np.float64)[None] / 255.0


def _colorize(field2d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    color = rng.uniform(0.3, 1.0, size=(3, 1, 1)) * rng.choice([-1.0, 1.0], size=(3, 1, 1))
    offset = rng.uniform(-0.3, 0.3, size=(3, 1, 1))
    return offset + color * field2d[None]


def synthetic_image(kind: str, size: tuple[int, int], rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    h, w = size
    meta: dict = {"kind": kind}
    if kind == "field":
        img = _colorize(0.4 * gaussian_random_field(size, rng, slope=rng.uniform(2.5, 4.0)), rng)
    elif kind == "grating":
        max_c = max(2, min(h, w) // 6)
        cycles = (int(rng.integers(-max_c, max_c + 1)), int(rng.integers(1, max_c + 1)))
        phase = float(rng.uniform(0, 2 * np.pi))
        img = _colorize(0.5 * grating(size, cycles, phase), rng)
        meta.update(cycles=list(cycles), phase=phase)
    elif kind == "polygons":
        base = _colorize(0.2 * gaussian_random_field(size, rng, slope=4.0), rng)
        rgb, mask = polygon_layer(size, rng)
        img = base * (1 - mask) + 0.8 * rgb * mask
    elif kind == "mixed":
        max_c = max(2, min(h, w) // 8)
        cycles = (int(rng.integers(-max_c, max_c + 1)), int(rng.integers(1, max_c + 1)))
        img = _colorize(0.3 * gaussian_random_field(size, rng), rng)
        img = img + _colorize(0.25 * grating(size, cycles, float(rng.uniform(0, 2 * np.pi))), rng) * 0.5
        rgb, mask = polygon_layer(size, rng, n_shapes=2)
        img = img * (1 - mask) + 0.7 * rgb * mask
        meta.update(cycles=list(cycles))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return np.clip(img, -1.0, 1.0), meta


def make_synthetic_dataset(
    n: int,
    size: tuple[int, int] = (64, 64),
    rng: np.random.Generator | int | None = 0,
    crop_size: tuple[int, int] | None = None,
) -> Dataset:
    """Procedural images mixing random fields, gratings and polygon overlays.

    Kinds cycle through :data:`SYNTHETIC_KINDS`; everything is determined by
    the seed.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    seed = rng if isinstance(rng, int) else None
    rng = np.random.default_rng(rng)
    images, meta = [], []
    for i in range(n):
        kind = SYNTHETIC_KINDS[i % len(SYNTHETIC_KINDS)]
        arr, m = synthetic_image(kind, tuple(size), rng)
        m["index"] = i
        images.append(torch.from_numpy(arr.astype(np.float32)))
        meta.append(m)
    return Dataset(images, meta, crop_size=crop_size, seed=seed, source="synthetic")
