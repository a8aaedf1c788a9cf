"""Image I/O and the canonical antialiased bicubic resampler.

Every resize in the package (training LR generation, the guidance
downsampling operator, bicubic base upsampling, SelfSSIM projection) goes
through :func:`bicubic_resize`. Images are float tensors shaped
``(..., C, H, W)`` with values in ``[-1, 1]``.
"""

from __future__ import annotations

import functools
import logging
import os
import warnings

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

CUBIC_A = -0.5


class UnsupportedImageError(ValueError):
    """Raised for image files this package refuses to ingest (e.g. 16-bit PNG)."""


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    out[near] = ((a + 2.0) * x[near] - (a + 3.0)) * x[near] ** 2 + 1.0
    out[far] = ((a * x[far] - 5.0 * a) * x[far] + 8.0 * a) * x[far] - 4.0 * a
    return out


@functools.lru_cache(maxsize=256)
def _weights_np(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    # widen the kernel when shrinking so it also acts as a low-pass filter
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    radius = 2.0 * support
    offsets = np.arange(-int(np.ceil(radius)) - 1, int(np.ceil(radius)) + 2)
    taps = np.floor(centers)[:, None] + offsets[None, :]
    w = cubic_kernel((taps - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    idx = np.clip(taps, 0, n_in - 1).astype(np.int64)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps.shape[1])
    np.add.at(mat, (rows, idx.ravel()), w.ravel())
    mat.setflags(write=False)
    return mat


@functools.lru_cache(maxsize=512)
def _weights_torch(n_in: int, n_out: int, dtype: torch.dtype) -> torch.Tensor:
    return torch.tensor(_weights_np(n_in, n_out), dtype=dtype)


def resize_matrix(n_in: int, n_out: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """The ``(n_out, n_in)`` 1-D resampling matrix applied along one axis."""
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got {n_in} -> {n_out}")
    mat = _weights_torch(int(n_in), int(n_out), dtype)
    return mat if device is None else mat.to(device)


def bicubic_resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize the last two axes of ``img`` to ``size = (h, w)``.

    Separable Catmull-Rom resampling with replicate edges. Downscaling widens
    the kernel by the size ratio (antialiasing). The operator is linear and
    differentiable, so autograd gives its exact adjoint.
    """
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if not torch.is_floating_point(img):
        img = img.float()
    H, W = img.shape[-2:]
    out = img
    if h != H:
        out = torch.matmul(resize_matrix(H, h, img.dtype, img.device), out)
    if w != W:
        out = torch.matmul(out, resize_matrix(W, w, img.dtype, img.device).T)
    return out


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Map ``[-1, 1]`` CHW to HWC uint8 with round-half-to-even."""
    arr = img.detach().cpu().double().numpy()
    arr = np.rint((arr + 1.0) * 127.5)
    arr = np.clip(arr, 0, 255).astype(np.uint8)
    return np.transpose(arr, (1, 2, 0))


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read an 8-bit image as a 3xHxW float tensor in ``[-1, 1]``."""
    try:
        im = Image.open(path)
        im.load()
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise UnsupportedImageError(f"cannot read image {path}: {exc}") from exc
    if im.mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F") or "16" in im.mode:
        raise UnsupportedImageError(f"{path}: {im.mode} images are not supported, use 8-bit RGB")
    if im.mode != "RGB":
        warnings.warn(f"{path}: converting mode {im.mode} to RGB", stacklevel=2)
        im = im.convert("RGB")
    return from_uint8(np.asarray(im))


def save_image(img: torch.Tensor, path: str | os.PathLike) -> None:
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("save_image expects a single image")
        img = img[0]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel CHW image, got shape {tuple(img.shape)}")
    arr = to_uint8(img)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    Image.fromarray(arr).save(path)


def rgb_to_luma(img: torch.Tensor) -> torch.Tensor:
    """ITU-R BT.601 luma; single-channel input is passed through."""
    if img.shape[-3] == 1:
        return img[..., 0, :, :]
    if img.shape[-3] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[-3]}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    return 0.299 * r + 0.587 * g + 0.114 * b
