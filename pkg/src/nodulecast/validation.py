"""Input-validation helpers shared by the estimators and stage functions."""

from __future__ import annotations

import numpy as np
import torch


def check_image_batch(images, image_size: int | None = None) -> np.ndarray:
    """Coerce a list/array of H×W images to a float32 (N, H, W) array.

    Accepts a single image, a list of images, or a stacked array. Checks that
    sides are divisible by 8 and values lie in [0, 1].
    """
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {arr.shape}")
    h, w = arr.shape[1:]
    if h % 8 or w % 8:
        raise ValueError(f"image sides must be divisible by 8, got {(h, w)}")
    if image_size is not None and (h != image_size or w != image_size):
        raise ValueError(f"expected {image_size}x{image_size} images, got {(h, w)}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_latent_batch(latents, channels: int = 4) -> torch.Tensor:
    """Coerce latents to a float32 (N, C, h, w) tensor."""
    if isinstance(latents, torch.Tensor):
        t = latents.float()
    else:
        t = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[1] != channels:
        raise ValueError(f"expected (N, {channels}, h, w) latents, got shape {tuple(t.shape)}")
    return t


def check_labels(labels, n: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be binary")
    if n is not None and len(arr) != n:
        raise ValueError(f"expected {n} labels, got {len(arr)}")
    return arr.astype(np.int64)
