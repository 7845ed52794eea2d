"""Rotation augmentation applied during image-space training."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

ROTATION_ANGLES = (45.0, 90.0, 135.0, 180.0)


def rotate_images(images: torch.Tensor, angles_deg: torch.Tensor) -> torch.Tensor:
    """Rotate a (N, 1, H, W) batch about the center by per-sample angles.

    Bilinear resampling with border padding; at multiples of 90 degrees the
    sampling grid lands exactly on pixel centers.
    """
    theta = angles_deg.to(images.dtype) * (math.pi / 180.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(cos)
    mats = torch.stack(
        [torch.stack([cos, -sin, zeros], dim=1), torch.stack([sin, cos, zeros], dim=1)],
        dim=1,
    )
    grid = F.affine_grid(mats, list(images.shape), align_corners=False)
    return F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)


def random_rotation_batch(
    images: torch.Tensor, rng, p_rotate: float = 0.5
) -> torch.Tensor:
    """With probability ``p_rotate`` per sample, rotate by one of the fixed angles."""
    n = images.shape[0]
    apply = rng.random(n) < p_rotate
    if not apply.any():
        return images
    choice = rng.integers(0, len(ROTATION_ANGLES), size=n)
    angles = torch.tensor(
        [ROTATION_ANGLES[c] if a else 0.0 for a, c in zip(apply, choice)],
        dtype=images.dtype,
    )
    return rotate_images(images, angles)
