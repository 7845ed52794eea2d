"""Loss terms for the attribute-aligned variational autoencoder.

The composite objective combines per-pixel L1 reconstruction, a diagonal
Gaussian KL regularizer, a fixed-feature perceptual distance, a pairwise
distribution-matching alignment term, and a linear-probe prediction term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

LOG_FLOOR_EPS = 1e-12
PROBE_EPS = 1e-7
PERCEPTUAL_SEED = 101


@dataclass
class AlignmentConfig:
    """Bandwidths and loss weights for the composite objective."""

    sigma_f: float
    sigma_z: float
    lambda_kl: float = 1e-6
    lambda_lpips: float = 0.5
    lambda_align: float = 0.1
    lambda_pred: float = 0.05

    def __post_init__(self):
        if self.sigma_f <= 0 or self.sigma_z <= 0:
            raise ValueError("sigma_f and sigma_z must be strictly positive")
        for name in ("lambda_kl", "lambda_lpips", "lambda_align", "lambda_pred"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def pairwise_sq_dists(x: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances between rows, smooth at zero distance."""
    sq = (x * x).sum(dim=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return d2.clamp_min(0.0)


def _log_similarity_rows(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Row-normalized log-probabilities of pairwise Gaussian similarities.

    Row i is a log-softmax of -||x_j - x_i||^2 / (2 sigma^2) over j != i;
    diagonal entries are -inf (probability zero).
    """
    logits = -pairwise_sq_dists(x) / (2.0 * sigma**2)
    eye = torch.eye(x.shape[0], dtype=torch.bool, device=x.device)
    logits = logits.masked_fill(eye, float("-inf"))
    return logits - torch.logsumexp(logits, dim=1, keepdim=True)


def alignment_loss(
    latents: torch.Tensor,
    features: torch.Tensor,
    sigma_f: float,
    sigma_z: float,
    eps: float = LOG_FLOOR_EPS,
) -> torch.Tensor:
    """Mean row-wise KL between feature-similarity and latent-similarity rows.

    Both similarity matrices are row-softmaxed excluding the diagonal; the
    result is (1/B) sum_i sum_{j!=i} P_ij log(P_ij / Q_ij), computed in
    log-space with a floor of ``eps`` inside the logarithms.
    """
    if latents.shape[0] != features.shape[0]:
        raise ValueError("latents and features must have the same batch size")
    b = latents.shape[0]
    if b < 2:
        raise ValueError("alignment loss needs a batch of at least 2 samples")
    floor = math.log(eps)
    log_p = _log_similarity_rows(features, sigma_f)
    log_q = _log_similarity_rows(latents, sigma_z)
    p = torch.exp(log_p)
    kl = p * (log_p.clamp_min(floor) - log_q.clamp_min(floor))
    return kl.sum() / b


class LinearProbe(nn.Module):
    """Single linear layer mapping pooled latents to a malignancy logit."""

    def __init__(self, in_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z).squeeze(-1)


def probe_bce(probs: torch.Tensor, labels: torch.Tensor, eps: float = PROBE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy over probabilities clamped to [eps, 1-eps]."""
    h = probs.clamp(eps, 1.0 - eps)
    labels = labels.to(h.dtype)
    return -(labels * torch.log(h) + (1.0 - labels) * torch.log1p(-h)).mean()


def predictive_loss(latents: torch.Tensor, labels: torch.Tensor, probe: LinearProbe) -> torch.Tensor:
    """Binary cross-entropy of a sigmoid linear probe on pooled latents."""
    return probe_bce(torch.sigmoid(probe(latents)), labels)


def gaussian_kl(mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(log_var)) || N(0, 1)), averaged over all elements."""
    return 0.5 * (mean.square() + log_var.exp() - 1.0 - log_var).mean()


class PerceptualFeatures(nn.Module):
    """Fixed-weight 3-layer convolutional feature extractor.

    Weights are drawn once from a seeded generator and never trained; the
    resulting feature distance serves as the perceptual term of the VAE
    objective and as the evaluation-time perceptual metric.
    """

    def __init__(self, seed: int = PERCEPTUAL_SEED, channels: tuple[int, int, int] = (8, 16, 16)):
        super().__init__()
        c1, c2, c3 = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(1, c1, 3, padding=1),
                nn.Conv2d(c1, c2, 3, stride=2, padding=1),
                nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            ]
        )
        gen = torch.Generator().manual_seed(seed)
        for conv in self.convs:
            fan_in = conv.in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in)
                )
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        h = x.to(self.convs[0].weight.dtype) * 2.0 - 1.0
        for conv in self.convs[:-1]:
            h = torch.tanh(conv(h))
        return self.convs[-1](h)


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, extractor: PerceptualFeatures) -> torch.Tensor:
    """Mean squared distance between fixed feature maps of the two images."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (extractor(x) - extractor(x_hat)).square().mean()


def total_vae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    mean: torch.Tensor,
    log_var: torch.Tensor,
    pooled: torch.Tensor,
    features: torch.Tensor,
    labels: torch.Tensor,
    probe: LinearProbe,
    cfg: AlignmentConfig,
    extractor: PerceptualFeatures,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the five loss terms plus a per-term breakdown."""
    rec = (x - x_hat).abs().mean()
    kl = gaussian_kl(mean, log_var)
    lpips = perceptual_loss(x, x_hat, extractor)
    if cfg.lambda_align > 0:
        align = alignment_loss(pooled, features, cfg.sigma_f, cfg.sigma_z)
    else:
        align = torch.zeros((), dtype=rec.dtype, device=rec.device)
    if cfg.lambda_pred > 0:
        pred = predictive_loss(pooled, labels, probe)
    else:
        pred = torch.zeros((), dtype=rec.dtype, device=rec.device)
    total = (
        rec
        + cfg.lambda_kl * kl
        + cfg.lambda_lpips * lpips
        + cfg.lambda_align * align
        + cfg.lambda_pred * pred
    )
    terms = {
        "rec": float(rec.detach()),
        "kl": float(kl.detach()),
        "lpips": float(lpips.detach()),
        "align": float(align.detach()),
        "pred": float(pred.detach()),
        "total": float(total.detach()),
    }
    return total, terms


def median_pairwise_distance(x: torch.Tensor) -> float:
    """Median off-diagonal pairwise Euclidean distance (bandwidth heuristic)."""
    with torch.no_grad():
        d2 = pairwise_sq_dists(x.double())
        n = x.shape[0]
        off = d2[~torch.eye(n, dtype=torch.bool)].sqrt()
        value = float(off.median())
    return value if value > 0 else 1.0
