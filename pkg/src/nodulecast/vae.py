"""Attribute-aligned variational autoencoder over nodule image crops.

The encoder compresses a 1-channel image by a factor of 8 per side into a
4-channel latent grid (posterior mean and log-variance); the decoder maps a
latent grid back to a [0, 1] image. Training optimizes per-pixel L1
reconstruction plus KL, perceptual, pairwise-alignment, and linear-probe
prediction terms. The pooled latent used by the alignment and prediction
terms is the spatial mean of each posterior-mean channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augment import random_rotation_batch
from .checkpoint import load_arrays_into, load_checkpoint, save_checkpoint, state_dict_to_arrays
from .features import FeatureEncoder
from .losses import (
    AlignmentConfig,
    LinearProbe,
    PerceptualFeatures,
    median_pairwise_distance,
    total_vae_loss,
)
from .trainutil import EpochSelector, require_finite
from .validation import check_image_batch

COMPRESSION_FACTOR = 8
LOG_VAR_CLAMP = (-30.0, 20.0)


def _block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(8, c_out),
        nn.SiLU(),
    )


class Encoder(nn.Module):
    def __init__(self, latent_channels: int = 4, channels: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            _block(1, c1, stride=2),
            _block(c1, c1),
            _block(c1, c2, stride=2),
            _block(c2, c2),
            _block(c2, c3, stride=2),
            _block(c3, c3),
        )
        self.head = nn.Conv2d(c3, 2 * latent_channels, 3, padding=1)
        self.latent_channels = latent_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.head(self.net(x * 2.0 - 1.0))
        mean, log_var = h.chunk(2, dim=1)
        return mean, log_var.clamp(*LOG_VAR_CLAMP)


class Decoder(nn.Module):
    def __init__(self, latent_channels: int = 4, channels: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        c1, c2, c3 = channels
        self.net = nn.Sequential(
            _block(latent_channels, c3),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _block(c3, c2),
            _block(c2, c2),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _block(c2, c1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _block(c1, c1),
        )
        self.out = nn.Conv2d(c1, 1, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(self.net(z)))


@dataclass
class LatentCode:
    """Encoder output: posterior grids, a reparameterized sample, pooled means."""

    mean: torch.Tensor
    log_var: torch.Tensor
    sample: torch.Tensor
    pooled: torch.Tensor


def pool_latent(mean: torch.Tensor) -> torch.Tensor:
    """Spatial global-average pooling per channel, flattened to (N, C)."""
    return mean.mean(dim=(2, 3))


def reparameterize(
    mean: torch.Tensor, log_var: torch.Tensor, generator: torch.Generator | None
) -> torch.Tensor:
    """mean + exp(log_var / 2) * noise; a None generator means zero noise."""
    if generator is None:
        return mean.clone()
    noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * log_var) * noise


class NoduleVae(BaseEstimator):
    """Variational autoencoder whose latent geometry tracks nodule attributes.

    Follows the scikit-learn estimator protocol: constructor arguments are
    stored verbatim, :meth:`fit` trains on record lists, :meth:`transform`
    maps images to pooled latent vectors and :meth:`inverse_transform`
    decodes latent grids back to images.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        channels: tuple[int, ...] = (32, 64, 128),
        lr: float = 5e-5,
        batch_size: int = 64,
        epochs: int = 40,
        lambda_kl: float = 1e-6,
        lambda_lpips: float = 0.5,
        lambda_align: float = 0.1,
        lambda_pred: float = 0.05,
        sigma_f: float | None = None,
        sigma_z: float | None = None,
        grad_clip: float = 1.0,
        rotation_augment: bool = True,
        seed: int = 0,
    ):
        self.latent_channels = latent_channels
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.lambda_kl = lambda_kl
        self.lambda_lpips = lambda_lpips
        self.lambda_align = lambda_align
        self.lambda_pred = lambda_pred
        self.sigma_f = sigma_f
        self.sigma_z = sigma_z
        self.grad_clip = grad_clip
        self.rotation_augment = rotation_augment
        self.seed = seed

    # ------------------------------------------------------------- training

    def _tensors_from_records(self, records, feature_encoder):
        """Both images of every pair become independent training samples."""
        images, feats, labels = [], [], []
        encoded = feature_encoder.transform([r.ehr for r in records])
        for i, rec in enumerate(records):
            for img in (rec.baseline_image, rec.followup_image):
                images.append(img)
                feats.append(encoded[i])
                labels.append(rec.label)
        x = torch.from_numpy(np.stack(images)).float()[:, None]
        f = torch.from_numpy(np.stack(feats)).float()
        y = torch.tensor(labels, dtype=torch.float32)
        return x, f, y

    def fit(self, records, val_records):
        torch.manual_seed(self.seed)
        self.feature_encoder_ = FeatureEncoder().fit([r.ehr for r in records])
        x, feats, labels = self._tensors_from_records(records, self.feature_encoder_)
        xv, fv, yv = self._tensors_from_records(val_records, self.feature_encoder_)
        self.image_size_ = int(x.shape[-1])

        self.encoder_ = Encoder(self.latent_channels, tuple(self.channels))
        self.decoder_ = Decoder(self.latent_channels, tuple(self.channels))
        self.probe_ = LinearProbe(self.latent_channels)
        self.perceptual_ = PerceptualFeatures()

        rng = np.random.default_rng(self.seed)
        noise_gen = torch.Generator().manual_seed(self.seed + 1)
        perm0 = rng.permutation(x.shape[0])
        first = torch.from_numpy(perm0[: self.batch_size])

        sigma_f = self.sigma_f or median_pairwise_distance(feats[first])
        if self.sigma_z is None:
            with torch.no_grad():
                mean0, _ = self.encoder_(x[first])
            sigma_z = median_pairwise_distance(pool_latent(mean0))
        else:
            sigma_z = self.sigma_z
        self.cfg_ = AlignmentConfig(
            sigma_f=sigma_f,
            sigma_z=sigma_z,
            lambda_kl=self.lambda_kl,
            lambda_lpips=self.lambda_lpips,
            lambda_align=self.lambda_align,
            lambda_pred=self.lambda_pred,
        )

        params = (
            list(self.encoder_.parameters())
            + list(self.decoder_.parameters())
            + list(self.probe_.parameters())
        )
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=0.0)

        selector = EpochSelector()
        self.history_ = []
        n = x.shape[0]
        perm = perm0
        for epoch in range(self.epochs):
            sums, count = {}, 0
            for start in range(0, n, self.batch_size):
                idx = torch.from_numpy(perm[start : start + self.batch_size])
                if idx.shape[0] < 2:
                    continue
                xb = x[idx]
                if self.rotation_augment:
                    xb = random_rotation_batch(xb, rng)
                total, terms = self._loss_on(xb, feats[idx], labels[idx], noise_gen)
                require_finite(terms, f"training epoch {epoch}")
                opt.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(params, self.grad_clip)
                opt.step()
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
            val_terms = self.evaluate_loss(xv, fv, yv)
            require_finite(val_terms, f"validation epoch {epoch}")
            entry = {"epoch": epoch}
            entry.update({f"train_{k}": v / count for k, v in sums.items()})
            entry.update({f"val_{k}": v for k, v in val_terms.items()})
            self.history_.append(entry)
            selector.offer(epoch, val_terms["total"], self._arrays())
            perm = rng.permutation(n)

        self.best_epoch_, self.val_loss_, arrays = selector.resolve()
        self._load_arrays(arrays)
        return self

    def _loss_on(self, xb, fb, yb, noise_gen):
        mean, log_var = self.encoder_(xb)
        sample = reparameterize(mean, log_var, noise_gen)
        x_hat = self.decoder_(sample)
        return total_vae_loss(
            xb, x_hat, mean, log_var, pool_latent(mean), fb, yb,
            self.probe_, self.cfg_, self.perceptual_,
        )

    def evaluate_loss(self, x, feats, labels) -> dict[str, float]:
        """Deterministic loss terms (posterior mean, no augmentation)."""
        with torch.no_grad():
            _, terms = self._loss_on(x, feats, labels, noise_gen=None)
        return terms

    # ------------------------------------------------------------ inference

    def encode(self, images, generator: torch.Generator | None = None) -> LatentCode:
        """Map [0,1] images to posterior grids; None generator -> zero noise."""
        check_is_fitted(self, "encoder_")
        arr = check_image_batch(images, self.image_size_)
        x = torch.from_numpy(arr)[:, None]
        with torch.no_grad():
            mean, log_var = self.encoder_(x)
            sample = reparameterize(mean, log_var, generator)
        return LatentCode(mean=mean, log_var=log_var, sample=sample, pooled=pool_latent(mean))

    def transform(self, images) -> np.ndarray:
        """Pooled posterior-mean latent vectors, shape (N, latent_channels)."""
        return self.encode(images).pooled.numpy()

    def decode(self, latents) -> np.ndarray:
        check_is_fitted(self, "decoder_")
        if isinstance(latents, np.ndarray):
            latents = torch.from_numpy(latents).float()
        if latents.ndim == 3:
            latents = latents[None]
        with torch.no_grad():
            out = self.decoder_(latents)
        return out[:, 0].numpy()

    inverse_transform = decode

    def reconstruct(self, images) -> np.ndarray:
        return self.decode(self.encode(images).mean)

    # ---------------------------------------------------------- persistence

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays = state_dict_to_arrays(self.encoder_.state_dict(), "encoder.")
        arrays.update(state_dict_to_arrays(self.decoder_.state_dict(), "decoder."))
        arrays.update(state_dict_to_arrays(self.probe_.state_dict(), "probe."))
        return arrays

    def _load_arrays(self, arrays) -> None:
        load_arrays_into(self.encoder_, arrays, "encoder.")
        load_arrays_into(self.decoder_, arrays, "decoder.")
        load_arrays_into(self.probe_, arrays, "probe.")

    def save(self, path, extra_meta: dict | None = None) -> None:
        check_is_fitted(self, "encoder_")
        meta = {
            "kind": "vae",
            "params": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in self.get_params().items()},
            "image_size": self.image_size_,
            "sigma_f": self.cfg_.sigma_f,
            "sigma_z": self.cfg_.sigma_z,
            "best_epoch": self.best_epoch_,
            "val_loss": self.val_loss_,
            "feature_encoder": self.feature_encoder_.get_state(),
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, self._arrays(), meta)

    @classmethod
    def load(cls, path) -> "NoduleVae":
        arrays, meta = load_checkpoint(path)
        params = dict(meta["params"])
        params["channels"] = tuple(params["channels"])
        model = cls(**params)
        model.image_size_ = int(meta["image_size"])
        model.feature_encoder_ = FeatureEncoder.from_state(meta["feature_encoder"])
        model.encoder_ = Encoder(model.latent_channels, tuple(model.channels))
        model.decoder_ = Decoder(model.latent_channels, tuple(model.channels))
        model.probe_ = LinearProbe(model.latent_channels)
        model.perceptual_ = PerceptualFeatures()
        model._load_arrays(arrays)
        model.cfg_ = AlignmentConfig(
            sigma_f=float(meta["sigma_f"]),
            sigma_z=float(meta["sigma_z"]),
            lambda_kl=model.lambda_kl,
            lambda_lpips=model.lambda_lpips,
            lambda_align=model.lambda_align,
            lambda_pred=model.lambda_pred,
        )
        model.best_epoch_ = int(meta["best_epoch"])
        model.val_loss_ = float(meta["val_loss"])
        model.meta_ = meta
        return model
