"""Frozen downstream malignancy classifier used for all evaluation scoring.

A small convolutional network with one self-attention layer, trained only on
real follow-up images from the training split. After fitting it is frozen
and hash-stamped; its penultimate (pooled) features double as the feature
space for distribution-distance metrics.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augment import random_rotation_batch
from .checkpoint import load_arrays_into, load_checkpoint, save_checkpoint, state_dict_to_arrays
from .hashing import sha256_bytes
from .trainutil import require_finite
from .validation import check_image_batch, check_labels


class _SelfAttention2d(nn.Module):
    def __init__(self, channels: int, n_heads: int = 4):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.n_heads, c // self.n_heads, h * w).unbind(1)
        attn = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(c // self.n_heads), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class ClassifierNet(nn.Module):
    def __init__(self, channels: tuple[int, ...] = (16, 32, 64, 96)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.blocks = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.GroupNorm(8, c1), nn.SiLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GroupNorm(8, c2), nn.SiLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.GroupNorm(8, c3), nn.SiLU(),
            _SelfAttention2d(c3),
            nn.Conv2d(c3, c4, 3, stride=2, padding=1), nn.GroupNorm(8, c4), nn.SiLU(),
        )
        self.head = nn.Linear(c4, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x * 2.0 - 1.0).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x)).squeeze(-1)


class MalignancyClassifier(BaseEstimator, ClassifierMixin):
    """Binary malignancy scorer over follow-up images.

    ``fit`` refuses to train if any supplied patient id belongs to the
    held-out set, enforcing patient-level split hygiene at the API boundary.
    """

    def __init__(
        self,
        channels: tuple[int, ...] = (16, 32, 64, 96),
        lr: float = 1e-3,
        batch_size: int = 64,
        epochs: int = 20,
        rotation_augment: bool = True,
        seed: int = 0,
    ):
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.rotation_augment = rotation_augment
        self.seed = seed

    def fit(
        self,
        images,
        labels,
        patient_ids=None,
        forbidden_patient_ids=None,
        val_images=None,
        val_labels=None,
    ):
        if patient_ids is not None and forbidden_patient_ids:
            leaked = set(patient_ids) & set(forbidden_patient_ids)
            if leaked:
                raise ValueError(
                    f"patient-level leakage: {len(leaked)} held-out patient id(s) "
                    f"in training inputs (e.g. {sorted(leaked)[:3]})"
                )
        x = torch.from_numpy(check_image_batch(images))[:, None]
        y = torch.from_numpy(check_labels(labels, x.shape[0])).float()
        torch.manual_seed(self.seed)
        self.net_ = ClassifierNet(tuple(self.channels))
        opt = torch.optim.AdamW(self.net_.parameters(), lr=self.lr, weight_decay=0.0)
        bce = nn.BCEWithLogitsLoss()
        rng = np.random.default_rng(self.seed)
        n = x.shape[0]
        self.history_ = []
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            total, count = 0.0, 0
            for start in range(0, n, self.batch_size):
                idx = torch.from_numpy(perm[start : start + self.batch_size])
                xb = x[idx]
                if self.rotation_augment:
                    xb = random_rotation_batch(xb, rng)
                loss = bce(self.net_(xb), y[idx])
                require_finite({"bce": float(loss.detach())}, f"classifier epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach())
                count += 1
            entry = {"epoch": epoch, "train_loss": total / count}
            if val_images is not None:
                probs = self.malignancy_probability(val_images)
                vy = np.asarray(val_labels, dtype=np.float64)
                p = np.clip(probs, 1e-7, 1 - 1e-7)
                entry["val_loss"] = float(-(vy * np.log(p) + (1 - vy) * np.log(1 - p)).mean())
            self.history_.append(entry)
        self._freeze()
        return self

    def _freeze(self) -> None:
        for p in self.net_.parameters():
            p.requires_grad_(False)
        self.net_.eval()
        self.param_hash_ = self.parameter_hash()

    def parameter_hash(self) -> str:
        blobs = [
            np.ascontiguousarray(v.detach().numpy(), dtype="<f4").tobytes()
            for _, v in sorted(self.net_.state_dict().items())
        ]
        return sha256_bytes(b"".join(blobs))

    def _batched(self, images, fn) -> np.ndarray:
        x = torch.from_numpy(check_image_batch(images))[:, None]
        outs = []
        with torch.no_grad():
            for start in range(0, x.shape[0], 256):
                outs.append(fn(x[start : start + 256]))
        return torch.cat(outs).numpy()

    def malignancy_probability(self, images) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self._batched(images, lambda xb: torch.sigmoid(self.net_(xb)))

    def predict_proba(self, images) -> np.ndarray:
        p = self.malignancy_probability(images)
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, images) -> np.ndarray:
        return (self.malignancy_probability(images) >= 0.5).astype(np.int64)

    def features(self, images) -> np.ndarray:
        """Penultimate pooled features (the shared metric feature space)."""
        check_is_fitted(self, "net_")
        return self._batched(images, self.net_.features)

    def save(self, path, extra_meta: dict | None = None) -> None:
        check_is_fitted(self, "net_")
        meta = {
            "kind": "classifier",
            "params": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in self.get_params().items()},
            "param_hash": self.param_hash_,
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, state_dict_to_arrays(self.net_.state_dict(), "net."), meta)

    @classmethod
    def load(cls, path) -> "MalignancyClassifier":
        arrays, meta = load_checkpoint(path)
        params = dict(meta["params"])
        params["channels"] = tuple(params["channels"])
        model = cls(**params)
        model.net_ = ClassifierNet(tuple(model.channels))
        load_arrays_into(model.net_, arrays, "net.")
        model._freeze()
        if model.param_hash_ != meta["param_hash"]:
            raise ValueError("classifier checkpoint hash mismatch after load")
        model.meta_ = meta
        return model
