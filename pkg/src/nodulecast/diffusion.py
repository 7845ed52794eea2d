"""Two-stage latent diffusion: unconditional pretraining, conditional
fine-tuning on (baseline, follow-up) latent pairs, and deterministic DDIM
sampling.

Latents are standardized by a single global scale factor (the inverse of the
empirical latent standard deviation over the training set) before diffusion
and unscaled before decoding. The unconditional stage sees zero-filled
baseline channels and the learned null context only; the conditional stage
channel-concatenates the baseline latent, attends to the report-derived
context sequence, and randomly drops the context to the null embedding with
probability ``p_drop``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import load_arrays_into, load_checkpoint, save_checkpoint, state_dict_to_arrays
from .conditioning import (
    ContextEmbedding,
    SoftPromptBank,
    TextBackbone,
    Vocabulary,
    embed_context_batch,
    null_context,
)
from .config import CondConfig, DenoiserConfig, UncondConfig
from .ehr import render_report
from .hashing import derive_seed
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, forward_diffuse
from .trainutil import EpochSelector, require_finite, warmup_cosine_lr
from .unet import DenoiserUNet


@dataclass
class DenoiserInput:
    """One denoiser invocation: noisy latent, optional baseline, t, context."""

    noisy_latent: torch.Tensor
    baseline_latent: torch.Tensor | None
    timestep: torch.Tensor
    context: ContextEmbedding | torch.Tensor


def context_tensor(context: ContextEmbedding | torch.Tensor, batch: int) -> torch.Tensor:
    if isinstance(context, ContextEmbedding):
        return context.sequence[None].expand(batch, -1, -1)
    if context.ndim == 2:
        return context[None].expand(batch, -1, -1)
    return context


def denoise(unet: DenoiserUNet, inp: DenoiserInput, sched: NoiseSchedule) -> torch.Tensor:
    """Validated single-call denoiser application."""
    z = inp.noisy_latent
    if z.ndim == 3:
        z = z[None]
    t = inp.timestep
    if isinstance(t, int):
        t = torch.full((z.shape[0],), t, dtype=torch.long)
    if ((t < 1) | (t > sched.t_steps)).any():
        raise ValueError(f"timestep outside [1, {sched.t_steps}]")
    baseline = inp.baseline_latent
    if baseline is not None and baseline.ndim == 3:
        baseline = baseline[None]
    return unet(z, baseline, t, context_tensor(inp.context, z.shape[0]))


def latent_scale_factor(latents: torch.Tensor) -> float:
    """Inverse empirical standard deviation of the training latents."""
    std = float(latents.std())
    if std <= 0:
        raise ValueError("degenerate latent distribution (zero variance)")
    return 1.0 / std


def _epoch_val_loss(unet, sched, latents, baselines, contexts, seed: int) -> float:
    """Deterministic held-out denoising loss (fixed noise and timesteps)."""
    gen = torch.Generator().manual_seed(seed)
    n = latents.shape[0]
    with torch.no_grad():
        t = torch.randint(1, sched.t_steps + 1, (n,), generator=gen)
        noise = torch.randn(latents.shape, generator=gen)
        z_t = forward_diffuse(latents, t, noise, sched)
        total, done = 0.0, 0
        for start in range(0, n, 64):
            sl = slice(start, start + 64)
            base = baselines[sl] if baselines is not None else None
            ctx = contexts[sl] if contexts.ndim == 3 else context_tensor(contexts, z_t[sl].shape[0])
            pred = unet(z_t[sl], base, t[sl], ctx)
            total += float((pred - noise[sl]).square().sum())
            done += noise[sl].numel()
    return total / done


def train_unconditional(
    latents: torch.Tensor,
    val_latents: torch.Tensor,
    bank: SoftPromptBank,
    sched: NoiseSchedule,
    dcfg: DenoiserConfig,
    ucfg: UncondConfig,
    seed: int,
) -> tuple[DenoiserUNet, float, list[dict]]:
    """Stage 1: learn the marginal latent distribution under the null context.

    ``latents`` are unscaled; the returned scale factor standardizes them and
    must be reused by every later stage. Only the denoiser and the null
    embedding train here.
    """
    torch.manual_seed(seed)
    unet = DenoiserUNet(
        latent_channels=latents.shape[1],
        base_channels=dcfg.base_channels,
        channel_mults=tuple(dcfg.channel_mults),
        ctx_dim=dcfg.ctx_dim,
        n_heads=dcfg.n_heads,
    )
    scale = latent_scale_factor(latents)
    x = latents * scale
    xv = val_latents * scale

    params = list(unet.parameters()) + [bank.null]
    opt = torch.optim.AdamW(params, lr=ucfg.start_lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)

    n = x.shape[0]
    steps_per_epoch = max(1, math.ceil(n / ucfg.batch_size))
    total_steps = ucfg.epochs * steps_per_epoch
    selector = EpochSelector()
    history = []
    step = 0
    for epoch in range(ucfg.epochs):
        perm = rng.permutation(n)
        epoch_loss, count = 0.0, 0
        for start in range(0, n, ucfg.batch_size):
            idx = torch.from_numpy(perm[start : start + ucfg.batch_size])
            lr = warmup_cosine_lr(
                step, total_steps, ucfg.warmup_steps, ucfg.start_lr, ucfg.peak_lr, ucfg.floor_lr
            )
            for group in opt.param_groups:
                group["lr"] = lr
            zb = x[idx]
            t = torch.randint(1, sched.t_steps + 1, (zb.shape[0],), generator=gen)
            noise = torch.randn(zb.shape, generator=gen)
            z_t = forward_diffuse(zb, t, noise, sched)
            ctx = context_tensor(null_context(bank), zb.shape[0])
            loss = (unet(z_t, None, t, ctx) - noise).square().mean()
            require_finite({"uncond": float(loss.detach())}, f"unconditional epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, ucfg.grad_clip)
            opt.step()
            epoch_loss += float(loss.detach())
            count += 1
            step += 1
        null_ctx = context_tensor(null_context(bank), 1)[0]
        val_loss = _epoch_val_loss(unet, sched, xv, None, null_ctx, seed + 999)
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / count, "val_loss": val_loss, "lr": lr}
        )
        arrays = state_dict_to_arrays(unet.state_dict(), "unet.")
        arrays.update(state_dict_to_arrays(bank.state_dict(), "bank."))
        selector.offer(epoch, val_loss, arrays)

    best_epoch, best_val, arrays = selector.resolve()
    load_arrays_into(unet, arrays, "unet.")
    load_arrays_into(bank, arrays, "bank.")
    history.append({"best_epoch": best_epoch, "best_val_loss": best_val})
    return unet, scale, history


def train_conditional(
    baseline_latents: torch.Tensor,
    target_latents: torch.Tensor,
    reports: list[str],
    val_baseline: torch.Tensor,
    val_target: torch.Tensor,
    val_reports: list[str],
    unet: DenoiserUNet,
    bank: SoftPromptBank,
    backbone: TextBackbone,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    ccfg: CondConfig,
    latent_scale: float,
    seed: int,
) -> list[dict]:
    """Stage 2: fine-tune on latent pairs with report conditioning.

    Trains the denoiser jointly with the soft prompts and the null embedding
    (the text backbone and the autoencoder stay frozen). Updates ``unet`` and
    ``bank`` in place and returns the training history.
    """
    torch.manual_seed(seed)
    x1 = baseline_latents * latent_scale
    x2 = target_latents * latent_scale
    v1 = val_baseline * latent_scale
    v2 = val_target * latent_scale

    params = list(unet.parameters()) + list(bank.parameters())
    opt = torch.optim.AdamW(params, lr=ccfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 1)

    n = x1.shape[0]
    selector = EpochSelector()
    history = []
    for epoch in range(ccfg.epochs):
        perm = rng.permutation(n)
        epoch_loss, count = 0.0, 0
        for start in range(0, n, ccfg.batch_size):
            idx = perm[start : start + ccfg.batch_size]
            tix = torch.from_numpy(idx)
            ctx = torch.stack(
                [
                    e.sequence
                    for e in embed_context_batch([reports[i] for i in idx], bank, backbone, vocab)
                ]
            )
            if ccfg.p_drop > 0:
                drop = torch.rand(len(idx), generator=gen) < ccfg.p_drop
                null = bank.null[None].expand(len(idx), -1, -1)
                ctx = torch.where(drop[:, None, None], null, ctx)
            t = torch.randint(1, sched.t_steps + 1, (len(idx),), generator=gen)
            noise = torch.randn(x2[tix].shape, generator=gen)
            z_t = forward_diffuse(x2[tix], t, noise, sched)
            loss = (unet(z_t, x1[tix], t, ctx) - noise).square().mean()
            require_finite({"cond": float(loss.detach())}, f"conditional epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, ccfg.grad_clip)
            opt.step()
            epoch_loss += float(loss.detach())
            count += 1
        with torch.no_grad():
            val_ctx = torch.stack(
                [e.sequence for e in embed_context_batch(val_reports, bank, backbone, vocab)]
            )
        val_loss = _epoch_val_loss(unet, sched, v2, v1, val_ctx, seed + 999)
        history.append({"epoch": epoch, "train_loss": epoch_loss / count, "val_loss": val_loss})
        arrays = state_dict_to_arrays(unet.state_dict(), "unet.")
        arrays.update(state_dict_to_arrays(bank.state_dict(), "bank."))
        selector.offer(epoch, val_loss, arrays)

    best_epoch, best_val, arrays = selector.resolve()
    load_arrays_into(unet, arrays, "unet.")
    load_arrays_into(bank, arrays, "bank.")
    history.append({"best_epoch": best_epoch, "best_val_loss": best_val})
    return history


def ddim_sample_from(
    unet: DenoiserUNet,
    sched: NoiseSchedule,
    z_init: torch.Tensor,
    baseline_latent: torch.Tensor | None,
    ctx: torch.Tensor,
    n_steps: int = 50,
) -> torch.Tensor:
    """Deterministic DDIM trajectory from a given terminal latent."""
    ts = ddim_timesteps(sched.t_steps, n_steps)
    z = z_init
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            tb = torch.full((z.shape[0],), t, dtype=torch.long)
            eps = unet(z, baseline_latent, tb, ctx)
            z, _ = ddim_step(z, eps, t, t_prev, sched)
    return z


def ddim_sample(
    unet: DenoiserUNet,
    sched: NoiseSchedule,
    baseline_latent: torch.Tensor | None,
    context: ContextEmbedding | torch.Tensor,
    n_steps: int,
    seed: int,
    latent_shape: tuple[int, ...] | None = None,
) -> torch.Tensor:
    """Sample a follow-up latent starting from seeded Gaussian noise."""
    if baseline_latent is not None and baseline_latent.ndim == 3:
        baseline_latent = baseline_latent[None]
    shape = tuple(baseline_latent.shape) if baseline_latent is not None else latent_shape
    if shape is None:
        raise ValueError("latent_shape is required when baseline_latent is None")
    gen = torch.Generator().manual_seed(seed)
    z_init = torch.randn(shape, generator=gen)
    ctx = context_tensor(context, shape[0])
    return ddim_sample_from(unet, sched, z_init, baseline_latent, ctx, n_steps)


class FollowupGenerator:
    """End-to-end sampler: image + metadata in, predicted follow-up image out."""

    def __init__(self, vae, unet, bank, backbone, vocab, sched, latent_scale, ddim_steps=50):
        self.vae = vae
        self.unet = unet
        self.bank = bank
        self.backbone = backbone
        self.vocab = vocab
        self.sched = sched
        self.latent_scale = float(latent_scale)
        self.ddim_steps = int(ddim_steps)

    def contexts_for(self, ehrs) -> torch.Tensor:
        with torch.no_grad():
            embs = embed_context_batch(
                [render_report(e) for e in ehrs], self.bank, self.backbone, self.vocab
            )
        return torch.stack([e.sequence for e in embs])

    def predict_batch(self, baseline_images, ehrs, sample_ids, run_seed: int) -> np.ndarray:
        """Predict follow-ups for many records under one run seed.

        Each record's terminal noise is seeded from (run_seed, sample_id), so
        results do not depend on batching or ordering.
        """
        z1 = self.vae.encode(baseline_images).mean * self.latent_scale
        ctx = self.contexts_for(ehrs)
        rows = []
        for sid in sample_ids:
            g = torch.Generator().manual_seed(derive_seed(run_seed, str(sid)))
            rows.append(torch.randn(z1.shape[1:], generator=g))
        z_init = torch.stack(rows)
        latent = ddim_sample_from(self.unet, self.sched, z_init, z1, ctx, self.ddim_steps)
        return self.vae.decode(latent / self.latent_scale)

    def predict(self, baseline_image, ehr, seed: int, sample_id: str = "sample") -> np.ndarray:
        return self.predict_batch([baseline_image], [ehr], [sample_id], seed)[0]


def save_diffusion_checkpoint(path, unet, bank, backbone, vocab, sched, dcfg, meta) -> None:
    arrays = state_dict_to_arrays(unet.state_dict(), "unet.")
    arrays.update(state_dict_to_arrays(bank.state_dict(), "bank."))
    arrays.update(state_dict_to_arrays(backbone.state_dict(), "backbone."))
    full_meta = {
        "kind": "diffusion",
        "schedule": sched.params(),
        "denoiser": {
            "base_channels": dcfg.base_channels,
            "channel_mults": list(dcfg.channel_mults),
            "n_heads": dcfg.n_heads,
            "ctx_dim": dcfg.ctx_dim,
        },
        "prompt_sets": int(bank.prompts.shape[0]),
        "prompt_vectors": int(bank.prompts.shape[1]),
        "vocab_tokens": [vocab.token_of[i] for i in range(len(vocab))],
        "latent_channels": int(unet.latent_channels),
    }
    full_meta.update(meta)
    save_checkpoint(path, arrays, full_meta)


def load_diffusion_checkpoint(path):
    """Rebuild (unet, bank, backbone, vocab, sched, meta) from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    sched = NoiseSchedule(**meta["schedule"])
    d = meta["denoiser"]
    unet = DenoiserUNet(
        latent_channels=meta["latent_channels"],
        base_channels=d["base_channels"],
        channel_mults=tuple(d["channel_mults"]),
        ctx_dim=d["ctx_dim"],
        n_heads=d["n_heads"],
    )
    tokens = [t for t in meta["vocab_tokens"] if t != "<eos>"]
    vocab = Vocabulary(tokens)
    bank = SoftPromptBank(meta["prompt_sets"], meta["prompt_vectors"], d["ctx_dim"])
    backbone = TextBackbone(len(vocab), d_model=d["ctx_dim"])
    load_arrays_into(unet, arrays, "unet.")
    load_arrays_into(bank, arrays, "bank.")
    load_arrays_into(backbone, arrays, "backbone.")
    for p in backbone.parameters():
        p.requires_grad_(False)
    return unet, bank, backbone, vocab, sched, meta
