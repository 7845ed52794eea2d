"""U-shaped latent denoiser with timestep embedding and cross-attention.

The network always sees eight input channels: four for the noisy latent and
four for the baseline latent (zero-filled during unconditional passes). Each
resolution level applies one residual block (with the timestep embedding
added) followed by cross-attention from spatial positions to the rows of the
conditioning sequence.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embeddings for a batch of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.t_proj(self.act(t_emb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Multi-head attention from spatial positions to the context rows."""

    def __init__(self, channels: int, ctx_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(tokens)
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        hd = c // self.n_heads

        def split(z):
            return z.view(b, -1, self.n_heads, hd).transpose(1, 2)

        attn = (split(q) @ split(k).transpose(-2, -1)) / math.sqrt(hd)
        out = (attn.softmax(dim=-1) @ split(v)).transpose(1, 2).reshape(b, -1, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class _Level(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, ctx_dim: int, n_heads: int):
        super().__init__()
        self.res = ResBlock(c_in, c_out, t_dim)
        self.attn = CrossAttention(c_out, ctx_dim, n_heads)

    def forward(self, x, t_emb, ctx):
        return self.attn(self.res(x, t_emb), ctx)


class DenoiserUNet(nn.Module):
    """Noise predictor over 4-channel latents with 4 baseline channels."""

    def __init__(
        self,
        latent_channels: int = 4,
        base_channels: int = 64,
        channel_mults: tuple[int, ...] = (1, 2, 4),
        ctx_dim: int = 128,
        n_heads: int = 4,
    ):
        super().__init__()
        chans = [base_channels * m for m in channel_mults]
        t_dim = base_channels * 4
        self.latent_channels = latent_channels
        self.t_mlp = nn.Sequential(
            nn.Linear(base_channels, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim)
        )
        self.base_channels = base_channels
        self.conv_in = nn.Conv2d(2 * latent_channels, chans[0], 3, padding=1)

        self.down_levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down_levels.append(_Level(prev, ch, t_dim, ctx_dim, n_heads))
            if i < len(chans) - 1:
                self.downs.append(nn.Conv2d(ch, chans[i + 1], 3, stride=2, padding=1))
            prev = chans[i + 1] if i < len(chans) - 1 else ch

        self.mid1 = ResBlock(chans[-1], chans[-1], t_dim)
        self.mid_attn = CrossAttention(chans[-1], ctx_dim, n_heads)
        self.mid2 = ResBlock(chans[-1], chans[-1], t_dim)

        self.up_levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(len(chans))):
            self.up_levels.append(_Level(2 * chans[i], chans[i], t_dim, ctx_dim, n_heads))
            if i > 0:
                self.ups.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(chans[i], chans[i - 1], 3, padding=1),
                    )
                )
        self.out_norm = nn.GroupNorm(8, chans[0])
        self.out_conv = nn.Conv2d(chans[0], latent_channels, 3, padding=1)

    def forward(
        self,
        noisy_latent: torch.Tensor,
        baseline_latent: torch.Tensor | None,
        t: torch.Tensor,
        ctx: torch.Tensor,
    ) -> torch.Tensor:
        """Predict the added noise; ctx is (B, m, ctx_dim)."""
        if baseline_latent is None:
            baseline_latent = torch.zeros_like(noisy_latent)
        if baseline_latent.shape != noisy_latent.shape:
            raise ValueError(
                f"baseline shape {tuple(baseline_latent.shape)} does not match "
                f"noisy latent {tuple(noisy_latent.shape)}"
            )
        x = self.conv_in(torch.cat([noisy_latent, baseline_latent], dim=1))
        t_emb = self.t_mlp(timestep_embedding(t, self.base_channels).to(x.dtype))

        skips = []
        for i, level in enumerate(self.down_levels):
            x = level(x, t_emb, ctx)
            skips.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)

        x = self.mid2(self.mid_attn(self.mid1(x, t_emb), ctx), t_emb)

        for i, level in enumerate(self.up_levels):
            x = level(torch.cat([x, skips.pop()], dim=1), t_emb, ctx)
            if i < len(self.ups):
                x = self.ups[i](x)

        return self.out_conv(torch.nn.functional.silu(self.out_norm(x)))

    def cross_attention_modules(self) -> list[CrossAttention]:
        mods = [lvl.attn for lvl in self.down_levels]
        mods.append(self.mid_attn)
        mods.extend(lvl.attn for lvl in self.up_levels)
        return mods
