"""Linear-beta noise schedule and the forward corruption process."""

from __future__ import annotations

import numpy as np
import torch

T_STEPS_DEFAULT = 1000
BETA_START_DEFAULT = 8.5e-4
BETA_END_DEFAULT = 1.2e-2


class NoiseSchedule:
    """Per-timestep betas, alphas, and cumulative alpha products.

    Timesteps are 1-based: t in [1, t_steps]. ``alpha_bar(0)`` is defined
    as 1 so the final sampler step maps directly to the clean latent.
    """

    def __init__(
        self,
        t_steps: int = T_STEPS_DEFAULT,
        beta_start: float = BETA_START_DEFAULT,
        beta_end: float = BETA_END_DEFAULT,
    ):
        if t_steps < 1:
            raise ValueError("t_steps must be positive")
        if not (0.0 < beta_start < beta_end < 1.0):
            raise ValueError("betas must satisfy 0 < beta_start < beta_end < 1")
        self.t_steps = int(t_steps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self.betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not (1 <= t <= self.t_steps):
            raise ValueError(f"timestep {t} outside [1, {self.t_steps}]")

    def gather_alpha_bar(self, t: torch.Tensor) -> torch.Tensor:
        """alpha_bar for a batch of integer timesteps (0 maps to 1)."""
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
        return table[t.long()]

    def params(self) -> dict:
        return {
            "t_steps": self.t_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def forward_diffuse(
    z: torch.Tensor, t, noise: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * noise.

    ``t`` may be a single int or a per-sample integer tensor.
    """
    if isinstance(t, int):
        sched._check_t(t)
        ab = torch.tensor(sched.alpha_bar(t), dtype=z.dtype)
    else:
        if ((t < 1) | (t > sched.t_steps)).any():
            raise ValueError(f"timesteps outside [1, {sched.t_steps}]")
        ab = sched.gather_alpha_bar(t).to(z.dtype)
        ab = ab.view(-1, *([1] * (z.ndim - 1)))
    return torch.sqrt(ab) * z + torch.sqrt(1.0 - ab) * noise


def ddim_timesteps(t_steps: int, n_steps: int) -> list[int]:
    """Evenly strided descending subset of [1, t_steps] ending at the top.

    For t_steps=1000, n_steps=50 this yields 1000, 980, ..., 20.
    """
    if not (1 <= n_steps <= t_steps):
        raise ValueError(f"n_steps must lie in [1, {t_steps}], got {n_steps}")
    return [(k + 1) * t_steps // n_steps for k in range(n_steps)][::-1]


def ddim_step(
    z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """One deterministic (eta = 0) update; returns (z_{t_prev}, x0 estimate)."""
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    z_prev = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    return z_prev, x0
