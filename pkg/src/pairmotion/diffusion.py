"""Cosine-schedule DDPM forward process, deterministic DDIM sampling and CFG."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch


@dataclass
class DiffusionConfig:
    train_steps: int = 1000
    schedule: str = "cosine"
    cosine_offset: float = 0.008
    prediction: str = "eps"


@dataclass
class SamplerConfig:
    ddim_steps: int = 50
    cfg_weight: float = 3.5
    eta: float = 0.0
    seed: int = 0
    clip_x0: float | None = None  # clamp the clean estimate to the data range; None disables


class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar_t for t = 0 .. train_steps - 1."""

    def __init__(self, config: DiffusionConfig | None = None):
        self.config = config = config or DiffusionConfig()
        if config.schedule != "cosine":
            raise ValueError(f"unsupported schedule {config.schedule!r}")
        n, s = config.train_steps, config.cosine_offset

        def f(t):
            return math.cos((t / n + s) / (1 + s) * math.pi / 2) ** 2

        betas = [min(1 - f(t + 1) / f(t), 0.999) for t in range(n)]
        self.betas = torch.tensor(betas, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1 - self.betas, dim=0)

    @property
    def train_steps(self) -> int:
        return self.config.train_steps

    def check_t(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t >= self.train_steps).any():
            raise ValueError(f"timesteps must lie in [0, {self.train_steps}), got {t.tolist()}")
        return t

    def q_sample(self, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) noise, with t broadcast over leading batch."""
        t = self.check_t(t)
        abar = self.alphas_cumprod[t].to(z0.dtype).reshape(-1, *([1] * (z0.dim() - 1)))
        return abar.sqrt() * z0 + (1 - abar).sqrt() * noise

    def ddim_timesteps(self, ddim_steps: int) -> list[int]:
        if not 1 <= ddim_steps <= self.train_steps:
            raise ValueError(f"ddim_steps must be in [1, {self.train_steps}], got {ddim_steps}")
        stride = self.train_steps // ddim_steps
        return list(range(0, stride * ddim_steps, stride))[::-1]


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """eps_uncond + w (eps_cond - eps_uncond); w = 1 returns the conditional prediction itself."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"cfg_combine: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if w == 1.0:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


def training_loss(eps_pred: list[torch.Tensor], eps_true: list[torch.Tensor]) -> torch.Tensor:
    """Mean squared noise error pooled over both persons."""
    se = sum(((p - q) ** 2).sum() for p, q in zip(eps_pred, eps_true))
    count = sum(q.numel() for q in eps_true)
    return se / count


def ddim_sample(predict_eps: Callable[[list[torch.Tensor], int], list[torch.Tensor]], shapes: list[tuple],
                schedule: NoiseSchedule, sampler: SamplerConfig,
                on_step: Callable[[int, int], None] | None = None) -> list[torch.Tensor]:
    """Deterministic (eta = 0) DDIM over ``sampler.ddim_steps`` timesteps.

    ``predict_eps(z_list, t)`` returns the (already guided) noise estimate for
    every stream. The final step lands on the clean estimate.
    """
    if sampler.eta != 0.0:
        raise NotImplementedError("only deterministic DDIM (eta = 0) is supported")
    gen = torch.Generator().manual_seed(sampler.seed)
    dtype = torch.get_default_dtype()
    z = [torch.randn(s, generator=gen, dtype=dtype) for s in shapes]
    steps = schedule.ddim_timesteps(sampler.ddim_steps)
    abar = schedule.alphas_cumprod
    for i, t in enumerate(steps):
        eps = predict_eps(z, t)
        a_t = abar[t].item()
        a_prev = abar[steps[i + 1]].item() if i + 1 < len(steps) else 1.0
        new = []
        for zi, ei in zip(z, eps):
            x0 = (zi - math.sqrt(1 - a_t) * ei) / math.sqrt(a_t)
            if sampler.clip_x0 is not None:
                # a small noise error at low signal levels blows up in x0; keep the step consistent
                x0 = x0.clamp(-sampler.clip_x0, sampler.clip_x0)
                ei = (zi - math.sqrt(a_t) * x0) / math.sqrt(1 - a_t)
            new.append(math.sqrt(a_prev) * x0 + math.sqrt(1 - a_prev) * ei)
        z = new
        if on_step is not None:
            on_step(i, t)
    return z
