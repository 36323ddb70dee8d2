"""Cooperative two-person denoiser and its training / sampling estimator.

Both persons run through one stack: the two latent streams are stacked along
the batch axis as [a; b] and each block's cross-attention reads the partner
half. Weight sharing is therefore structural, and the MoE blocks route and
count the tokens of both persons in one pool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .diffusion import DiffusionConfig, NoiseSchedule, SamplerConfig, cfg_combine, ddim_sample, training_loss
from .moe import MoEBlock, MoEConfig, telemetry_rows
from .numerics import cosine_with_warmup, make_optimizer
from .text import TextEncoder, check_tokens

log = logging.getLogger(__name__)


@dataclass
class DenoiserConfig:
    latent_dim: int = 128
    dim: int = 128
    depth: int = 4
    heads: int = 4
    text_dim: int = 64
    n_experts: int = 8
    alpha: float = 0.5
    routing_scope: str = "batch_level"
    moe: MoEConfig = field(default_factory=MoEConfig)
    max_len: int = 64
    cond_drop: float = 0.1
    # > 0: eps = sqrt(1 - abar_t) z_t + sqrt(abar_t) head, with abar from a cosine schedule of this many steps
    skip_steps: int = 0


class AdaLN(nn.Module):
    """LayerNorm whose shift/scale/gate come from the conditioning vector.

    The modulation is zero-initialised: at init it is a plain LayerNorm and the
    gate is 1.
    """

    def __init__(self, dim: int, cond_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)
        self.modulation = nn.Linear(cond_dim, 3 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        shift, scale, gate = self.modulation(cond).unsqueeze(1).chunk(3, dim=-1)
        return self.norm(x) * (1 + scale) + shift, 1 + gate

    def modulate(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return self.forward(x, cond)[0]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.heads
        q = self.q(x).reshape(b, t, h, d // h).transpose(1, 2)
        k, v = self.kv(context).reshape(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(b, t, d))


def swap_halves(x: torch.Tensor) -> torch.Tensor:
    """[a; b] -> [b; a] along the batch axis."""
    half = x.shape[0] // 2
    return torch.cat([x[half:], x[:half]], dim=0)


class DenoiserBlock(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.dim
        self.norm_self = AdaLN(d, d)
        self.self_attn = Attention(d, config.heads)
        self.norm_cross = AdaLN(d, d)
        self.cross_attn = Attention(d, config.heads)
        self.norm_moe = AdaLN(d, d)
        self.moe = MoEBlock(d, config.text_dim, config.n_experts, config.moe, config.alpha, config.routing_scope)
        self.moe.segments = 2  # one dispatch run per person keeps the swap symmetry exact

    def forward(self, h: torch.Tensor, cond: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        partner = swap_halves(h)
        x, g = self.norm_self(h, cond)
        h = h + g * self.self_attn(x, x)
        x, g = self.norm_cross(h, cond)
        h = h + g * self.cross_attn(x, self.norm_cross.modulate(partner, cond))
        x, g = self.norm_moe(h, cond)
        return h + g * self.moe(x, text)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(torch.get_default_dtype())


class CooperativeDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = c = config or DenoiserConfig()
        self.text_encoder = TextEncoder(c.text_dim)
        self.null_text = nn.Parameter(torch.zeros(c.text_dim))
        self.in_proj = nn.Linear(c.latent_dim, c.dim)
        self.pos_emb = nn.Parameter(torch.randn(c.max_len, c.dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(c.dim, c.dim), nn.SiLU(), nn.Linear(c.dim, c.dim))
        self.text_proj = nn.Linear(c.text_dim, c.dim)
        self.blocks = nn.ModuleList(DenoiserBlock(c) for _ in range(c.depth))
        self.out_norm = AdaLN(c.dim, c.dim)
        self.out_proj = nn.Linear(c.dim, c.latent_dim)
        self.evaluations = 0
        abar = NoiseSchedule(DiffusionConfig(c.skip_steps)).alphas_cumprod if c.skip_steps else torch.ones(0)
        self.register_buffer("skip_abar", abar, persistent=False)

    def moe_blocks(self) -> list[MoEBlock]:
        return [b.moe for b in self.blocks]

    def encode_text(self, batch: list[tuple[int, ...]]) -> torch.Tensor:
        return self.text_encoder([check_tokens(t) for t in batch])

    def null_embedding(self, n: int) -> torch.Tensor:
        return self.null_text.expand(n, -1)

    def forward(self, z_a: torch.Tensor, z_b: torch.Tensor, t, text: torch.Tensor):
        """Noise estimates (eps_a, eps_b) for latents of shape (B, T', latent_dim)."""
        if z_a.shape != z_b.shape:
            raise ValueError(f"latent shapes differ: {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
        b, length, _ = z_a.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        self.evaluations += 1
        cond = F.silu(self.time_mlp(timestep_embedding(t, self.config.dim)) + self.text_proj(text))
        cond2 = torch.cat([cond, cond], dim=0)
        text2 = torch.cat([text, text], dim=0)
        h = self.in_proj(torch.cat([z_a, z_b], dim=0)) + self.pos_emb[:length]
        for block in self.blocks:
            h = block(h, cond2, text2)
        out = self.out_proj(self.out_norm.modulate(h, cond2))
        if self.config.skip_steps:
            # near pure noise the target is almost z_t itself; the head only supplies the signal part
            abar = self.skip_abar[t].to(out.dtype).repeat(2).reshape(-1, 1, 1)
            out = (1 - abar).sqrt() * torch.cat([z_a, z_b], dim=0) + abar.sqrt() * out
        return out[:b], out[b:]

    def update_biases(self):
        return [m.update_bias() for m in self.moe_blocks()]


def smoothed(values: list[float], window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


class InteractionDiffusion(BaseEstimator):
    """Latent diffusion over two-person interactions.

    ``fit`` takes interaction samples and a fitted :class:`~pairmotion.csvae.MotionVAE`
    (kept frozen); ``sample`` generates raw T x J x 12 clips for both persons.
    """

    def __init__(self, vae=None, dim=128, depth=4, heads=4, text_dim=64, n_experts=8, c_exp=1.0, mode="dts",
                 top_k=1, alpha=0.5, routing_scope="batch_level", n_steps=10000, batch_size=16, lr=5e-4,
                 warmup_steps=200, cond_drop=0.1, train_steps=1000, ddim_steps=50, cfg_weight=3.5,
                 telemetry_every=50, clip_denoised=True, noise_skip=True, seed=0):
        self.vae = vae
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.text_dim = text_dim
        self.n_experts = n_experts
        self.c_exp = c_exp
        self.mode = mode
        self.top_k = top_k
        self.alpha = alpha
        self.routing_scope = routing_scope
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.cond_drop = cond_drop
        self.train_steps = train_steps
        self.ddim_steps = ddim_steps
        self.cfg_weight = cfg_weight
        self.telemetry_every = telemetry_every
        self.clip_denoised = clip_denoised
        self.noise_skip = noise_skip
        self.seed = seed

    def _config(self, latent_dim: int) -> DenoiserConfig:
        return DenoiserConfig(latent_dim, self.dim, self.depth, self.heads, self.text_dim, self.n_experts,
                              self.alpha, self.routing_scope, MoEConfig(self.c_exp, self.mode, self.top_k),
                              cond_drop=self.cond_drop, skip_steps=self.train_steps if self.noise_skip else 0)

    def get_config(self, latent_dim: int | None = None) -> dict:
        cfg = self._config(latent_dim or getattr(self, "latent_dim_", 0))
        return asdict(cfg)

    def _latents(self, samples) -> tuple[torch.Tensor, torch.Tensor]:
        a = np.stack([s.motion_a.data for s in samples])
        b = np.stack([s.motion_b.data for s in samples])
        return self.vae.encode_normalized(a), self.vae.encode_normalized(b)

    def fit(self, samples, y=None):
        if self.vae is None:
            raise ValueError("InteractionDiffusion needs a fitted vae")
        check_is_fitted(self.vae, "model_")
        za, zb = self._latents(samples)
        both = torch.cat([za, zb]).reshape(-1, za.shape[-1])
        self.latent_mean_ = both.mean(0)
        self.latent_std_ = both.std(0).clamp_min(1e-3)
        za = (za - self.latent_mean_) / self.latent_std_
        zb = (zb - self.latent_mean_) / self.latent_std_
        tokens = [s.text.tokens for s in samples]
        self.latent_dim_ = za.shape[-1]
        self.x0_bound_ = float(np.quantile(torch.cat([za, zb]).abs().numpy(), 0.999))
        self.latent_len_ = za.shape[1]

        torch.manual_seed(self.seed)
        self.model_ = CooperativeDenoiser(self._config(self.latent_dim_))
        self.schedule_ = NoiseSchedule(DiffusionConfig(self.train_steps))
        rng = np.random.default_rng(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        opt = make_optimizer(self.model_.parameters(), self.lr)
        sched = cosine_with_warmup(opt, self.warmup_steps, self.n_steps)
        self.loss_history_, self.telemetry_ = [], []
        model = self.model_
        model.train()
        n = len(samples)
        def noisy_batch():
            idx = rng.choice(n, size=min(self.batch_size, n), replace=False)
            b = len(idx)
            t = torch.randint(0, self.train_steps, (b,), generator=gen)
            noise_a = torch.randn(za[idx].shape, generator=gen)
            noise_b = torch.randn(zb[idx].shape, generator=gen)
            xa = self.schedule_.q_sample(za[idx], t, noise_a)
            xb = self.schedule_.q_sample(zb[idx], t, noise_b)
            text = model.encode_text([tokens[i] for i in idx])
            drop = torch.rand(b, generator=gen) < self.cond_drop
            text = torch.where(drop[:, None], model.null_embedding(b), text)
            return xa, xb, t, text, noise_a, noise_b

        for step in range(self.n_steps):
            xa, xb, t, text, noise_a, noise_b = noisy_batch()
            ea, eb = model(xa, xb, t, text)
            loss = training_loss([ea, eb], [noise_a, noise_b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            model.update_biases()
            self.loss_history_.append(float(loss.detach()))
            if self.telemetry_every and step % self.telemetry_every == 0:
                self.telemetry_.extend(telemetry_rows(step, model.moe_blocks()))
            if step % 1000 == 0:
                log.info("denoiser step %d loss %.4f", step, float(loss.detach()))
        model.eval()
        return self

    def sample_latents(self, token_lists, seed: int = 0, cfg_weight: float | None = None,
                       ddim_steps: int | None = None, record_selection: bool = False):
        """Normalised-space DDIM samples for both persons, shape (B, T', latent_dim) each."""
        check_is_fitted(self, "model_")
        model = self.model_
        model.eval()
        w = self.cfg_weight if cfg_weight is None else cfg_weight
        clip = getattr(self, "x0_bound_", None) if self.clip_denoised else None
        sampler = SamplerConfig(ddim_steps or self.ddim_steps, w, 0.0, seed, clip)
        b = len(token_lists)
        shape = (b, self.latent_len_, self.latent_dim_)
        self.selection_counts_ = None
        counts = [torch.zeros(2 * b * self.latent_len_) for _ in model.moe_blocks()] if record_selection else None
        with torch.no_grad():
            text = model.encode_text(list(token_lists))
            null = model.null_embedding(b)

            def predict(z, t):
                cond = model(z[0], z[1], t, text)
                if counts is not None:
                    for c, block in zip(counts, model.moe_blocks()):
                        if block.last_decision is not None:
                            c += block.last_decision.experts_per_token().to(c.dtype)
                if w == 1.0:
                    return list(cond)
                uncond = model(z[0], z[1], t, null)
                return [cfg_combine(c_, u_, w) for c_, u_ in zip(cond, uncond)]

            za, zb = ddim_sample(predict, [shape, shape], self.schedule_, sampler)
        if counts is not None:
            self.selection_counts_ = torch.stack(counts).numpy()
        return za, zb

    def decode_latents(self, za: torch.Tensor, zb: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        za = za * self.latent_std_ + self.latent_mean_
        zb = zb * self.latent_std_ + self.latent_mean_
        return self.vae.inverse_transform(za.numpy()), self.vae.inverse_transform(zb.numpy())

    def sample(self, token_lists, seed: int = 0, **kw) -> tuple[np.ndarray, np.ndarray]:
        za, zb = self.sample_latents(token_lists, seed, **kw)
        return self.decode_latents(za, zb)

    def sample_noise_baseline(self, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Decode pure Gaussian latents; the floor any trained sampler should beat."""
        gen = torch.Generator().manual_seed(seed)
        shape = (n, self.latent_len_, self.latent_dim_)
        return self.decode_latents(torch.randn(shape, generator=gen), torch.randn(shape, generator=gen))
