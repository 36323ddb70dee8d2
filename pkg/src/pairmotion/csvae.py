"""Causal-skeletal VAE: graph convolution over joints, causal convolution over time.

Tensors are laid out (batch, time, joints, channels) throughout.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .motion import FEATURE_DIM, POS, VEL, Normalizer
from .numerics import average_pairs, cosine_with_warmup, interpolate_linear, make_optimizer
from .skeleton import SkeletonTopology, toy_skeleton

log = logging.getLogger(__name__)


class SequenceLengthError(ValueError):
    """Sequence length not divisible by the temporal downsampling factor."""


class SkeletalConv(nn.Module):
    """out_j = W1 x_j + mean_{n in N(j)} W x_n; joints with no neighbours get the self term only."""

    def __init__(self, topology: SkeletonTopology, c_in: int, c_out: int):
        super().__init__()
        self.joints = topology.joint_count
        self.self_transform = nn.Linear(c_in, c_out)
        self.neighbor_transform = nn.Linear(c_in, c_out)
        self.register_buffer("neighbor_mean", torch.as_tensor(topology.mean_neighbor_matrix(),
                                                              dtype=torch.get_default_dtype()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != self.joints:
            raise ValueError(f"skeletal_conv: input has {x.shape[-2]} joints, topology has {self.joints}")
        nbr = torch.einsum("jk,...kc->...jc", self.neighbor_mean.to(x.dtype), self.neighbor_transform(x))
        return self.self_transform(x) + nbr


def causal_padding(kernel: int, stride: int = 1, dilation: int = 1) -> int:
    """Frames prepended before a causal convolution; negative means frames cropped."""
    return (kernel - 1) * dilation + (1 - stride)


class CausalConv(nn.Module):
    """Temporal convolution shared across joints, left padded with zeros.

    With the padding from :func:`causal_padding`, a length-T input yields
    T // stride frames, and output frame t sees input frames up to
    stride * t + stride - 1.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, dilation: int = 1):
        super().__init__()
        if min(kernel, stride, dilation) < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")
        self.kernel, self.stride, self.dilation = kernel, stride, dilation
        self.pad = causal_padding(kernel, stride, dilation)
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2  # bare (T, C)
        if squeeze:
            x = x[None, :, None, :]
        b, t, j, c = x.shape
        h = x.permute(0, 2, 3, 1).reshape(b * j, c, t)
        h = F.pad(h, (self.pad, 0)) if self.pad >= 0 else h[..., -self.pad:]
        h = self.conv(h)
        out = h.reshape(b, j, -1, h.shape[-1]).permute(0, 3, 1, 2)
        return out[0, :, 0, :] if squeeze else out


def skeletal_pool(x: torch.Tensor, topology: SkeletonTopology, level: int = 0) -> torch.Tensor:
    m = torch.as_tensor(topology.pool_matrix(level), dtype=x.dtype)
    return torch.einsum("gj,...jc->...gc", m, x)


def skeletal_unpool(x: torch.Tensor, topology: SkeletonTopology, level: int = 0) -> torch.Tensor:
    """Each member joint receives the sum over pooled joints containing it (one, in a partition)."""
    m = torch.as_tensor(topology.unpool_matrix(level), dtype=x.dtype)
    return torch.einsum("jg,...gc->...jc", m, x)


def temporal_pool(x: torch.Tensor, dim: int = -3) -> torch.Tensor:
    return average_pairs(x, dim)


def temporal_unpool(x: torch.Tensor, dim: int = -3) -> torch.Tensor:
    return interpolate_linear(x, dim)


@dataclass
class VaeLossWeights:
    pos: float = 0.5
    vel: float = 0.5
    kl: float = 0.02

    def __post_init__(self):
        if min(self.pos, self.vel, self.kl) < 0:
            raise ValueError("loss weights must be nonnegative")


def kl_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def combine_vae_terms(terms: dict[str, torch.Tensor], weights: VaeLossWeights) -> torch.Tensor:
    return terms["motion"] + weights.pos * terms["pos"] + weights.vel * terms["vel"] + weights.kl * terms["kl"]


def vae_loss(x: torch.Tensor, recon: torch.Tensor, mean: torch.Tensor, logvar: torch.Tensor,
             weights: VaeLossWeights | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    weights = weights or VaeLossWeights()
    if x.shape != recon.shape:
        raise ValueError(f"vae_loss: target {tuple(x.shape)} vs reconstruction {tuple(recon.shape)}")
    terms = {
        "motion": (recon - x).abs().mean(),
        "pos": (recon[..., POS] - x[..., POS]).abs().mean(),
        "vel": (recon[..., VEL] - x[..., VEL]).abs().mean(),
        "kl": kl_standard_normal(mean, logvar),
    }
    total = combine_vae_terms(terms, weights)
    return total, {k: v.item() for k, v in terms.items()}


@dataclass
class VaeConfig:
    channels: int = 32
    latent_dim: int = 32
    levels: int = 2
    skeletal_pool_levels: int = 1
    kernel: int = 3
    feature_dim: int = FEATURE_DIM
    topology: dict = field(default_factory=lambda: toy_skeleton().to_dict())


class _Block(nn.Module):
    """Two skeletal convs then two causal convs (encoder order) or the reverse."""

    def __init__(self, topology: SkeletonTopology, channels: int, kernel: int, reverse: bool = False):
        super().__init__()
        skel = [SkeletalConv(topology, channels, channels) for _ in range(2)]
        temp = [CausalConv(channels, channels, kernel) for _ in range(2)]
        self.layers = nn.ModuleList(temp + skel if reverse else skel + temp)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            h = h + F.silu(layer(h))
        return h


class CausalSkeletalAutoencoder(nn.Module):
    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config = config or VaeConfig()
        base = SkeletonTopology.from_dict(config.topology)
        if config.skeletal_pool_levels > min(config.levels, len(base.pooling_tree)):
            raise ValueError("more skeletal pooling levels than the topology or the VAE provide")
        self.topologies = [base]
        for level in range(config.levels):
            t = self.topologies[-1]
            self.topologies.append(t.pooled(0) if level < config.skeletal_pool_levels else t)
        c = config.channels
        self.enc_in = SkeletalConv(base, config.feature_dim, c)
        # Weights are shared across joints, so joints with identical neighbourhoods in one pooling
        # group (the two legs) would be interchangeable; a learned per-joint code tells them apart.
        self.enc_joint = nn.Parameter(0.1 * torch.randn(base.joint_count, c))
        self.dec_joint = nn.ParameterList(nn.Parameter(0.1 * torch.randn(self.topologies[l].joint_count, c))
                                          for l in range(config.levels))
        self.enc_blocks = nn.ModuleList(_Block(self.topologies[l], c, config.kernel) for l in range(config.levels))
        self.enc_head = nn.Linear(c, 2 * config.latent_dim)
        self.dec_in = nn.Linear(config.latent_dim, c)
        self.dec_blocks = nn.ModuleList(_Block(self.topologies[l], c, config.kernel, reverse=True)
                                        for l in range(config.levels))
        self.dec_out = SkeletalConv(base, c, config.feature_dim)

    @property
    def downsample(self) -> int:
        return 2 ** self.config.levels

    @property
    def latent_joints(self) -> int:
        return self.topologies[-1].joint_count

    @property
    def flat_latent_dim(self) -> int:
        return self.latent_joints * self.config.latent_dim

    def check_length(self, frames: int) -> None:
        if frames % self.downsample:
            raise SequenceLengthError(
                f"sequence length {frames} is not divisible by {self.downsample}; "
                f"pad or crop to a multiple of {self.downsample} frames")

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, J, d) -> mean, logvar of shape (B, T / 2**levels, J', latent_dim)."""
        self.check_length(x.shape[-3])
        h = self.enc_in(x) + self.enc_joint
        for level, block in enumerate(self.enc_blocks):
            h = temporal_pool(block(h))
            if level < self.config.skeletal_pool_levels:
                h = skeletal_pool(h, self.topologies[level])
        mean, logvar = self.enc_head(h).chunk(2, dim=-1)
        return mean, logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.dec_in(z)
        for level in reversed(range(self.config.levels)):
            h = temporal_unpool(h)
            if level < self.config.skeletal_pool_levels:
                h = skeletal_unpool(h, self.topologies[level])
            h = self.dec_blocks[level](h + self.dec_joint[level])
        return self.dec_out(h)

    @staticmethod
    def reparameterize(mean: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None,
                       deterministic: bool = False) -> torch.Tensor:
        if deterministic:
            return mean
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + noise * (0.5 * logvar).exp()

    def flatten_latent(self, z: torch.Tensor) -> torch.Tensor:
        return z.reshape(*z.shape[:-2], z.shape[-2] * z.shape[-1])

    def unflatten_latent(self, z: torch.Tensor) -> torch.Tensor:
        return z.reshape(*z.shape[:-1], self.latent_joints, self.config.latent_dim)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None, deterministic: bool = False):
        mean, logvar = self.encode(x)
        z = self.reparameterize(mean, logvar, generator, deterministic)
        return self.decode(z), mean, logvar


def _as_clips(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected clips shaped (N, T, J, d), got {X.shape}")
    return X


class MotionVAE(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains on raw clips, ``transform`` returns
    flattened posterior means, ``inverse_transform`` decodes back to raw clips."""

    def __init__(self, channels=32, latent_dim=32, levels=2, skeletal_pool_levels=1, kernel=3,
                 topology=None, n_steps=2000, batch_size=32, lr=2e-3, warmup_steps=100,
                 weights=None, seed=0):
        self.channels = channels
        self.latent_dim = latent_dim
        self.levels = levels
        self.skeletal_pool_levels = skeletal_pool_levels
        self.kernel = kernel
        self.topology = topology
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.weights = weights
        self.seed = seed

    def _config(self) -> VaeConfig:
        topo = self.topology or toy_skeleton()
        return VaeConfig(self.channels, self.latent_dim, self.levels, self.skeletal_pool_levels, self.kernel,
                         topology=topo.to_dict())

    def fit(self, X, y=None, normalizer: Normalizer | None = None):
        X = _as_clips(X)
        torch.manual_seed(self.seed)
        self.model_ = CausalSkeletalAutoencoder(self._config())
        self.model_.check_length(X.shape[1])
        self.normalizer_ = normalizer or Normalizer.fit(X)
        data = torch.as_tensor(self.normalizer_.normalize(X))
        weights = self.weights or VaeLossWeights()
        rng = np.random.default_rng(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        opt = make_optimizer(self.model_.parameters(), self.lr)
        sched = cosine_with_warmup(opt, self.warmup_steps, self.n_steps)
        self.loss_history_ = []
        self.model_.train()
        for step in range(self.n_steps):
            idx = rng.choice(len(data), size=min(self.batch_size, len(data)), replace=len(data) < self.batch_size)
            x = data[idx]
            recon, mean, logvar = self.model_(x, generator=gen)
            loss, terms = vae_loss(x, recon, mean, logvar, weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            self.loss_history_.append({"step": step, "loss": loss.item(), **terms})
            if step % 500 == 0:
                log.info("vae step %d loss %.4f", step, loss.item())
        self.model_.eval()
        return self

    def encode_normalized(self, X) -> torch.Tensor:
        check_is_fitted(self, "model_")
        x = torch.as_tensor(self.normalizer_.normalize(_as_clips(X)))
        with torch.no_grad():
            mean, _ = self.model_.encode(x)
        return self.model_.flatten_latent(mean)

    def transform(self, X) -> np.ndarray:
        return self.encode_normalized(X).numpy()

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        z = torch.as_tensor(np.asarray(Z, dtype=np.float32))
        with torch.no_grad():
            x = self.model_.decode(self.model_.unflatten_latent(z))
        return self.normalizer_.denormalize(x.numpy())

    def get_config(self) -> dict:
        return asdict(self._config())
