"""Mixture-of-experts block with text+motion routing and dynamic temporal selection.

Layout conventions: the token pool is (S, D) with tokens ordered sample-major
(token s belongs to sample s // T); every per-expert quantity is (N, S).

Dynamic temporal selection: each expert e keeps a bias b_e in (-1, 0). A
token s is selected by e when sigmoid(R_es) + b_e > 0; selected tokens are
weighted by the per-token softmax over experts, unselected ones contribute
nothing. After each training step every bias moves by sigma towards the
count that gives K_exp = C_exp * S / N tokens per expert.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

Mode = Literal["dts", "token_choice", "expert_choice", "dense"]
Scope = Literal["batch_level", "instance_level"]
MODES = ("dts", "token_choice", "expert_choice", "dense")
BIAS_EPS = 1e-6


@dataclass
class RouterConfig:
    n_experts: int = 8
    alpha: float = 0.5
    motion_dim: int = 128
    text_dim: int = 64
    routing_scope: Scope = "batch_level"

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.routing_scope not in ("batch_level", "instance_level"):
            raise ValueError(f"unknown routing scope {self.routing_scope!r}")


@dataclass
class MoEConfig:
    c_exp: float = 1.0
    mode: Mode = "dts"
    top_k: int = 1
    sigma: float = 1e-4
    bias_init: float = -0.5
    hidden_mult: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown MoE mode {self.mode!r}; expected one of {MODES}")


def check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def expected_count(c_exp: float, pool_size: int, n_experts: int) -> float:
    """K_exp = C_exp * S / N."""
    return c_exp * pool_size / n_experts


@dataclass
class ExpertBiasState:
    bias: torch.Tensor
    sigma: float = 1e-4
    last_counts: torch.Tensor | None = None
    frozen: bool = False

    @classmethod
    def initial(cls, n_experts: int, value: float = -0.5, sigma: float = 1e-4) -> "ExpertBiasState":
        return cls(torch.full((n_experts,), value, dtype=torch.float64), sigma)


@dataclass
class GatingDecision:
    motion_logits: torch.Tensor | None
    text_logits: torch.Tensor | None
    logits: torch.Tensor
    probs: torch.Tensor
    scores: torch.Tensor | None
    gates: torch.Tensor
    selected: list[torch.Tensor] = field(default_factory=list)
    tokens_per_sample: int | None = None

    def mask(self) -> torch.Tensor:
        m = torch.zeros(self.gates.shape, dtype=torch.bool)
        for e, idx in enumerate(self.selected):
            m[e, idx] = True
        return m

    def selection_counts(self) -> torch.Tensor:
        """K_select per expert."""
        return torch.tensor([len(i) for i in self.selected])

    def experts_per_token(self) -> torch.Tensor:
        return self.mask().sum(0)


class SynergisticRouter(nn.Module):
    """Per-expert linear routers on token features and on the text embedding, blended by alpha.

    The projections carry no offset: the capacity bias b_e is the only per-expert
    shift, so gradient steps cannot move an expert's logits as a whole faster
    than the sign rule can follow.
    """

    def __init__(self, config: RouterConfig):
        super().__init__()
        self.config = config
        self.motion = nn.Linear(config.motion_dim, config.n_experts, bias=False)
        self.text = nn.Linear(config.text_dim, config.n_experts, bias=False)

    def route_motion(self, pool: torch.Tensor) -> torch.Tensor:
        return self.motion(pool).transpose(0, 1)

    def route_text(self, text: torch.Tensor, tokens_per_sample: int) -> torch.Tensor:
        return self.text(text).transpose(0, 1).repeat_interleave(tokens_per_sample, dim=1)

    def forward(self, pool: torch.Tensor, text: torch.Tensor, tokens_per_sample: int):
        r_motion = self.route_motion(pool)
        r_text = self.route_text(text, tokens_per_sample)
        return r_motion, r_text, combine_logits(r_motion, r_text, self.config.alpha)


def combine_logits(r_motion: torch.Tensor, r_text: torch.Tensor, alpha: float) -> torch.Tensor:
    check_alpha(alpha)
    if alpha == 1.0:
        return r_motion
    if alpha == 0.0:
        return r_text
    return alpha * r_motion + (1.0 - alpha) * r_text


def _by_segment(fn, x: torch.Tensor, segments: int) -> torch.Tensor:
    """Apply ``fn`` to each contiguous run of token columns separately.

    Vectorised exp/sigmoid kernels may round a column differently depending on
    where it sits in memory; per-run evaluation makes a token's value depend
    only on its own run.
    """
    if segments == 1:
        return fn(x)
    return torch.cat([fn(c.contiguous()) for c in x.chunk(segments, dim=1)], dim=1)


def _softmax_experts(logits: torch.Tensor, segments: int = 1) -> torch.Tensor:
    return _by_segment(lambda x: torch.softmax(x, dim=0), logits, segments)


def dynamic_select(logits: torch.Tensor, bias: torch.Tensor | ExpertBiasState, segments: int = 1) -> GatingDecision:
    """Threshold selection M = sigmoid(R) + b > 0, gates G = softmax_experts(R) on selected pairs.

    The mask carries no gradient; gradients reach the logits through the softmax.
    """
    b = bias.bias if isinstance(bias, ExpertBiasState) else bias
    probs = _softmax_experts(logits, segments)
    scores = _by_segment(torch.sigmoid, logits, segments) + b.to(logits.dtype)[:, None]
    mask = (scores > 0).detach()
    gates = probs * mask
    selected = [torch.nonzero(mask[e], as_tuple=False).flatten() for e in range(logits.shape[0])]
    return GatingDecision(None, None, logits, probs, scores.detach(), gates, selected)


def update_bias(bias: torch.Tensor, k_select: torch.Tensor, k_exp: float, sigma: float) -> torch.Tensor:
    delta = torch.sign(k_select.to(bias.dtype) - k_exp)
    return (bias - sigma * delta).clamp(-1.0 + BIAS_EPS, -BIAS_EPS)


def count_and_update_bias(decision: GatingDecision, cfg: MoEConfig, state: ExpertBiasState,
                          scope: Scope = "batch_level") -> ExpertBiasState:
    """One sign step of the capacity bias. Instance scope takes a majority vote of per-sample signs."""
    if state.frozen:
        raise RuntimeError("expert biases are frozen (inference mode); no update allowed")
    counts = decision.selection_counts()
    n, s = decision.gates.shape
    if scope == "instance_level" and decision.tokens_per_sample:
        t = decision.tokens_per_sample
        mask = decision.mask().reshape(n, s // t, t)
        per_inst = mask.sum(-1).to(torch.float64)
        votes = torch.sign(per_inst - expected_count(cfg.c_exp, t, n)).sum(1)
        new = (state.bias + state.sigma * -torch.sign(votes)).clamp(-1.0 + BIAS_EPS, -BIAS_EPS)
    else:
        new = update_bias(state.bias, counts, expected_count(cfg.c_exp, s, n), state.sigma)
    return ExpertBiasState(new, state.sigma, counts, state.frozen)


class ExpertBank(nn.Module):
    """N two-layer GELU FFNs of equal width, stored stacked."""

    def __init__(self, n_experts: int, dim: int, hidden: int):
        super().__init__()
        self.n_experts, self.dim, self.hidden = n_experts, dim, hidden
        self.w1 = nn.Parameter(torch.empty(n_experts, dim, hidden))
        self.b1 = nn.Parameter(torch.empty(n_experts, hidden))
        self.w2 = nn.Parameter(torch.empty(n_experts, hidden, dim))
        self.b2 = nn.Parameter(torch.empty(n_experts, dim))
        for w, b, fan_in in ((self.w1, self.b1, dim), (self.w2, self.b2, hidden)):
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(w, -bound, bound)
            nn.init.uniform_(b, -bound, bound)

    def expert(self, e: int, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(x @ self.w1[e] + self.b1[e]) @ self.w2[e] + self.b2[e]

    def split(self) -> list[tuple[torch.Tensor, ...]]:
        """Per-expert weight views. One unbind per tensor keeps the backward to a single stack
        instead of a full-size zero fill for every indexed expert."""
        return list(zip(*(p.unbind(0) for p in (self.w1, self.b1, self.w2, self.b2))))

    def dense(self, x: torch.Tensor) -> torch.Tensor:
        """Every expert on every token: (N, S, D)."""
        h = F.gelu(torch.einsum("sd,edh->esh", x, self.w1) + self.b1[:, None])
        return torch.einsum("esh,ehd->esd", h, self.w2) + self.b2[:, None]


def moe_forward(pool: torch.Tensor, decision: GatingDecision, experts: ExpertBank, segments: int = 1) -> torch.Tensor:
    """Gather each expert's tokens, run it, scatter-add gated outputs in expert order.

    With ``segments`` > 1 the pool is cut into that many equal contiguous runs
    and each expert processes every run in a separate product. A token's result
    then depends only on the tokens of its own run, so permuting whole runs
    permutes the output bitwise.
    """
    s = pool.shape[0]
    if s % segments:
        raise ValueError(f"pool of {s} tokens does not split into {segments} segments")
    size = s // segments
    out = pool.new_zeros(s, experts.dim)
    weights = experts.split()
    for e, idx in enumerate(decision.selected):
        if idx.numel() == 0:
            continue
        w1, b1, w2, b2 = weights[e]
        parts = [idx] if segments == 1 else [idx[(idx >= k * size) & (idx < (k + 1) * size)] for k in range(segments)]
        for part in parts:
            if part.numel():
                y = F.gelu(pool[part] @ w1 + b1) @ w2 + b2
                out = out.index_add(0, part, decision.gates[e, part, None] * y)
    return out


def dense_oracle(pool: torch.Tensor, gates: torch.Tensor, experts: ExpertBank) -> torch.Tensor:
    """sum_e G_es * E_e(x_s) evaluated over every (e, s) pair."""
    return torch.einsum("es,esd->sd", gates, experts.dense(pool))


def _decision_from_mask(logits: torch.Tensor, probs: torch.Tensor, mask: torch.Tensor, gates: torch.Tensor):
    selected = [torch.nonzero(mask[e], as_tuple=False).flatten() for e in range(logits.shape[0])]
    return GatingDecision(None, None, logits, probs, None, gates, selected)


def token_choice_select(logits: torch.Tensor, top_k: int, segments: int = 1) -> GatingDecision:
    n = logits.shape[0]
    if not 1 <= top_k <= n:
        raise ValueError(f"top_k must be in [1, {n}], got {top_k}")
    top_val, top_idx = logits.topk(top_k, dim=0)
    mask = torch.zeros_like(logits, dtype=torch.bool).scatter(0, top_idx, True)
    renorm = _softmax_experts(top_val, segments)
    gates = torch.zeros_like(logits).scatter(0, top_idx, renorm)
    return _decision_from_mask(logits, _softmax_experts(logits, segments), mask, gates)


def expert_choice_select(logits: torch.Tensor, capacity: int, tokens_per_sample: int | None = None,
                         segments: int = 1) -> GatingDecision:
    """Each expert keeps its ``capacity`` highest-logit tokens (per sample when tokens_per_sample is given)."""
    n, s = logits.shape
    probs = _softmax_experts(logits, segments)
    if tokens_per_sample:
        t = tokens_per_sample
        if not 1 <= capacity <= t:
            raise ValueError(f"capacity must be in [1, {t}], got {capacity}")
        local = logits.reshape(n, s // t, t)
        idx = local.topk(capacity, dim=-1).indices
        mask = torch.zeros_like(local, dtype=torch.bool).scatter(-1, idx, True).reshape(n, s)
    else:
        if not 1 <= capacity <= s:
            raise ValueError(f"capacity must be in [1, {s}], got {capacity}")
        idx = logits.topk(capacity, dim=1).indices
        mask = torch.zeros_like(logits, dtype=torch.bool).scatter(1, idx, True)
    return _decision_from_mask(logits, probs, mask, probs * mask)


def token_choice_forward(pool, logits, experts, top_k):
    decision = token_choice_select(logits, top_k)
    return moe_forward(pool, decision, experts), decision


def expert_choice_forward(pool, logits, experts, capacity, tokens_per_sample=None):
    decision = expert_choice_select(logits, capacity, tokens_per_sample)
    return moe_forward(pool, decision, experts), decision


class MoEBlock(nn.Module):
    """Router + experts + capacity biases for one transformer block.

    Takes (B, T, D) token features and a (B, D_t) text embedding; returns the
    MoE output only, the caller adds the residual.
    """

    def __init__(self, dim: int, text_dim: int, n_experts: int = 8, config: MoEConfig | None = None,
                 alpha: float = 0.5, routing_scope: Scope = "batch_level"):
        super().__init__()
        self.config = config = config or MoEConfig()
        self.router_config = RouterConfig(n_experts, alpha, dim, text_dim, routing_scope)
        if config.mode == "dense":
            self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        else:
            self.router = SynergisticRouter(self.router_config)
            self.experts = ExpertBank(n_experts, dim, config.hidden_mult * dim)
        self.register_buffer("bias", torch.full((n_experts,), config.bias_init, dtype=torch.float64))
        self.last_decision: GatingDecision | None = None
        self.segments = 1

    @property
    def n_experts(self) -> int:
        return self.router_config.n_experts

    def bias_state(self) -> ExpertBiasState:
        return ExpertBiasState(self.bias.clone(), self.config.sigma, frozen=not self.training)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        pool = x.reshape(b * t, d)
        mode = self.config.mode
        if mode == "dense":
            self.last_decision = None
            return self.ffn(pool).reshape(b, t, d)
        r_motion, r_text, logits = self.router(pool, text, t)
        instance = self.router_config.routing_scope == "instance_level"
        if mode == "dts":
            decision = dynamic_select(logits, self.bias, self.segments)
        elif mode == "token_choice":
            decision = token_choice_select(logits, self.config.top_k, self.segments)
        else:
            tokens = t if instance else b * t
            capacity = max(1, min(tokens, round(expected_count(self.config.c_exp, tokens, self.n_experts))))
            decision = expert_choice_select(logits, capacity, t if instance else None, self.segments)
        decision.motion_logits, decision.text_logits = r_motion, r_text
        decision.tokens_per_sample = t
        self.last_decision = decision
        return moe_forward(pool, decision, self.experts, self.segments).reshape(b, t, d)

    @torch.no_grad()
    def update_bias(self) -> ExpertBiasState | None:
        """Apply the sign rule using the last forward pass's selections (training only)."""
        if self.config.mode != "dts":
            return None
        if not self.training:
            raise RuntimeError("expert biases are frozen in eval mode")
        if self.last_decision is None:
            raise RuntimeError("update_bias called before any forward pass")
        state = count_and_update_bias(self.last_decision, self.config, self.bias_state(),
                                      self.router_config.routing_scope)
        self.bias.copy_(state.bias)
        return state


TELEMETRY_FIELDS = ("step", "block", "expert", "k_select", "k_exp", "bias")


def telemetry_rows(step: int, blocks: list[MoEBlock]) -> list[dict]:
    rows = []
    for i, block in enumerate(blocks):
        d = block.last_decision
        if d is None:
            continue
        n, s = d.gates.shape
        k_exp = expected_count(block.config.c_exp, s, n)
        for e, k in enumerate(d.selection_counts().tolist()):
            rows.append({"step": step, "block": i, "expert": e, "k_select": k, "k_exp": k_exp,
                         "bias": float(block.bias[e])})
    return rows


def write_telemetry_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS)
        w.writeheader()
        w.writerows(rows)
