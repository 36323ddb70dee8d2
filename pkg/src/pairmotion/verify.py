"""Property checks shared by the ``verify`` subcommand and the acceptance tests.

Every check returns a :class:`CheckResult`; sizes default to the full
acceptance settings and can be shrunk for a quick run.
"""

from __future__ import annotations

import io
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .csvae import (CausalConv, CausalSkeletalAutoencoder, SkeletalConv, VaeConfig, causal_padding, vae_loss)
from .denoiser import AdaLN, Attention, CooperativeDenoiser, DenoiserConfig
from .metrics import diversity, fid, multimodality, r_precision
from .moe import (ExpertBank, ExpertBiasState, MoEBlock, MoEConfig, RouterConfig, SynergisticRouter,
                  count_and_update_bias, dense_oracle, dynamic_select, expected_count, moe_forward)
from .motion import flatten_joints, unflatten_joints
from .motion_io import decode_motion, encode_motion, read_motion_file, write_motion_file
from .numerics import finite_difference_check, parameter_gradient_check, precision
from .skeleton import chain_skeleton, toy_skeleton


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: value={self.value:.3g} tolerance={self.tolerance:.3g} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_gating_exactness(instances: int = 200, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Sparse dispatch equals the dense sum of gated experts; gate probabilities sum to one."""
    g = torch.Generator().manual_seed(seed)
    worst_out, worst_sum = 0.0, 0.0
    for _ in range(instances):
        n = int(torch.randint(1, 9, (1,), generator=g))
        s = int(torch.randint(1, 65, (1,), generator=g))
        d = int(torch.randint(2, 17, (1,), generator=g))
        with precision("float64"), torch.no_grad():
            torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=g)))
            experts = ExpertBank(n, d, 2 * d)
            pool = torch.randn(s, d, generator=g)
            logits = 2 * torch.randn(n, s, generator=g)
            bias = -torch.rand(n, generator=g, dtype=torch.float64) * 0.98 - 0.01
            decision = dynamic_select(logits, bias)
            sparse = moe_forward(pool, decision, experts)
            dense = dense_oracle(pool, decision.gates, experts)
        worst_out = max(worst_out, float((sparse - dense).abs().max()))
        worst_sum = max(worst_sum, float((decision.probs.sum(0) - 1).abs().max()))
    value = max(worst_out, worst_sum)
    return CheckResult("gating exactness", value <= tol, value, tol,
                       {"max_output_error": worst_out, "max_prob_sum_error": worst_sum, "instances": instances})


@_timed
def check_bias_convergence(n_experts: int = 8, pool: int = 240, c_exp: float = 1.0, steps: int = 20000,
                           window: int = 1000, seed: int = 0, tol: float = 3.0) -> CheckResult:
    """Sign-rule biases bring each expert's mean selection count to K_exp on stationary random logits."""
    if steps > 50000:
        raise ValueError("the convergence budget is at most 50k updates")
    g = torch.Generator().manual_seed(seed)
    offsets = torch.randn(n_experts, 1, generator=g, dtype=torch.float64)
    scales = 0.5 + torch.rand(n_experts, 1, generator=g, dtype=torch.float64)
    state = ExpertBiasState.initial(n_experts)
    cfg = MoEConfig(c_exp=c_exp)
    history = []
    for _ in range(steps):
        logits = offsets + scales * torch.randn(n_experts, pool, generator=g, dtype=torch.float64)
        state = count_and_update_bias(dynamic_select(logits, state), cfg, state)
        history.append(state.last_counts)
    tail = torch.stack(history[-window:]).to(torch.float64).mean(0)
    k_exp = expected_count(c_exp, pool, n_experts)
    dev = float((tail - k_exp).abs().max())
    return CheckResult("bias convergence", dev <= tol, dev, tol,
                       {"k_exp": k_exp, "mean_counts": tail.tolist(), "bias": state.bias.tolist(), "steps": steps})


def _stack_output_times(convs, t_in: int) -> list[int]:
    """Last input frame each output frame of a causal stack can see."""
    last = list(range(t_in))
    for c in convs:
        s = c.stride
        last = [last[s * t + s - 1] for t in range(len(last) // s)]
    return last


@_timed
def check_causality(stacks: int = 100, seed: int = 0) -> CheckResult:
    """Zeroing future frames leaves every output that cannot see them bitwise unchanged."""
    rng = np.random.default_rng(seed)
    violations = 0
    with precision("float64"):
        for i in range(stacks):
            torch.manual_seed(seed * 1000 + i)
            depth = int(rng.integers(1, 4))
            convs, c = [], int(rng.integers(1, 5))
            for _ in range(depth):
                c_out = int(rng.integers(1, 5))
                convs.append(CausalConv(c, c_out, int(rng.integers(1, 6)), int(rng.integers(1, 3)),
                                        int(rng.integers(1, 4))))
                c = c_out
            t_in = int(rng.integers(8, 33))
            x = torch.randn(2, t_in, 3, convs[0].conv.in_channels)
            cut = int(rng.integers(0, t_in))
            y = x.clone()
            y[:, cut + 1:] = 0.0

            def run(z):
                for conv in convs:
                    z = conv(z)
                return z

            with torch.no_grad():
                ox, oy = run(x), run(y)
            seen = _stack_output_times(convs, t_in)
            keep = [t for t, last in enumerate(seen) if last <= cut]
            if keep and not torch.equal(ox[:, keep], oy[:, keep]):
                violations += 1
        torch.manual_seed(seed)
        model = CausalSkeletalAutoencoder(VaeConfig())
        x = torch.randn(2, 32, 9, 12)
        factor = model.downsample
        encoder_bad = 0
        with torch.no_grad():
            mx, lx = model.encode(x)
        for cut in range(32):
            y = x.clone()
            y[:, cut + 1:] = 0.0
            with torch.no_grad():
                my, ly = model.encode(y)
            keep = [t for t in range(mx.shape[1]) if factor * t + factor - 1 <= cut]
            if keep and not (torch.equal(mx[:, keep], my[:, keep]) and torch.equal(lx[:, keep], ly[:, keep])):
                encoder_bad += 1
    total = violations + encoder_bad
    return CheckResult("causality", total == 0, float(total), 0.0,
                       {"stack_violations": violations, "encoder_violations": encoder_bad, "stacks": stacks})


@_timed
def check_padding_formula() -> CheckResult:
    """For k in 1..5, s in 1..3, d in 1..3: padding, output length and receptive-field edge follow the formula."""
    failures = []
    with precision("float64"):
        for k in range(1, 6):
            for s in range(1, 4):
                for d in range(1, 4):
                    torch.manual_seed(100 * k + 10 * s + d)
                    conv = CausalConv(1, 1, k, s, d)
                    t_in = 24
                    pad = causal_padding(k, s, d)
                    ok = conv.pad == (k - 1) * d + (1 - s)
                    x = torch.randn(t_in, 1)
                    with torch.no_grad():
                        out = conv(x)
                    ok &= out.shape[0] == t_in // s == (t_in + pad - (k - 1) * d - 1) // s + 1
                    for cut in range(t_in):
                        y = x.clone()
                        y[cut + 1:] = 0.0
                        with torch.no_grad():
                            oy = conv(y)
                        n_keep = min(out.shape[0], max(0, (cut + 1) // s))
                        ok &= torch.equal(out[:n_keep], oy[:n_keep])
                    # the edge is tight: output t does see frame s*t + s - 1
                    for t in range(out.shape[0]):
                        y = x.clone()
                        y[s * t + s - 1] += 1.0
                        with torch.no_grad():
                            ok &= not torch.equal(conv(y)[t], out[t])
                    if not ok:
                        failures.append((k, s, d))
    return CheckResult("padding formula", not failures, float(len(failures)), 0.0, {"failures": failures})


def _margin_ok(decision, margin: float = 1e-3) -> bool:
    return bool((decision.scores.abs() > margin).all())


@_timed
def check_gradients(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> CheckResult:
    """Central differences against autograd for every differentiable layer, in 64-bit."""
    errors = {}
    with precision("float64"):
        torch.manual_seed(seed)
        topo = toy_skeleton()

        conv = SkeletalConv(topo, 3, 4)
        x = torch.randn(2, 5, 9, 3)
        w = torch.randn(2, 5, 9, 4)
        errors["skeletal_conv.input"] = finite_difference_check(lambda z: (conv(z) * w).sum(), x, eps)
        errors["skeletal_conv.params"] = parameter_gradient_check(conv, lambda: (conv(x) * w).sum(), eps)

        cconv = CausalConv(3, 2, kernel=3, stride=2, dilation=2)
        xc = torch.randn(1, 12, 2, 3)
        wc = torch.randn(1, 6, 2, 2)
        errors["causal_conv.input"] = finite_difference_check(lambda z: (cconv(z) * wc).sum(), xc, eps)
        errors["causal_conv.params"] = parameter_gradient_check(cconv, lambda: (cconv(xc) * wc).sum(), eps)

        router = SynergisticRouter(RouterConfig(4, 0.5, 6, 5))
        pool, text = torch.randn(12, 6), torch.randn(3, 5)
        wr = torch.randn(4, 12)
        errors["router.input"] = finite_difference_check(lambda z: (router(z, text, 4)[2] * wr).sum(), pool, eps)
        errors["router.params"] = parameter_gradient_check(router, lambda: (router(pool, text, 4)[2] * wr).sum(), eps)

        block = MoEBlock(6, 5, 4, MoEConfig())
        for attempt in range(50):
            torch.manual_seed(seed + attempt)
            xm, tm = torch.randn(2, 6, 6), torch.randn(2, 5)
            block.bias.copy_(-0.3 - 0.4 * torch.rand(4, dtype=torch.float64))
            block(xm, tm)
            if _margin_ok(block.last_decision):
                break
        wm = torch.randn(2, 6, 6)
        errors["moe.input"] = finite_difference_check(lambda z: (block(z, tm) * wm).sum(), xm, eps)
        errors["moe.params"] = parameter_gradient_check(block, lambda: (block(xm, tm) * wm).sum(), eps)

        att = Attention(8, 2)
        xa, ca = torch.randn(2, 5, 8), torch.randn(2, 4, 8)
        wa = torch.randn(2, 5, 8)
        errors["attention.input"] = finite_difference_check(lambda z: (att(z, ca) * wa).sum(), xa, eps)
        errors["attention.params"] = parameter_gradient_check(att, lambda: (att(xa, ca) * wa).sum(), eps)

        ada = AdaLN(8, 6)
        torch.nn.init.normal_(ada.modulation.weight, std=0.3)
        cond = torch.randn(2, 6)

        def ada_loss(z, c=cond):
            out, gate = ada(z, c)
            return (out * gate * wa).sum()

        errors["adaln.input"] = finite_difference_check(ada_loss, xa, eps)
        errors["adaln.params"] = parameter_gradient_check(ada, lambda: ada_loss(xa), eps)

        vae = CausalSkeletalAutoencoder(VaeConfig(channels=4, latent_dim=3, topology=topo.to_dict()))
        for attempt in range(50):
            torch.manual_seed(seed + 100 + attempt)
            xv = torch.randn(1, 8, 9, 12)

            def vae_total(z=None):
                gen = torch.Generator().manual_seed(7)
                recon, mean, logvar = vae(xv if z is None else z, generator=gen)
                return vae_loss(xv if z is None else z, recon, mean, logvar)[0]

            with torch.no_grad():
                recon, _, _ = vae(xv, generator=torch.Generator().manual_seed(7))
            if bool(((recon - xv).abs() > 1e-3).all()):
                break
        errors["vae_loss.params"] = parameter_gradient_check(vae, vae_total, eps)
    worst = max(errors.values())
    return CheckResult("gradient suite", worst < tol, worst, tol, errors)


@_timed
def check_swap_symmetry(seed: int = 0, batch: int = 3, length: int = 8) -> CheckResult:
    """Swapping the two persons swaps the two noise estimates, bit for bit."""
    torch.manual_seed(seed)
    model = CooperativeDenoiser(DenoiserConfig(latent_dim=16, dim=32, depth=2, heads=4, n_experts=4))
    model.eval()
    za, zb = torch.randn(batch, length, 16), torch.randn(batch, length, 16)
    text = torch.randn(batch, 64)
    t = torch.randint(0, 1000, (batch,))
    with torch.no_grad():
        u, v = model(za, zb, t, text)
        v2, u2 = model(zb, za, t, text)
    ok = torch.equal(u, u2) and torch.equal(v, v2)
    diff = float(max((u - u2).abs().max(), (v - v2).abs().max()))
    return CheckResult("swap symmetry", ok, diff, 0.0)


@_timed
def check_metric_sanity(seed: int = 0, n_mc: int = 100_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((500, 8))
    fid_self = abs(fid(x, x))
    v = np.array([1.0, -2.0, 0.5, 0.0])
    a = rng.standard_normal((n_mc, 4))
    b = rng.standard_normal((n_mc, 4)) + v
    rel = abs(fid(a, b) - v @ v) / (v @ v)
    m, t = rng.standard_normal((640, 8)), rng.standard_normal((640, 8))
    top = r_precision(m, t, 32, seed)
    sigma = np.sqrt(np.array([1, 2, 3]) / 32 * (1 - np.array([1, 2, 3]) / 32) / 640)
    z = np.abs(top - np.array([1, 2, 3]) / 32) / sigma
    const = np.ones((400, 8))
    div0 = diversity(const, 300, seed)
    mm0 = multimodality(np.ones((4, 120, 8)), 100, seed)
    ok = fid_self < 1e-6 and rel < 0.05 and bool((z < 3).all()) and div0 == 0.0 and mm0 == 0.0
    return CheckResult("metric sanity", ok, float(max(fid_self, rel)), 0.05,
                       {"fid_self": fid_self, "fid_offset_rel_error": rel, "r_precision": top.tolist(),
                        "r_precision_z": z.tolist(), "diversity_const": div0, "multimodality_const": mm0})


@_timed
def check_round_trips(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for j in (3, 9, 22):
        m = rng.standard_normal((5, j, 12)).astype(np.float32)
        bad += not np.array_equal(unflatten_joints(flatten_joints(m), j), m)
        bad += encode_motion(decode_motion(encode_motion(m))) != encode_motion(m)
    topo = chain_skeleton(5)
    with tempfile.TemporaryDirectory() as d:
        m = rng.standard_normal((7, 5, 12)).astype(np.float32)
        write_motion_file(m, Path(d) / "x.mot")
        bad += not np.array_equal(read_motion_file(Path(d) / "x.mot", topo).data, m)
    return CheckResult("round trips", bad == 0, float(bad), 0.0)


def run_all(quick: bool = False) -> list[CheckResult]:
    if quick:
        return [check_gating_exactness(20), check_bias_convergence(steps=8000), check_causality(10),
                check_padding_formula(), check_gradients(), check_swap_symmetry(), check_metric_sanity(n_mc=20000),
                check_round_trips()]
    return [check_gating_exactness(), check_bias_convergence(), check_causality(), check_padding_formula(),
            check_gradients(), check_swap_symmetry(), check_metric_sanity(), check_round_trips()]


def report(results: list[CheckResult], stream: io.TextIOBase | None = None) -> bool:
    for r in results:
        print(r.line(), file=stream)
    return all(r.passed for r in results)
