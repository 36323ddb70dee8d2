import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from pairmotion.moe import (
    BIAS_EPS, ExpertBank, ExpertBiasState, MoEBlock, MoEConfig, RouterConfig, SynergisticRouter,
    combine_logits, count_and_update_bias, dense_oracle, dynamic_select, expected_count, expert_choice_select,
    moe_forward, telemetry_rows, token_choice_select, update_bias, write_telemetry_csv,
)
from pairmotion.numerics import precision


def _router(n=4, d=6, dt=5, alpha=0.5):
    return SynergisticRouter(RouterConfig(n_experts=n, alpha=alpha, motion_dim=d, text_dim=dt))


class TestRouter:
    def test_zero_weights_zero_logits(self):
        r = _router()
        for p in r.parameters():
            torch.nn.init.zeros_(p)
        _, _, logits = r(torch.randn(12, 6), torch.randn(3, 5), 4)
        assert torch.equal(logits, torch.zeros(4, 12))

    def test_pool_size(self):
        block = MoEBlock(6, 5, 4)
        block(torch.randn(4, 8, 6), torch.randn(4, 5))
        assert block.last_decision.gates.shape == (4, 32)

    def test_motion_logits_match_loop(self):
        torch.manual_seed(0)
        r = _router()
        pool = torch.randn(10, 6)
        got = r.route_motion(pool)
        for s in range(10):
            for e in range(4):
                expected = (r.motion.weight[e] * pool[s]).sum()
                torch.testing.assert_close(got[e, s], expected)

    def test_text_logits_broadcast_per_sample(self):
        torch.manual_seed(0)
        r = _router()
        text = torch.randn(3, 5)
        text[2] = text[0]
        got = r.route_text(text, 4)
        assert got.shape == (4, 12)
        for b in range(3):
            for t in range(4):
                torch.testing.assert_close(got[:, b * 4 + t], r.text(text[b]))
        assert torch.equal(got[:, 0:4], got[:, 8:12])

    def test_zero_embedding_zero_logits(self):
        r = _router()
        assert r.motion.bias is None and r.text.bias is None
        assert torch.equal(r.route_text(torch.zeros(2, 5), 3), torch.zeros(4, 6))

    def test_alpha_endpoints(self):
        a, b = torch.randn(3, 4), torch.randn(3, 4)
        assert torch.equal(combine_logits(a, b, 1.0), a)
        assert torch.equal(combine_logits(a, b, 0.0), b)

    def test_alpha_half(self):
        assert combine_logits(torch.tensor(2.0), torch.tensor(4.0), 0.5).item() == 3.0

    def test_default_alpha(self):
        assert RouterConfig().alpha == 0.5

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ValueError):
            RouterConfig(alpha=alpha)


class TestDynamicSelect:
    def test_both_selected(self):
        d = dynamic_select(torch.zeros(2, 1), torch.tensor([-0.4, -0.4]))
        torch.testing.assert_close(d.scores.flatten(), torch.tensor([0.1, 0.1]))
        torch.testing.assert_close(d.gates.flatten(), torch.tensor([0.5, 0.5]))

    def test_none_selected(self):
        d = dynamic_select(torch.zeros(2, 1), torch.tensor([-0.6, -0.6]))
        assert torch.equal(d.gates, torch.zeros(2, 1))
        assert d.experts_per_token().item() == 0

    def test_matches_scalar_oracle(self):
        torch.manual_seed(3)
        logits = torch.randn(4, 16)
        bias = -torch.rand(4)
        d = dynamic_select(logits, bias)
        for s in range(16):
            col = [math.exp(logits[e, s].item()) for e in range(4)]
            total = sum(col)
            for e in range(4):
                m = 1 / (1 + math.exp(-logits[e, s].item())) + bias[e].item()
                expected = col[e] / total if m > 0 else 0.0
                assert d.gates[e, s].item() == pytest.approx(expected, abs=1e-6)

    def test_mask_is_detached(self):
        logits = torch.randn(3, 5, requires_grad=True)
        d = dynamic_select(logits, torch.full((3,), -0.5))
        d.gates.sum().backward()
        assert logits.grad is not None and not d.mask().requires_grad

    def test_accepts_bias_state(self):
        logits = torch.randn(3, 5)
        a = dynamic_select(logits, ExpertBiasState.initial(3))
        b = dynamic_select(logits, torch.full((3,), -0.5))
        assert torch.equal(a.gates, b.gates)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 24), st.integers(0, 10_000))
    def test_gate_invariants(self, n, s, seed):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(n, s, generator=g, dtype=torch.float64) * 3
        bias = -torch.rand(n, generator=g, dtype=torch.float64)
        d = dynamic_select(logits, bias)
        torch.testing.assert_close(d.probs.sum(0), torch.ones(s, dtype=torch.float64), rtol=0, atol=1e-6)
        assert torch.all(d.gates <= d.probs) and torch.all(d.gates >= 0)
        assert torch.equal(d.gates > 0, d.mask())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 24), st.integers(0, 10_000), st.floats(0.0, 0.5))
    def test_selection_monotone_in_bias(self, n, s, seed, step):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(n, s, generator=g, dtype=torch.float64)
        bias = -torch.rand(n, generator=g, dtype=torch.float64)
        low = dynamic_select(logits, bias).mask()
        high = dynamic_select(logits, bias + step).mask()
        assert torch.all(high | ~low)


class TestBiasUpdate:
    def test_over_capacity_decreases(self):
        new = update_bias(torch.tensor([-0.5], dtype=torch.float64), torch.tensor([10]), 8, 1e-4)
        assert new.item() == pytest.approx(-0.5 - 1e-4, abs=1e-15)

    def test_at_capacity_unchanged(self):
        b = torch.tensor([-0.3], dtype=torch.float64)
        assert torch.equal(update_bias(b, torch.tensor([8]), 8, 1e-4), b)

    def test_expected_count(self):
        assert expected_count(1.0, 240, 8) == 30

    def test_defaults(self):
        state = ExpertBiasState.initial(8)
        assert state.sigma == 1e-4 and torch.all(state.bias == -0.5)
        assert MoEConfig().sigma == 1e-4

    def test_clamped(self):
        b = torch.tensor([-BIAS_EPS, -1 + BIAS_EPS], dtype=torch.float64)
        new = update_bias(b, torch.tensor([0, 100]), 8, 1e-4)
        assert torch.equal(new, b)

    def test_frozen_state(self):
        d = dynamic_select(torch.randn(2, 4), torch.full((2,), -0.5))
        state = ExpertBiasState.initial(2)
        state.frozen = True
        with pytest.raises(RuntimeError):
            count_and_update_bias(d, MoEConfig(), state)

    def test_eval_mode_forbids_update(self):
        block = MoEBlock(6, 5, 4).eval()
        block(torch.randn(2, 3, 6), torch.randn(2, 5))
        with pytest.raises(RuntimeError):
            block.update_bias()

    def test_update_before_forward(self):
        with pytest.raises(RuntimeError):
            MoEBlock(6, 5, 4).update_bias()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_instance_scope_equals_batch_scope_for_one_sample(self, seed):
        g = torch.Generator().manual_seed(seed)
        d = dynamic_select(torch.randn(4, 8, generator=g), -torch.rand(4, generator=g))
        d.tokens_per_sample = 8
        state = ExpertBiasState.initial(4)
        a = count_and_update_bias(d, MoEConfig(), state, "batch_level")
        b = count_and_update_bias(d, MoEConfig(), state, "instance_level")
        assert torch.equal(a.bias, b.bias)

    def test_converges_to_expected_count(self):
        g = torch.Generator().manual_seed(0)
        offsets = torch.randn(4, 1, generator=g)
        state = ExpertBiasState.initial(4, sigma=1e-3)
        counts = []
        for step in range(6000):
            logits = offsets + torch.randn(4, 80, generator=g)
            d = dynamic_select(logits, state)
            state = count_and_update_bias(d, MoEConfig(), state)
            if step >= 5000:
                counts.append(d.selection_counts().double())
        mean = torch.stack(counts).mean(0)
        assert torch.all((mean - 20).abs() <= 2)


class TestDispatch:
    def setup_method(self):
        torch.manual_seed(7)
        self.experts = ExpertBank(4, 6, 12)
        self.pool = torch.randn(16, 6)

    def test_zero_gates(self):
        d = dynamic_select(torch.randn(4, 16), torch.full((4,), -1 + BIAS_EPS))
        d.gates = torch.zeros_like(d.gates)
        assert torch.equal(moe_forward(self.pool, d, self.experts), torch.zeros(16, 6))

    def test_single_expert_full_gate(self):
        experts = ExpertBank(1, 6, 12)
        d = dynamic_select(torch.zeros(1, 16), torch.tensor([-0.1]))
        torch.testing.assert_close(moe_forward(self.pool, d, experts), experts.expert(0, self.pool))
        expected = F.gelu(self.pool @ experts.w1[0] + experts.b1[0]) @ experts.w2[0] + experts.b2[0]
        torch.testing.assert_close(moe_forward(self.pool, d, experts), expected)

    def test_matches_dense_oracle(self):
        with precision("float64"):
            experts = ExpertBank(4, 6, 12)
            pool = torch.randn(16, 6)
            d = dynamic_select(torch.randn(4, 16), -torch.rand(4, dtype=torch.float64))
            assert (moe_forward(pool, d, experts) - dense_oracle(pool, d.gates, experts)).abs().max() < 1e-6

    def test_token_choice_full_is_soft_mixture(self):
        logits = torch.randn(4, 16)
        d = token_choice_select(logits, 4)
        soft = dense_oracle(self.pool, torch.softmax(logits, 0), self.experts)
        torch.testing.assert_close(moe_forward(self.pool, d, self.experts), soft)

    def test_expert_choice_full_capacity(self):
        d = expert_choice_select(torch.randn(4, 16), 16)
        assert torch.all(d.mask())

    def test_token_choice_top1(self):
        logits = torch.randn(4, 16)
        d = token_choice_select(logits, 1)
        assert torch.all(d.experts_per_token() == 1)
        assert torch.equal(d.gates.sum(0), torch.ones(16))
        assert torch.equal(d.gates.argmax(0), logits.argmax(0))

    def test_expert_choice_per_sample(self):
        d = expert_choice_select(torch.randn(4, 16), 2, tokens_per_sample=8)
        assert torch.all(d.mask().reshape(4, 2, 8).sum(-1) == 2)

    @pytest.mark.parametrize("k", [0, 5])
    def test_token_choice_bad_k(self, k):
        with pytest.raises(ValueError):
            token_choice_select(torch.randn(4, 3), k)

    def test_expert_choice_bad_capacity(self):
        with pytest.raises(ValueError):
            expert_choice_select(torch.randn(4, 3), 4)


class TestBlock:
    @pytest.mark.parametrize("mode", ["dts", "token_choice", "expert_choice", "dense"])
    def test_modes_run(self, mode):
        block = MoEBlock(8, 4, 4, MoEConfig(mode=mode))
        out = block(torch.randn(2, 5, 8), torch.randn(2, 4))
        assert out.shape == (2, 5, 8)
        out.sum().backward()

    def test_dense_width(self):
        block = MoEBlock(8, 4, 4, MoEConfig(mode="dense"))
        assert block.ffn[0].out_features == 32

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            MoEConfig(mode="switch")

    def test_expert_choice_capacity_matches_expected_count(self):
        block = MoEBlock(8, 4, 4, MoEConfig(mode="expert_choice", c_exp=1.0))
        block(torch.randn(2, 8, 8), torch.randn(2, 4))
        assert block.last_decision.selection_counts().tolist() == [4] * 4

    def test_update_moves_toward_expected(self):
        torch.manual_seed(0)
        block = MoEBlock(8, 4, 4)
        block(torch.randn(2, 8, 8), torch.randn(2, 4))
        counts = block.last_decision.selection_counts()
        state = block.update_bias()
        expected = -0.5 - 1e-4 * torch.sign(counts.double() - 4)
        torch.testing.assert_close(state.bias, expected)

    def test_telemetry(self, tmp_path):
        block = MoEBlock(8, 4, 4)
        block(torch.randn(2, 8, 8), torch.randn(2, 4))
        rows = telemetry_rows(3, [block])
        assert len(rows) == 4 and rows[0]["k_exp"] == 4
        write_telemetry_csv(tmp_path / "t.csv", rows)
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "step,block,expert,k_select,k_exp,bias" and len(lines) == 5
