import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pairmotion.corpus import generate_synthetic_corpus, stack_corpus
from pairmotion.csvae import (
    CausalConv, CausalSkeletalAutoencoder, MotionVAE, SequenceLengthError, SkeletalConv, VaeConfig,
    VaeLossWeights, causal_padding, combine_vae_terms, kl_standard_normal, skeletal_pool, skeletal_unpool,
    temporal_pool, temporal_unpool, vae_loss,
)
from pairmotion.numerics import precision
from pairmotion.skeleton import SkeletonTopology, chain_skeleton, toy_skeleton


def _set_linear(lin, weight):
    with torch.no_grad():
        lin.weight.copy_(weight)
        lin.bias.zero_()


class TestSkeletalConv:
    def test_isolated_joint_gets_self_term_only(self):
        topo = SkeletonTopology(1, ())
        conv = SkeletalConv(topo, 2, 2)
        x = torch.randn(3, 1, 2)
        torch.testing.assert_close(conv(x), conv.self_transform(x))

    def test_identity_self_zero_neighbor(self):
        conv = SkeletalConv(toy_skeleton(), 4, 4)
        _set_linear(conv.self_transform, torch.eye(4))
        _set_linear(conv.neighbor_transform, torch.zeros(4, 4))
        x = torch.randn(5, 9, 4)
        torch.testing.assert_close(conv(x), x)

    def test_path_graph_hand_evaluated(self):
        conv = SkeletalConv(chain_skeleton(3), 1, 1)
        _set_linear(conv.self_transform, torch.zeros(1, 1))
        _set_linear(conv.neighbor_transform, torch.eye(1))
        out = conv(torch.tensor([[1.0], [2.0], [3.0]]))
        assert out.flatten().tolist() == [2.0, 2.0, 2.0]

    def test_matches_loop_oracle(self):
        torch.manual_seed(0)
        topo = toy_skeleton()
        conv = SkeletalConv(topo, 3, 5)
        x = torch.randn(4, 9, 3)
        expected = torch.stack([
            conv.self_transform(x[:, j])
            + torch.stack([conv.neighbor_transform(x[:, n]) for n in topo.neighbors(j)]).mean(0)
            for j in range(9)
        ], dim=1)
        torch.testing.assert_close(conv(x), expected)

    def test_joint_mismatch(self):
        with pytest.raises(ValueError):
            SkeletalConv(toy_skeleton(), 2, 2)(torch.zeros(1, 8, 2))


class TestCausalConv:
    @pytest.mark.parametrize("k,s,d,pad", [(3, 1, 1, 2), (4, 2, 1, 2), (1, 2, 1, -1), (3, 1, 2, 4)])
    def test_padding(self, k, s, d, pad):
        assert causal_padding(k, s, d) == pad

    @pytest.mark.parametrize("k,s,d", [(k, s, d) for k in (1, 3, 5) for s in (1, 2, 3) for d in (1, 2)])
    def test_output_length(self, k, s, d):
        conv = CausalConv(2, 2, k, s, d)
        assert conv(torch.randn(1, 12, 1, 2)).shape[1] == 12 // s

    def test_perturbation_leaves_past_unchanged(self):
        torch.manual_seed(1)
        with precision("float64"):
            for k, s, d in [(3, 1, 1), (4, 2, 1), (3, 2, 2), (5, 3, 1)]:
                conv = CausalConv(3, 3, k, s, d)
                x = torch.randn(2, 18, 4, 3)
                base = conv(x)
                for t0 in range(18):
                    y = x.clone()
                    y[:, t0] += 1.0
                    out = conv(y)
                    safe = [t for t in range(base.shape[1]) if s * t + s - 1 < t0]
                    assert torch.equal(out[:, safe], base[:, safe])

    def test_bare_sequence(self):
        conv = CausalConv(2, 3, 3)
        assert conv(torch.randn(7, 2)).shape == (7, 3)

    def test_invalid_kernel(self):
        with pytest.raises(ValueError):
            CausalConv(1, 1, kernel=0)


class TestPooling:
    def test_temporal_pool_pairs(self):
        a, b = torch.randn(2, 3)
        x = torch.stack([a, a, b, b])[:, None]
        torch.testing.assert_close(temporal_pool(x), torch.stack([a, b])[:, None])

    def test_skeletal_pool_group_means(self):
        topo = SkeletonTopology(3, ((0, 1), (1, 2)), (((0, (0, 1)), (1, (2,))),))
        out = skeletal_pool(torch.tensor([[2.0], [4.0], [6.0]]), topo)
        assert out.flatten().tolist() == [3.0, 6.0]

    def test_unpool_copies_group_value(self):
        topo = toy_skeleton()
        pooled = torch.randn(5, 4, 2)
        out = skeletal_unpool(pooled, topo)
        for g, members in enumerate(topo.groups(0)):
            for j in members:
                torch.testing.assert_close(out[:, j], pooled[:, g])

    def test_unpool_of_pooled_constant(self):
        x = torch.full((8, 9, 3), 1.5)
        torch.testing.assert_close(temporal_unpool(temporal_pool(x)), x)


class TestAutoencoder:
    def test_latent_shape(self):
        model = CausalSkeletalAutoencoder(VaeConfig())
        mean, logvar = model.encode(torch.randn(2, 32, 9, 12))
        assert mean.shape == logvar.shape == (2, 8, 4, 32)
        assert model.flatten_latent(mean).shape == (2, 8, 128)
        assert model.decode(mean).shape == (2, 32, 9, 12)

    def test_indivisible_length(self):
        with pytest.raises(SequenceLengthError):
            CausalSkeletalAutoencoder(VaeConfig()).encode(torch.randn(1, 30, 9, 12))

    def test_deterministic_mode(self):
        model = CausalSkeletalAutoencoder(VaeConfig())
        x = torch.randn(1, 16, 9, 12)
        _, m1, lv1 = model(x, deterministic=True)
        z1 = model.reparameterize(m1, lv1, deterministic=True)
        z2 = model.reparameterize(*model.encode(x), deterministic=True)
        assert torch.equal(z1, z2)

    def test_encoder_is_causal(self):
        torch.manual_seed(2)
        with precision("float64"):
            model = CausalSkeletalAutoencoder(VaeConfig(channels=8, latent_dim=4))
            x = torch.randn(1, 16, 9, 12)
            base = model.encode(x)[0]
            for t in range(16):
                y = x.clone()
                y[:, t + 1:] = 0
                out = model.encode(y)[0]
                visible = (t + 1) // 4
                assert torch.equal(out[:, :visible], base[:, :visible])


class TestLoss:
    def test_perfect_reconstruction_unit_posterior(self):
        x = torch.randn(2, 8, 9, 12)
        z = torch.zeros(2, 2, 4, 32)
        loss, terms = vae_loss(x, x.clone(), z, z)
        assert loss.item() == 0.0 and all(v == 0.0 for v in terms.values())

    def test_kl_zero_at_standard_normal(self):
        assert kl_standard_normal(torch.zeros(5), torch.zeros(5)).item() == 0.0

    def test_weighted_total(self):
        terms = {"motion": torch.tensor(1.0), "pos": torch.tensor(2.0), "vel": torch.tensor(4.0),
                 "kl": torch.tensor(10.0)}
        assert combine_vae_terms(terms, VaeLossWeights(0.5, 0.5, 0.02)).item() == pytest.approx(4.2)

    def test_default_weights(self):
        w = VaeLossWeights()
        assert (w.pos, w.vel, w.kl) == (0.5, 0.5, 0.02)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            VaeLossWeights(kl=-1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            vae_loss(torch.zeros(1, 4, 9, 12), torch.zeros(1, 4, 9, 11), torch.zeros(1), torch.zeros(1))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8))
    def test_kl_nonnegative(self, pairs):
        mean, logvar = torch.tensor(pairs, dtype=torch.float64).T
        assert kl_standard_normal(mean, logvar).item() >= -1e-12


class TestEstimator:
    def test_params_round_trip(self):
        vae = MotionVAE(channels=16, n_steps=5)
        assert vae.get_params()["channels"] == 16
        assert MotionVAE(**vae.get_params()).get_params() == vae.get_params()

    def test_transform_before_fit(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            MotionVAE().transform(np.zeros((1, 32, 9, 12)))

    def test_transform_deterministic_and_shaped(self):
        a, b = stack_corpus(generate_synthetic_corpus(0, 4))
        vae = MotionVAE(channels=8, n_steps=3).fit(np.concatenate([a, b]))
        z1, z2 = vae.transform(a), vae.transform(a)
        assert z1.shape == (4, 8, 128) and np.array_equal(z1, z2)
        assert vae.inverse_transform(z1).shape == a.shape

    def test_overfit_single_clip(self):
        clip = stack_corpus(generate_synthetic_corpus(5, 1))[0]
        vae = MotionVAE(n_steps=2000, batch_size=1, lr=5e-3).fit(clip)
        recon = vae.inverse_transform(vae.transform(clip))
        err = vae.normalizer_.normalize(recon) - vae.normalizer_.normalize(clip)
        per_channel = (err ** 2).reshape(-1, 108).mean(0)
        assert per_channel.max() < 1e-3
