import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pairmotion.config import EvalSection
from pairmotion.corpus import generate_synthetic_corpus, stack_corpus
from pairmotion.csvae import MotionVAE
from pairmotion.evaluation import (
    GRIDS, METRICS, dts_vs_expert_choice, effective_sizes, evaluate_real, fit_extractor, grid_points, metric_rows,
    mm_prompts, mode_ordering, read_metrics_csv, run_ablation, write_metrics_csv,
)
from pairmotion.features import FeatureExtractor, pair_array
from pairmotion.metrics import (
    InsufficientSamplesError, diversity, effective_size, fid, mean_ci95, mm_dist, multimodality,
    paired_mean_distance, r_precision,
)


def _canonical(f):
    return f[np.lexsort(f.T[::-1])]


class TestFid:
    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(500, 8))
        assert abs(fid(x, x)) < 1e-6

    def test_offset_gaussians(self):
        rng = np.random.default_rng(1)
        v = np.array([1.0, -2.0, 0.5, 0.0])
        a = rng.normal(size=(100_000, 4))
        b = rng.normal(size=(100_000, 4)) + v
        assert fid(a, b) == pytest.approx(v @ v, rel=0.05)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(300, 6)), rng.normal(size=(200, 6)) * 2 + 1
        assert abs(fid(a, b) - fid(b, a)) < 1e-6

    def test_non_finite(self):
        x = np.zeros((5, 2))
        x[0, 0] = np.nan
        with pytest.raises(ValueError):
            fid(x, np.zeros((5, 2)))

    def test_too_few(self):
        with pytest.raises(InsufficientSamplesError):
            fid(np.zeros((1, 2)), np.zeros((5, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_nonnegative(self, seed, d):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(d + 3, d)) @ rng.normal(size=(d, d))
        b = rng.normal(size=(d + 1, d))
        assert fid(a, b) >= -1e-6


class TestRPrecision:
    def test_perfect_alignment(self):
        t = np.random.default_rng(0).normal(size=(64, 8))
        assert r_precision(t, t, seed=0)[0] == 1.0

    def test_chance_level(self):
        rng = np.random.default_rng(3)
        n = 4000
        top = r_precision(rng.normal(size=(n, 8)), rng.normal(size=(n, 8)), 32, seed=5)
        for k in range(3):
            p = (k + 1) / 32
            assert abs(top[k] - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_reproducible(self):
        rng = np.random.default_rng(4)
        m, t = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
        assert np.array_equal(r_precision(m, t, seed=9), r_precision(m, t, seed=9))

    def test_pool_too_large(self):
        with pytest.raises(InsufficientSamplesError):
            r_precision(np.zeros((20, 2)), np.zeros((20, 2)), 32)

    def test_duplicate_texts_never_distract(self):
        t = np.repeat(np.random.default_rng(0).normal(size=(40, 3)), 2, axis=0)
        keys = np.repeat(np.arange(40), 2)
        assert r_precision(t, t, 32, seed=0, text_keys=keys)[0] == 1.0

    def test_ties_do_not_outrank(self):
        m = np.zeros((32, 2))
        assert r_precision(m, m, 32)[0] == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(6)
        top = r_precision(rng.normal(size=(100, 4)), rng.normal(size=(100, 4)), seed=1)
        assert top[0] <= top[1] <= top[2]


class TestDistances:
    def test_constant_features(self):
        f = np.ones((20, 4))
        assert diversity(f, 10) == 0.0
        assert multimodality(np.ones((3, 10, 4)), 5) == 0.0

    def test_mm_dist_aligned(self):
        x = np.random.default_rng(0).normal(size=(10, 3))
        assert mm_dist(x, x) == 0.0

    def test_unit_distance_pairs(self):
        a = np.random.default_rng(0).normal(size=(7, 2))
        assert paired_mean_distance(a, a + np.array([1.0, 0.0])) == pytest.approx(1.0)

    def test_diversity_brute_force(self):
        f = np.random.default_rng(0).normal(size=(30, 5))
        rng = np.random.default_rng(11)
        first = rng.choice(30, 12, replace=False)
        second = rng.choice(30, 12, replace=False)
        expected = sum(np.sqrt(((f[i] - f[j]) ** 2).sum()) for i, j in zip(first, second)) / 12
        assert diversity(f, 12, seed=11) == pytest.approx(expected, rel=1e-12)

    def test_multimodality_brute_force(self):
        f = np.random.default_rng(1).normal(size=(3, 8, 4))
        rng = np.random.default_rng(2)
        total = 0.0
        for c in range(3):
            first = rng.choice(8, 5, replace=False)
            second = rng.choice(8, 5, replace=False)
            total += sum(np.sqrt(((f[c, i] - f[c, j]) ** 2).sum()) for i, j in zip(first, second))
        assert multimodality(f, 5, seed=2) == pytest.approx(total / 15, rel=1e-12)

    def test_insufficient(self):
        with pytest.raises(InsufficientSamplesError):
            diversity(np.zeros((5, 2)), 6)
        with pytest.raises(InsufficientSamplesError):
            multimodality(np.zeros((2, 3, 2)), 4)

    @settings(max_examples=40, deadline=None)
    @given(arrays("float64", st.tuples(st.integers(4, 20), st.integers(1, 4)), elements=st.floats(-10, 10)),
           st.integers(0, 1000), st.randoms(use_true_random=False))
    def test_diversity_permutation_invariant(self, f, seed, rnd):
        perm = list(range(len(f)))
        rnd.shuffle(perm)
        size = len(f) // 2
        assert diversity(_canonical(f[perm]), size, seed) == diversity(_canonical(f), size, seed)

    @settings(max_examples=40, deadline=None)
    @given(arrays("float64", st.tuples(st.integers(1, 4), st.integers(3, 8), st.integers(1, 3)),
                  elements=st.floats(-10, 10)), st.integers(0, 1000), st.randoms(use_true_random=False))
    def test_multimodality_permutation_invariant(self, f, seed, rnd):
        canon = np.stack([_canonical(g) for g in f])
        perm = list(range(f.shape[1]))
        rnd.shuffle(perm)
        shuffled = np.stack([_canonical(g[perm]) for g in f])
        assert multimodality(shuffled, 2, seed) == multimodality(canon, 2, seed)

    def test_ci95(self):
        mean, lo, hi = mean_ci95([1.0, 2.0, 3.0, 4.0])
        half = 1.96 * np.std([1, 2, 3, 4], ddof=1) / 2
        assert mean == 2.5 and lo == pytest.approx(2.5 - half) and hi == pytest.approx(2.5 + half)

    def test_effective_size(self):
        assert effective_size(300, 128) == 128 and effective_size(100, 500) == 100


def test_paper_subset_sizes():
    cfg = EvalSection()
    assert (cfg.diversity_size, cfg.mm_size, cfg.r_pool, cfg.n_repeats) == (300, 100, 32, 20)
    assert effective_sizes(cfg, 128) == {"diversity_size": 128, "mm_size": 10, "r_pool": 32}


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic_corpus(2, 48)


class TestFeatureExtractor:
    def test_deterministic(self, samples):
        x = pair_array(samples)
        a = FeatureExtractor().fit(x).transform(x)
        b = FeatureExtractor().fit(x).transform(x)
        assert a.shape == (48, 32) and np.array_equal(a, b)

    def test_text_features_near_paired_motion(self, samples):
        ext = fit_extractor(samples)
        m = ext.transform(pair_array(samples))
        t = ext.transform_text([s.text.tokens for s in samples])
        assert mm_dist(m, t) < np.linalg.norm(m - m.mean(0), axis=1).mean()

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            FeatureExtractor().fit(np.zeros((3, 3, 4, 9, 12)))

    def test_text_count_mismatch(self, samples):
        with pytest.raises(ValueError):
            FeatureExtractor().fit(pair_array(samples), [()])

    def test_real_metrics(self, samples):
        ext = fit_extractor(samples)
        cfg = EvalSection(n_repeats=2, diversity_size=20)
        out = evaluate_real(samples, ext, cfg)
        assert set(out) == set(METRICS) - {"multimodality"}
        assert all(len(v) == 2 for v in out.values())
        assert max(abs(v) for v in out["fid"]) < 1e-6


class TestHarness:
    def test_grid_shapes(self):
        assert GRIDS["mode"] == ("dense", "token_choice", "expert_choice", "dts")
        assert GRIDS["experts"] == (4, 8, 16)
        assert GRIDS["c_exp"] == (0.8, 1.0, 2.0)
        assert grid_points("experts") == [{"n_experts": 4}, {"n_experts": 8}, {"n_experts": 16}]
        with pytest.raises(ValueError):
            grid_points("depth")

    def test_metric_csv_round_trip(self, tmp_path):
        rows = metric_rows("r1", "dts", {"fid": [1.0, 2.0, 3.0], "diversity": [0.5, 0.5, 0.5]})
        write_metrics_csv(tmp_path / "m.csv", rows)
        text = (tmp_path / "m.csv").read_text().splitlines()
        assert text[0] == "run_id,mode,metric,mean,ci95_low,ci95_high"
        back = read_metrics_csv(tmp_path / "m.csv")
        assert back[0]["mean"] == 2.0 and back[1]["ci95_low"] == back[1]["ci95_high"] == 0.5

    def test_dts_check(self):
        def rows(dts_mean, width):
            return [{"run_id": "a", "mode": "dts", "metric": "fid", "mean": dts_mean,
                     "ci95_low": dts_mean - width / 2, "ci95_high": dts_mean + width / 2},
                    {"run_id": "b", "mode": "expert_choice", "metric": "fid", "mean": 1.0,
                     "ci95_low": 0.9, "ci95_high": 1.1}]
        assert dts_vs_expert_choice(rows(1.1, 0.2))["passed"]
        assert not dts_vs_expert_choice(rows(1.3, 0.2))["passed"]
        assert mode_ordering(rows(0.5, 0.1)) == [("a", 0.5), ("b", 1.0)]

    def test_mm_prompts_distinct(self):
        samples = generate_synthetic_corpus(0, 32)
        prompts = mm_prompts(samples, 4)
        assert len(prompts) == len(set(prompts)) == 4

    def test_tiny_ablation(self):
        train = generate_synthetic_corpus(0, 16, frames=16)
        test = generate_synthetic_corpus(99, 40, frames=16)
        a, b = stack_corpus(train)
        vae = MotionVAE(channels=8, latent_dim=4, n_steps=2).fit(np.concatenate([a, b]))
        base = dict(dim=32, depth=1, text_dim=8, n_experts=4, c_exp=1.0, mode="dts", n_steps=2, batch_size=4,
                    ddim_steps=3)
        cfg = EvalSection(n_repeats=2, diversity_size=10, mm_size=3, mm_texts=2, mm_generations=3)
        ext = fit_extractor(test, cfg)
        points = [{"mode": "dense"}, {"mode": "dts"}, {"mode": "dts"}]
        rows, models = run_ablation(points, train, test, vae, base, ext, cfg, "t")
        assert len(rows) == 3 * len(METRICS)
        assert set(models) == {"t-dense-n4-c1", "t-dts-n4-c1"}
        by_run = {}
        for r in rows:
            by_run.setdefault(r["run_id"], []).append(r)
        assert {r["metric"] for r in by_run["t-dense-n4-c1"]} == set(METRICS)
        again, _ = run_ablation([{"mode": "dts"}], train, test, vae, base, ext, cfg, "t")
        assert [r["mean"] for r in again] == [r["mean"] for r in by_run["t-dts-n4-c1"][:len(METRICS)]]
