"""Command line: exit codes, artifacts, and reproducibility on a tiny configuration."""

import csv
import json
import subprocess
import sys

import pytest

from pairmotion.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from pairmotion.motion_io import read_motion_file

TINY = {
    "corpus": {"n_samples": 8, "n_test": 6, "frames": 16},
    "vae": {"channels": 8, "latent_dim": 4, "n_steps": 3, "batch_size": 4},
    "denoiser": {"dim": 32, "depth": 1, "text_dim": 8, "n_experts": 4, "n_steps": 3, "batch_size": 4,
                 "ddim_steps": 4, "telemetry_every": 1},
    "eval": {"n_repeats": 2, "mm_texts": 2, "mm_generations": 3, "feature_dim": 8, "r_pool": 4},
    "ablation": {"n_steps": 2, "n_repeats": 2},
}


def run(*argv):
    return main([str(a) for a in argv])


def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg, out = tiny_config(root), root / "run"
    for cmd in ("gen-corpus", "train-vae", "train-denoiser"):
        assert run(cmd, "--config", cfg, "--out", out) == EXIT_OK
    return cfg, out


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        assert run("gen-corpus", "--set", "corpus.nope=1", "--out", tmp_path) == EXIT_CONFIG

    def test_malformed_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("[1, 2")
        assert run("gen-corpus", "--config", bad, "--out", tmp_path) == EXIT_CONFIG

    def test_indivisible_frames(self, tmp_path):
        assert run("gen-corpus", "--set", "corpus.frames=30", "--out", tmp_path) == EXIT_CONFIG

    def test_bad_precision(self, tmp_path):
        assert run("gen-corpus", "--set", "precision=\"float16\"", "--out", tmp_path) == EXIT_CONFIG

    def test_missing_corpus(self, tmp_path):
        assert run("train-vae", "--out", tmp_path) == EXIT_MISSING

    def test_missing_checkpoint(self, tmp_path):
        assert run("sample", "--out", tmp_path) == EXIT_MISSING

    def test_unreadable_checkpoint(self, tmp_path):
        (tmp_path / "denoiser.ckpt").write_bytes(b"garbage")
        assert run("sample", "--out", tmp_path) == EXIT_MISSING

    def test_unknown_grid_axis(self, trained):
        cfg, out = trained
        assert run("ablate", "--config", cfg, "--out", out, "--grid", "depth") == EXIT_CONFIG

    def test_test_split_smaller_than_retrieval_pool(self, trained):
        cfg, out = trained
        assert run("eval", "--config", cfg, "--out", out, "--set", "eval.r_pool=32") == EXIT_CONFIG

    def test_unknown_word_in_prompt(self, trained):
        cfg, out = trained
        assert run("sample", "--config", cfg, "--out", out, "--text", "two people zorble") == EXIT_CONFIG


class TestPipeline:
    def test_training_artifacts(self, trained):
        _, out = trained
        for name in ("vae.ckpt", "vae_loss.csv", "denoiser.ckpt", "denoiser_loss.csv", "routing_telemetry.csv",
                     "training_curves.json", "corpus/train/manifest.json", "corpus/test/manifest.json"):
            assert (out / name).exists(), name
        assert len(read_rows(out / "denoiser_loss.csv")) == 3
        assert list(read_rows(out / "routing_telemetry.csv")[0]) == ["step", "block", "expert", "k_select",
                                                                     "k_exp", "bias"]

    def test_sample_writes_pairs_and_record(self, trained):
        cfg, out = trained
        assert run("sample", "--config", cfg, "--out", out, "--seed", 3, "--count", 2) == EXIT_OK
        d = out / "samples" / "seed3"
        record = json.loads((d / "run_record.json").read_text())
        assert record["seed"] == 3 and len(record["samples"]) == 2
        motion = read_motion_file(d / record["samples"][0]["motion_a"])
        assert motion.data.shape == (16, 9, 12)
        assert (d / record["routing_telemetry"]).exists()

    def test_sample_is_byte_identical(self, trained, tmp_path):
        cfg, out = trained
        dirs = []
        for name in ("one", "two"):
            assert run("sample", "--config", cfg, "--out", out, "--seed", 7, "--count", 2) == EXIT_OK
            copy = tmp_path / name
            (out / "samples" / "seed7").rename(copy)
            dirs.append(copy)
        files = sorted(p.name for p in dirs[0].glob("*.mot"))
        assert len(files) == 4
        for name in files:
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_eval_metrics_csv(self, trained):
        cfg, out = trained
        assert run("eval", "--config", cfg, "--out", out) == EXIT_OK
        rows = read_rows(out / "metrics.csv")
        modes = {r["mode"] for r in rows}
        assert modes == {"dts", "real", "noise_baseline"}
        assert [r["metric"] for r in rows if r["mode"] == "noise_baseline"] == ["fid"]
        assert {"run_id", "mode", "metric", "mean", "ci95_low", "ci95_high"} <= set(rows[0])

    def test_ablate_experts_grid(self, trained):
        cfg, out = trained
        assert run("ablate", "--config", cfg, "--out", out, "--grid", "experts=4,8,16") == EXIT_OK
        rows = read_rows(out / "ablation_experts.csv")
        assert len({r["run_id"] for r in rows}) == 3
        summary = json.loads((out / "ablation_experts.json").read_text())
        assert len(summary["fid_ordering"]) == 3

    def test_verify_quick(self, tmp_path):
        assert run("verify", "--quick", "--out", tmp_path) == EXIT_OK
        results = json.loads((tmp_path / "verify.json").read_text())
        assert all(r["passed"] for r in results)


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pairmotion.cli", "sample", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_MISSING
    assert "missing artifact" in proc.stderr
