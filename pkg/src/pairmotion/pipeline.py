"""Stage functions shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import contextlib
import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .corpus import fit_normalizer, generate_synthetic_corpus, stack_corpus
from .csvae import MotionVAE
from .denoiser import InteractionDiffusion
from .numerics import precision

TEST_SEED_OFFSET = 7919


def compute_context(config: RunConfig):
    """Default-dtype context for a run; 32-bit is torch's own default."""
    if config.precision == "float32":
        return contextlib.nullcontext()
    return precision(config.precision)


def make_corpora(config: RunConfig):
    c = config.corpus
    train = generate_synthetic_corpus(c.seed, c.n_samples, frames=c.frames)
    test = generate_synthetic_corpus(c.seed + TEST_SEED_OFFSET, c.n_test, frames=c.frames)
    return train, test


def train_vae(config: RunConfig, train_samples) -> MotionVAE:
    a, b = stack_corpus(train_samples)
    vae = MotionVAE(**asdict(config.vae))
    with compute_context(config):
        return vae.fit(np.concatenate([a, b]), normalizer=fit_normalizer(train_samples))


def denoiser_params(config: RunConfig, **overrides) -> dict:
    return {**asdict(config.denoiser), **overrides}


def train_denoiser(config: RunConfig, vae: MotionVAE, train_samples, **overrides) -> InteractionDiffusion:
    model = InteractionDiffusion(vae, **denoiser_params(config, **overrides))
    with compute_context(config):
        return model.fit(train_samples)


def write_loss_csv(path: str | Path, history) -> None:
    """One row per step; VAE history entries are dicts of terms, denoiser entries plain floats."""
    with open(path, "w", newline="") as fh:
        if history and isinstance(history[0], dict):
            w = csv.DictWriter(fh, fieldnames=list(history[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(history)
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows([i, f"{v:.8g}"] for i, v in enumerate(history))


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2))


def set_deterministic_threads(n: int = 1) -> None:
    """Pin the intra-op thread count so reductions run in one fixed order."""
    torch.set_num_threads(n)
