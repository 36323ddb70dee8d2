"""Repeated metric evaluation, metrics CSV / plot JSON writers, and the routing ablation harness."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import EvalSection
from .denoiser import InteractionDiffusion, smoothed
from .features import FeatureExtractor, pair_array
from .metrics import diversity, effective_size, fid, mean_ci95, mm_dist, multimodality, r_precision

log = logging.getLogger(__name__)

METRIC_FIELDS = ("run_id", "mode", "metric", "mean", "ci95_low", "ci95_high")
METRICS = ("fid", "r_precision_top1", "r_precision_top2", "r_precision_top3", "mm_dist", "diversity",
           "multimodality")
GRIDS = {
    "mode": ("dense", "token_choice", "expert_choice", "dts"),
    "experts": (4, 8, 16),
    "c_exp": (0.8, 1.0, 2.0),
}
GRID_PARAM = {"mode": "mode", "experts": "n_experts", "c_exp": "c_exp"}


def fit_extractor(real_samples, config: EvalSection | None = None) -> FeatureExtractor:
    config = config or EvalSection()
    return FeatureExtractor(feature_dim=config.feature_dim, seed=config.feature_seed).fit(
        pair_array(real_samples), [s.text.tokens for s in real_samples])


def _pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([a, b], axis=1)


def mm_prompts(test_samples, count: int) -> list[tuple[int, ...]]:
    """The first ``count`` distinct descriptions in test order."""
    seen: dict = {}
    for s in test_samples:
        seen.setdefault(tuple(s.text.tokens), None)
        if len(seen) == count:
            break
    return list(seen)


def effective_sizes(config: EvalSection, n_test: int) -> dict:
    return {"diversity_size": effective_size(config.diversity_size, n_test),
            "mm_size": effective_size(config.mm_size, config.mm_generations),
            "r_pool": config.r_pool}


def score(features, text_features, keys, sizes: dict, real_features, seed: int) -> dict:
    top = r_precision(features, text_features, sizes["r_pool"], seed, keys)
    return {
        "fid": fid(features, real_features),
        "r_precision_top1": float(top[0]),
        "r_precision_top2": float(top[1]),
        "r_precision_top3": float(top[2]),
        "mm_dist": mm_dist(features, text_features),
        "diversity": diversity(features, sizes["diversity_size"], seed),
    }


def evaluate_real(test_samples, extractor: FeatureExtractor, config: EvalSection | None = None) -> dict:
    """Metric values of the held-out real clips themselves (multimodality undefined)."""
    config = config or EvalSection()
    keys = [s.text.tokens for s in test_samples]
    feats = extractor.transform(pair_array(test_samples))
    text_feats = extractor.transform_text(keys)
    sizes = effective_sizes(config, len(test_samples))
    out = {m: [] for m in METRICS if m != "multimodality"}
    for r in range(config.n_repeats):
        for k, v in score(feats, text_feats, keys, sizes, feats, config.seed + r).items():
            out[k].append(v)
    return out


def evaluate_model(model: InteractionDiffusion, test_samples, extractor: FeatureExtractor,
                   config: EvalSection | None = None) -> dict:
    """Per-repeat metric values; every repeat draws fresh samples with its own seed."""
    config = config or EvalSection()
    keys = [s.text.tokens for s in test_samples]
    real = extractor.transform(pair_array(test_samples))
    text_feats = extractor.transform_text(keys)
    sizes = effective_sizes(config, len(test_samples))
    prompts = mm_prompts(test_samples, config.mm_texts)
    mm_batch = [p for p in prompts for _ in range(config.mm_generations)]
    out = {m: [] for m in METRICS}
    for r in range(config.n_repeats):
        seed = config.seed + r
        a, b = model.sample(keys, seed=seed)
        for k, v in score(extractor.transform(_pairs(a, b)), text_feats, keys, sizes, real, seed).items():
            out[k].append(v)
        ma, mb = model.sample(mm_batch, seed=10_000 + seed)
        mm_feats = extractor.transform(_pairs(ma, mb)).reshape(len(prompts), config.mm_generations, -1)
        out["multimodality"].append(multimodality(mm_feats, sizes["mm_size"], seed))
    return out


def evaluate_noise_baseline(model: InteractionDiffusion, test_samples, extractor: FeatureExtractor,
                            config: EvalSection | None = None) -> dict:
    """FID of decoded Gaussian latents, per repeat; a trained sampler has to beat it."""
    config = config or EvalSection()
    real = extractor.transform(pair_array(test_samples))
    out = {"fid": []}
    for r in range(config.n_repeats):
        a, b = model.sample_noise_baseline(len(test_samples), seed=config.seed + r)
        out["fid"].append(fid(extractor.transform(_pairs(a, b)), real))
    return out


def metric_rows(run_id: str, mode: str, per_repeat: dict) -> list[dict]:
    rows = []
    for metric in METRICS:
        if metric not in per_repeat:
            continue
        mean, lo, hi = mean_ci95(per_repeat[metric])
        rows.append({"run_id": run_id, "mode": mode, "metric": metric, "mean": mean, "ci95_low": lo,
                     "ci95_high": hi})
    return rows


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in METRIC_FIELDS})


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{**r, "mean": float(r["mean"]), "ci95_low": float(r["ci95_low"]),
                 "ci95_high": float(r["ci95_high"])} for r in csv.DictReader(fh)]


def training_curves(model: InteractionDiffusion, every: int = 50) -> dict:
    steps = list(range(0, len(model.loss_history_), every))
    ma = smoothed(model.loss_history_)
    return {"step": steps, "loss": [model.loss_history_[s] for s in steps],
            "loss_ma100": [float(ma[s]) for s in steps]}


def write_plot_json(path: str | Path, curves: dict) -> None:
    Path(path).write_text(json.dumps(curves, sort_keys=True, indent=1))


def grid_points(axis: str, values=None) -> list[dict]:
    if axis not in GRIDS:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(GRIDS)}")
    values = GRIDS[axis] if values is None else values
    return [{GRID_PARAM[axis]: v} for v in values]


def run_ablation(points: list[dict], train_samples, test_samples, vae, base_params: dict,
                 extractor: FeatureExtractor, config: EvalSection | None = None,
                 run_prefix: str = "ablate", cache: dict | None = None) -> tuple[list[dict], dict]:
    """Train and evaluate one denoiser per grid point, identical seeds and budgets throughout.

    Returns metric rows and the trained models keyed by run id. Grid points
    that resolve to the same parameters reuse one trained model via ``cache``.
    """
    config = config or EvalSection()
    cache = {} if cache is None else cache
    rows, models = [], {}
    for point in points:
        params = {**base_params, **point}
        key = json.dumps(params, sort_keys=True)
        run_id = f"{run_prefix}-{params['mode']}-n{params['n_experts']}-c{params['c_exp']:g}"
        if key not in cache:
            log.info("ablation %s: training", run_id)
            model = InteractionDiffusion(vae, **params).fit(train_samples)
            cache[key] = (model, evaluate_model(model, test_samples, extractor, config))
        model, per_repeat = cache[key]
        models[run_id] = model
        rows.extend(metric_rows(run_id, params["mode"], per_repeat))
    return rows, models


def dts_vs_expert_choice(rows: list[dict], metric: str = "fid") -> dict:
    """Compare DTS and Expert-Choice; fails only when DTS is worse by more than its own CI95 width."""
    found = {r["mode"]: r for r in rows if r["metric"] == metric and r["mode"] in ("dts", "expert_choice")}
    dts, ec = found["dts"], found["expert_choice"]
    width = dts["ci95_high"] - dts["ci95_low"]
    gap = dts["mean"] - ec["mean"]
    return {"dts": dts["mean"], "expert_choice": ec["mean"], "gap": gap, "dts_ci95_width": width,
            "passed": bool(gap <= width)}


def mode_ordering(rows: list[dict], metric: str = "fid") -> list[tuple[str, float]]:
    """(run_id, mean) pairs sorted best-first for a lower-is-better metric."""
    vals = [(r["run_id"], r["mean"]) for r in rows if r["metric"] == metric]
    return sorted(vals, key=lambda kv: kv[1])


def eval_record(config: EvalSection, n_test: int) -> dict:
    return {**asdict(config), "effective": effective_sizes(config, n_test)}
