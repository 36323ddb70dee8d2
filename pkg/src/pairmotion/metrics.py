"""Generation metrics over feature vectors: FID, R-Precision, MM-Dist, Diversity, MultiModality."""

from __future__ import annotations

import numpy as np


class InsufficientSamplesError(ValueError):
    pass


def _features(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D feature matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name}: non-finite features")
    return x


def _psd_sqrt(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """|mu1 - mu2|^2 + tr(C1 + C2) - 2 tr((C1 C2)^1/2).

    The cross term is the sum of square roots of the eigenvalues of
    C1^1/2 C2 C1^1/2, which is symmetric, so no complex arithmetic appears.
    """
    s1 = _psd_sqrt(cov1)
    inner = s1 @ cov2 @ s1
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    cross = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)


def fid(features_gen, features_real) -> float:
    g = _features(features_gen, "fid")
    r = _features(features_real, "fid")
    if min(len(g), len(r)) < 2:
        raise InsufficientSamplesError("fid needs at least two samples per set")
    return frechet_distance(g.mean(0), np.cov(g, rowvar=False), r.mean(0), np.cov(r, rowvar=False))


def r_precision(motion_feats, text_feats, pool_size: int = 32, seed: int = 0, text_keys=None,
                top_k: int = 3) -> np.ndarray:
    """Top-1..top_k retrieval accuracy of each motion's own text among pool_size - 1 distractors.

    Distractors are drawn without replacement from the other rows; when
    ``text_keys`` is given, only rows whose key differs from the query's are
    eligible, so a duplicate of the true description never counts as a
    mismatch. A distractor at exactly the true distance does not outrank it.
    """
    m = _features(motion_feats, "r_precision")
    t = _features(text_feats, "r_precision")
    n = len(m)
    if len(t) != n:
        raise ValueError(f"r_precision: {n} motions vs {len(t)} texts")
    if n < pool_size:
        raise InsufficientSamplesError(f"r_precision needs at least {pool_size} texts, got {n}")
    if text_keys is None:
        keys = np.arange(n)
    else:
        ids: dict = {}
        keys = np.asarray([ids.setdefault(tuple(k) if isinstance(k, (list, tuple)) else k, len(ids))
                           for k in text_keys])
    rng = np.random.default_rng(seed)
    hits = np.zeros(top_k)
    for i in range(n):
        eligible = np.flatnonzero(keys != keys[i])
        if len(eligible) < pool_size - 1:
            raise InsufficientSamplesError(f"only {len(eligible)} mismatched texts for row {i}")
        pool = rng.choice(eligible, size=pool_size - 1, replace=False)
        true_d = np.linalg.norm(m[i] - t[i])
        rank = int((np.linalg.norm(t[pool] - m[i], axis=1) < true_d).sum())
        hits[rank:] += rank < top_k
    return hits / n


def mm_dist(motion_feats, text_feats) -> float:
    m = _features(motion_feats, "mm_dist")
    t = _features(text_feats, "mm_dist")
    if m.shape != t.shape:
        raise ValueError(f"mm_dist: {m.shape} vs {t.shape}")
    return float(np.linalg.norm(m - t, axis=1).mean())


def paired_mean_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b, axis=-1).mean())


def diversity(features, subset_size: int = 300, seed: int = 0) -> float:
    """Mean distance between two independently drawn subsets, each without replacement."""
    f = _features(features, "diversity")
    if subset_size > len(f):
        raise InsufficientSamplesError(f"diversity subset {subset_size} exceeds {len(f)} samples")
    rng = np.random.default_rng(seed)
    first = rng.choice(len(f), subset_size, replace=False)
    second = rng.choice(len(f), subset_size, replace=False)
    return paired_mean_distance(f[first], f[second])


def multimodality(features, subset_size: int = 100, seed: int = 0) -> float:
    """``features`` is (C, M, D): M generations for each of C descriptions."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError(f"multimodality: expected (C, M, D), got {f.shape}")
    if not np.isfinite(f).all():
        raise ValueError("multimodality: non-finite features")
    if subset_size > f.shape[1]:
        raise InsufficientSamplesError(f"multimodality subset {subset_size} exceeds {f.shape[1]} generations")
    rng = np.random.default_rng(seed)
    total = 0.0
    for group in f:
        first = rng.choice(len(group), subset_size, replace=False)
        second = rng.choice(len(group), subset_size, replace=False)
        total += np.linalg.norm(group[first] - group[second], axis=1).sum()
    return float(total / (f.shape[0] * subset_size))


def effective_size(nominal: int, available: int) -> int:
    """Shrink a nominal subset size to what a desk-scale pool can supply."""
    return max(1, min(nominal, available))


def mean_ci95(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval over repeats."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    half = 1.96 * float(v.std(ddof=1)) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return mean, mean - half, mean + half
