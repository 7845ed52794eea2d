"""Ranking metrics, distribution distance, perceptual distance, projections."""

from __future__ import annotations

import numpy as np
import torch

from .losses import PerceptualFeatures, perceptual_loss

COV_EPS = 1e-6


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the average rank of their group."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties count one half; equals the normalized Mann-Whitney U statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc requires both classes to be present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Area under the precision-recall curve by the step (average-precision)
    rule: sum over score thresholds of precision times the recall increment.
    Tied scores enter a threshold group together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("auprc requires at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = fp = 0
    ap = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        group_tp = int(y[i : j + 1].sum())
        group_fp = (j - i + 1) - group_tp
        tp += group_tp
        fp += group_fp
        if group_tp:
            ap += (group_tp / n_pos) * (tp / (tp + fp))
        i = j + 1
    return float(ap)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Matrix square root of a symmetric PSD matrix via eigendecomposition,
    with negative eigenvalues clamped at zero."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}) between Gaussian fits."""
    a = _sym_sqrt(np.asarray(sigma1, dtype=np.float64))
    inner = _sym_sqrt(a @ np.asarray(sigma2, dtype=np.float64) @ a)
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(inner))


def fid(real_features, generated_features) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances get a +1e-6 diagonal, so degenerate feature sets are handled
    rather than rejected.
    """
    fr = np.asarray(real_features, dtype=np.float64)
    fg = np.asarray(generated_features, dtype=np.float64)
    if fr.ndim == 1:
        fr = fr[:, None]
    if fg.ndim == 1:
        fg = fg[:, None]
    if fr.shape[0] < 2 or fg.shape[0] < 2:
        raise ValueError("fid requires at least 2 samples per side")
    mu_r, mu_g = fr.mean(axis=0), fg.mean(axis=0)
    cov_r = np.cov(fr, rowvar=False, ddof=1) + COV_EPS * np.eye(fr.shape[1])
    cov_g = np.cov(fg, rowvar=False, ddof=1) + COV_EPS * np.eye(fg.shape[1])
    return frechet_distance(mu_r, cov_r, mu_g, cov_g)


_shared_extractor: PerceptualFeatures | None = None


def _extractor() -> PerceptualFeatures:
    global _shared_extractor
    if _shared_extractor is None:
        _shared_extractor = PerceptualFeatures()
    return _shared_extractor


def perceptual_distance(a, b) -> float:
    """Fixed-feature perceptual distance between two [0,1] images."""
    ta = torch.as_tensor(np.asarray(a), dtype=torch.float32)
    tb = torch.as_tensor(np.asarray(b), dtype=torch.float32)
    with torch.no_grad():
        return float(perceptual_loss(ta, tb, _extractor()))


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    rx = _average_ranks(np.asarray(x, dtype=np.float64))
    ry = _average_ranks(np.asarray(y, dtype=np.float64))
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 2-D PCA: centered scores and the two loading rows.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T, comps
