"""K-run evaluation harness, variance analysis, and latent projection export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import EvalConfig
from .losses import perceptual_loss
from .metrics import _extractor, auprc, auroc, fid, pca_2d, spearman


@dataclass
class RunTrace:
    """Per-sample probability trace across the K evaluation runs."""

    sample_id: str
    label: int
    probs: list[float]

    @property
    def mean_prob(self) -> float:
        return float(np.mean(self.probs))

    @property
    def variance(self) -> float:
        if len(self.probs) < 2:
            return 0.0
        return float(np.var(self.probs, ddof=1))

    @property
    def error(self) -> float:
        return float(abs(self.label - self.mean_prob))


@dataclass
class MetricsReport:
    k_runs: int
    base_seed: int
    per_run: dict[str, list[float]]
    aggregate: dict[str, dict[str, float]]
    real_baseline: dict[str, float]
    real_followup: dict[str, float]
    manifest_hashes: dict[str, str] = field(default_factory=dict)
    std_zero_single_run: bool = False

    def to_dict(self) -> dict:
        return {
            "k_runs": self.k_runs,
            "base_seed": self.base_seed,
            "per_run": self.per_run,
            "aggregate": self.aggregate,
            "real_baseline": self.real_baseline,
            "real_followup": self.real_followup,
            "manifest_hashes": self.manifest_hashes,
            "std_zero_single_run": self.std_zero_single_run,
        }


def _aggregate(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std}


def _batch_perceptual(gen: np.ndarray, real: np.ndarray) -> float:
    with torch.no_grad():
        return float(
            perceptual_loss(
                torch.from_numpy(gen).float(), torch.from_numpy(real).float(), _extractor()
            )
        )


def k_run_evaluate(
    test_records,
    generator,
    classifier,
    k_runs: int = 20,
    base_seed: int = 0,
    manifest_hashes: dict[str, str] | None = None,
    keep_images: bool = False,
):
    """Generate follow-ups for every test record under K seeds and score them.

    Returns (MetricsReport, traces, images) where images is a (K, N, H, W)
    array when ``keep_images`` is set and None otherwise.
    """
    if k_runs < 1:
        raise ValueError("k_runs must be >= 1")
    baselines = np.stack([r.baseline_image for r in test_records])
    followups = np.stack([r.followup_image for r in test_records])
    ehrs = [r.ehr for r in test_records]
    sample_ids = [r.sample_id for r in test_records]
    labels = np.array([r.label for r in test_records])

    real_feats = classifier.features(followups)
    per_run: dict[str, list[float]] = {"auroc": [], "auprc": [], "fid": [], "perceptual": []}
    prob_rows = []
    kept = []
    for k in range(k_runs):
        images = generator.predict_batch(baselines, ehrs, sample_ids, base_seed + k)
        probs = classifier.malignancy_probability(images)
        prob_rows.append(probs)
        per_run["auroc"].append(auroc(probs, labels))
        per_run["auprc"].append(auprc(probs, labels))
        per_run["fid"].append(fid(real_feats, classifier.features(images)))
        per_run["perceptual"].append(_batch_perceptual(images, followups))
        if keep_images:
            kept.append(images)

    base_probs = classifier.malignancy_probability(baselines)
    follow_probs = classifier.malignancy_probability(followups)
    report = MetricsReport(
        k_runs=k_runs,
        base_seed=base_seed,
        per_run=per_run,
        aggregate={name: _aggregate(vals) for name, vals in per_run.items()},
        real_baseline={"auroc": auroc(base_probs, labels), "auprc": auprc(base_probs, labels)},
        real_followup={"auroc": auroc(follow_probs, labels), "auprc": auprc(follow_probs, labels)},
        manifest_hashes=manifest_hashes or {},
        std_zero_single_run=(k_runs == 1),
    )
    prob_matrix = np.stack(prob_rows, axis=1)  # (N, K)
    traces = [
        RunTrace(sample_id=sid, label=int(lab), probs=[float(v) for v in row])
        for sid, lab, row in zip(sample_ids, labels, prob_matrix)
    ]
    images_out = np.stack(kept) if keep_images else None
    return report, traces, images_out


def running_variance(probs) -> np.ndarray:
    """Sample variance of the first k probabilities, for k = 2..K."""
    p = np.asarray(probs, dtype=np.float64)
    return np.array([p[:k].var(ddof=1) for k in range(2, len(p) + 1)])


def stabilization_fraction(
    traces: list[RunTrace], k_lo: int = 15, k_hi: int = 20, rel_tol: float = 0.10
) -> float:
    """Fraction of samples whose running variance moves less than ``rel_tol``
    relatively between k_lo and k_hi runs."""
    stable = 0
    for tr in traces:
        p = np.asarray(tr.probs[:k_hi], dtype=np.float64)
        v_lo = p[:k_lo].var(ddof=1)
        v_hi = p.var(ddof=1)
        if v_lo == 0.0:
            ok = v_hi == 0.0
        else:
            ok = abs(v_hi - v_lo) / v_lo < rel_tol
        stable += bool(ok)
    return stable / len(traces)


def categorize(error: float, variance: float, cfg: EvalConfig) -> str:
    """Total assignment into the three confidence categories.

    High variance is 'unsure'; otherwise large error is 'confidently-incorrect'
    and small error with small variance is 'confidently-correct'. Low-variance
    samples with intermediate error fall back to 'unsure'.
    """
    if variance >= cfg.unsure_var:
        return "unsure"
    if error >= cfg.incorrect_error:
        return "confidently-incorrect"
    if error < cfg.correct_error and variance < cfg.correct_var:
        return "confidently-correct"
    return "unsure"


def variance_analysis(
    traces: list[RunTrace],
    images_per_run: np.ndarray,
    real_followups: np.ndarray,
    cfg: EvalConfig,
) -> dict:
    """Per-sample scatter data, per-label summaries, and pixel-wise maps.

    ``images_per_run`` has shape (K, N, H, W); pixel variance is the sample
    variance over runs and the error map is the mean absolute deviation from
    the real follow-up.
    """
    k = images_per_run.shape[0]
    if k < 2:
        raise ValueError("variance analysis requires K >= 2 runs")
    variance_maps = images_per_run.var(axis=0, ddof=1)
    error_maps = np.abs(images_per_run - real_followups[None]).mean(axis=0)
    scatter = [
        {
            "sample_id": tr.sample_id,
            "label": tr.label,
            "error": tr.error,
            "variance": tr.variance,
            "category": categorize(tr.error, tr.variance, cfg),
        }
        for tr in traces
    ]
    per_label = {}
    for lab in (0, 1):
        vs = [tr.variance for tr in traces if tr.label == lab]
        if vs:
            per_label[lab] = {
                "mean_variance": float(np.mean(vs)),
                "median_variance": float(np.median(vs)),
                "n": len(vs),
            }
    return {
        "scatter": scatter,
        "per_label_variance": per_label,
        "variance_maps": variance_maps,
        "error_maps": error_maps,
        "category_counts": {
            name: sum(1 for s in scatter if s["category"] == name)
            for name in ("confidently-correct", "unsure", "confidently-incorrect")
        },
    }


def export_latent_projection(vae, records, out_path) -> dict:
    """Write pooled latents, 2-D PCA coordinates, diameter, and label as TSV.

    Returns the projection summary, including the absolute Spearman
    correlation between the longest diameter and each principal axis.
    """
    baselines = np.stack([r.baseline_image for r in records])
    pooled = vae.transform(baselines)
    coords, _ = pca_2d(pooled)
    long_dia = np.array([r.ehr.long_dia for r in records])
    labels = np.array([r.label for r in records])
    header = (
        ["sample_id", "label", "long_dia"]
        + [f"latent{i}" for i in range(pooled.shape[1])]
        + ["pc1", "pc2"]
    )
    lines = ["\t".join(header)]
    for i, rec in enumerate(records):
        row = [rec.sample_id, str(int(labels[i])), repr(float(long_dia[i]))]
        row += [repr(float(v)) for v in pooled[i]]
        row += [repr(float(coords[i, 0])), repr(float(coords[i, 1]))]
        lines.append("\t".join(row))
    with open(out_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    rho1 = spearman(long_dia, coords[:, 0])
    rho2 = spearman(long_dia, coords[:, 1])
    return {
        "spearman_pc1": rho1,
        "spearman_pc2": rho2,
        "best_abs_spearman": max(abs(rho1), abs(rho2)),
        "n_records": len(records),
    }
