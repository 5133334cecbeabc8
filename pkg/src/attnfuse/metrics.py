"""Evaluation metrics: ZNCC, rank-based average precision, FPR at 95%
TPR, and dataset-level aggregation into a MetricReport.

ZNCC is computed per image pair and averaged over a split; the
precision-recall metrics pool pixels across the whole split into one
curve, with misclassified pixels as the positive class for the error
variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attnet
from .numgrid import ShapeError, UsageError
from .synthworld import load_manifest


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. one-class labels)."""


def zncc(estimate: np.ndarray, err: np.ndarray) -> float:
    value, _ = zncc_flagged(estimate, err)
    return value


def zncc_flagged(estimate: np.ndarray, err: np.ndarray):
    """Zero-mean normalized cross-correlation over all pixels.

    Returns (value, degenerate); a constant map has no correlation to
    report, so the value is 0 with the degenerate flag set.
    """
    a = np.asarray(estimate, dtype=np.float64).reshape(-1)
    b = np.asarray(err, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"zncc dims differ: {estimate.shape} vs {err.shape}")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt((da * da).sum())
    nb = np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return float((da * db).sum() / (na * nb)), False


def misclassification_labels(probs: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """1 where the argmax class differs from ground truth (ties resolve
    to the lowest class index), else 0."""
    pred = np.asarray(probs).argmax(axis=-3)
    return (pred != np.asarray(gt).astype(np.int64)).astype(np.uint8)


def _tied_groups(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP after each distinct descending score threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = labels[order].astype(np.int64)
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [len(s) - 1]])
    tp = np.cumsum(pos)[ends]
    predicted = ends + 1
    return tp, predicted - tp  # cumulative true / false positives per threshold


def _check_binary(scores: np.ndarray, labels: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    p = int(labels.sum())
    if p == 0 or p == len(labels):
        raise MetricError("need at least one positive and one negative label")
    return scores, labels, p


def average_precision(scores, labels, positive: str = "error") -> float:
    """Rank-based AP: descending-score thresholds, tie groups counted as
    one threshold, precision summed over recall increments.

    positive="error" scores failures directly; positive="success"
    negates the scores and labels (low estimated failure means success).
    """
    if positive not in ("error", "success"):
        raise UsageError(f"positive class must be 'error' or 'success', got {positive!r}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if positive == "success":
        scores = -scores
        labels = 1 - labels
    scores, labels, p = _check_binary(scores, labels)
    tp, fp = _tied_groups(scores, labels)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.concatenate([[0], tp])) / p
    return float((precision * recall_step).sum())


def fpr_at_95_tpr(scores, labels) -> float:
    """Lowest false-positive rate among thresholds reaching TPR >= 0.95;
    a pixel is predicted positive when its score >= threshold."""
    scores, labels, p = _check_binary(scores, labels)
    n = len(labels) - p
    tp, fp = _tied_groups(scores, labels)
    ok = (tp / p) >= 0.95
    return float(fp[ok].min() / n)


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class MetricReport:
    target: str
    source: str                      # "fused" or "raw"
    samples: int
    zncc_per_sample: list[float]
    zncc_mean: float
    zncc_degenerate: int
    ap_error: float | None
    ap_success: float | None
    fpr95: float | None
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"target": self.target, "source": self.source,
                "samples": self.samples, "zncc_mean": self.zncc_mean,
                "zncc_per_sample": self.zncc_per_sample,
                "zncc_degenerate": self.zncc_degenerate,
                "ap_error": self.ap_error, "ap_success": self.ap_success,
                "fpr95": self.fpr95, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


CSV_COLUMNS = ("label", "target", "source", "patch", "tasks", "method",
               "samples", "zncc", "ap_err", "ap_suc", "fpr95")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def report_csv_row(report: MetricReport, label: str = "") -> str:
    cfg = report.config
    cells = (label, report.target, report.source, cfg.get("patch", ""),
             "+".join(cfg.get("tasks", ())), cfg.get("method", ""),
             report.samples, report.zncc_mean, report.ap_error,
             report.ap_success, report.fpr95)
    return ",".join(_fmt(c) for c in cells)


def evaluate_cache(cache: attnet.SampleCache, *, source: str, model=None,
                   raw_method: str | None = None, batch: int = 16,
                   config_echo: dict | None = None) -> MetricReport:
    """Score one split: fused estimates through a model, or one raw
    uncertainty map, against the target task's error maps."""
    n = cache.count
    if source == "fused":
        if model is None:
            raise UsageError("fused evaluation needs a model")
        est = np.empty_like(cache.errors)
        for lo in range(0, n, batch):
            idx = np.arange(lo, min(lo + batch, n))
            image, preds, uncs, _ = cache.batch(idx)
            fused = attnet.fused_estimate(model.forward(image, preds), uncs)
            est[idx] = fused.data
    elif source == "raw":
        if raw_method is not None and raw_method in cache.raw_uncert:
            est = cache.raw_uncert[raw_method]
        else:
            est = cache.uncerts[cache.target]
    else:
        raise UsageError(f"source must be 'fused' or 'raw', got {source!r}")

    values, degenerate = [], 0
    for i in range(n):
        v, d = zncc_flagged(est[i], cache.errors[i])
        values.append(v)
        degenerate += int(d)
    ap_err = ap_suc = fpr = None
    if cache.mislabels is not None:
        scores = est.reshape(-1)
        labels = cache.mislabels.reshape(-1)
        ap_err = average_precision(scores, labels, "error")
        ap_suc = average_precision(scores, labels, "success")
        fpr = fpr_at_95_tpr(scores, labels)
    return MetricReport(
        target=cache.target, source=source, samples=n,
        zncc_per_sample=values,
        zncc_mean=float(np.mean(values)) if values else 0.0,
        zncc_degenerate=degenerate,
        ap_error=ap_err, ap_success=ap_suc, fpr95=fpr,
        config=dict(config_echo or {}))


def evaluate_dataset(dataset_dir, target: str, *, tasks, source: str,
                     model=None, methods: dict | None = None,
                     raw_method: str | None = None, batch: int = 16) -> MetricReport:
    """Convenience wrapper building the sample cache from a manifest."""
    manifest = load_manifest(dataset_dir)
    extra = (raw_method,) if raw_method else ()
    cache = attnet.SampleCache.build(dataset_dir, manifest, tasks, target,
                                     methods, extra_methods=extra)
    echo = {"tasks": list(tasks), "method": raw_method or (methods or {}).get(
        target, ""), "patch": getattr(getattr(model, "config", None), "patch", "")}
    return evaluate_cache(cache, source=source, model=model,
                          raw_method=raw_method, batch=batch, config_echo=echo)
