"""Single-task uncertainty estimators and ground-truth error maps.

All estimators consume plain numpy rasters for one sample (channel
first, no batch axis) and return maps shaped [1, 1, H, W] so they stack
directly into training batches.  Larger always means less reliable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numgrid import ShapeError, UsageError, minmax01

_CLAMP = 1e-7


@dataclass
class UncertaintyMap:
    values: np.ndarray  # [1, 1, H, W] float32, nonnegative
    method: str
    task: str


@dataclass
class ErrorMap:
    values: np.ndarray  # [1, 1, H, W] float32, nonnegative
    task: str


def _as_map(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float32).reshape(
        1, 1, *values.shape[-2:])


def softmax_entropy(probs: np.ndarray, task: str = "semantic") -> UncertaintyMap:
    """Per-pixel -sum p ln p over the class channel."""
    if probs.shape[0] < 2:
        raise UsageError("entropy needs at least 2 class channels")
    logp = np.log(np.maximum(probs, _CLAMP))
    ent = -(probs * logp).sum(axis=0)
    return UncertaintyMap(_as_map(ent), "entropy", task)


def softmax_distance(probs: np.ndarray, task: str = "semantic") -> UncertaintyMap:
    """One minus the margin between the two largest class probabilities."""
    if probs.shape[0] < 2:
        raise UsageError("softmax distance needs at least 2 class channels")
    top2 = np.partition(probs, -2, axis=0)[-2:]
    margin = top2.max(axis=0) - top2.min(axis=0)
    return UncertaintyMap(_as_map(1.0 - margin), "distance", task)


def ensemble_uncertainty(members: np.ndarray, task_kind: str,
                         task: str = "") -> UncertaintyMap:
    """Cross-member disagreement of M stochastic prediction draws.

    Regression rasters use the per-pixel population standard deviation
    (averaged over channels); classification rasters use the variation
    ratio 1 - modal_argmax_count / M.
    """
    m = members.shape[0]
    if m < 2:
        raise UsageError(f"ensemble uncertainty needs M >= 2, got {m}")
    if task_kind == "classification":
        votes = members.argmax(axis=1)  # [M, H, W]
        k = members.shape[1]
        counts = np.zeros((k,) + votes.shape[1:], dtype=np.int32)
        for c in range(k):
            counts[c] = (votes == c).sum(axis=0)
        u = 1.0 - counts.max(axis=0) / float(m)
    elif task_kind == "regression":
        u = members.std(axis=0, ddof=0).mean(axis=0)
    else:
        raise UsageError(f"unknown task kind {task_kind!r}")
    return UncertaintyMap(_as_map(u), "ensemble", task)


def flip_uncertainty(pred: np.ndarray, pred_flipped_back: np.ndarray,
                     task: str = "") -> UncertaintyMap:
    """Mean absolute channel difference against the mirrored-input prediction."""
    if pred.shape != pred_flipped_back.shape:
        raise ShapeError(
            f"flip uncertainty dims differ: {pred.shape} vs {pred_flipped_back.shape}")
    u = np.abs(pred - pred_flipped_back).mean(axis=0)
    return UncertaintyMap(_as_map(u), "flip", task)


def roi_uncertainty(instance_pred: np.ndarray, task: str = "instance") -> UncertaintyMap:
    """One minus detection confidence of the covering instance; 0.5 on background."""
    ids, conf = instance_pred[0], instance_pred[1]
    u = np.where(ids > 0, 1.0 - conf, 0.5)
    return UncertaintyMap(_as_map(u), "roi", task)


def error_map(kind: str, pred: np.ndarray, gt: np.ndarray, task: str = "") -> ErrorMap:
    """Ground-truth per-pixel prediction error.

    cross_entropy: -ln p(gt class) from a class-probability raster;
    l2: absolute residual of a scalar prediction;
    angular: 1 - <pred, gt> of unit normals after renormalizing pred.
    """
    if kind == "cross_entropy":
        k = pred.shape[0]
        labels = gt.astype(np.int64)
        if labels.max() >= k or labels.min() < 0:
            raise UsageError(f"label outside [0, {k}) in cross-entropy ground truth")
        p_gt = np.take_along_axis(pred, labels[None], axis=0)[0]
        err = -np.log(np.maximum(p_gt, _CLAMP))
    elif kind == "l2":
        err = np.abs(pred.reshape(gt.shape[-2:]) - gt.reshape(gt.shape[-2:]))
    elif kind == "angular":
        norm = np.sqrt((pred * pred).sum(axis=0, keepdims=True))
        unit = pred / np.maximum(norm, 1e-12)
        err = np.clip(1.0 - (unit * gt).sum(axis=0), 0.0, None)
    else:
        raise UsageError(f"unknown error kind {kind!r}")
    return ErrorMap(_as_map(err), task)


def normalize_01(m):
    """Image-wise rescale of a map into [0, 1]; constant maps go to zero."""
    out = minmax01(m.values)
    if isinstance(m, UncertaintyMap):
        return UncertaintyMap(out, m.method, m.task)
    return ErrorMap(out, m.task)


# wiring between task kinds, estimator names and error kinds ---------------

TASK_KIND = {"semantic": "classification", "depth": "regression",
             "normal": "regression", "instance": "instance"}

METHODS = {"semantic": ("entropy", "distance", "ensemble"),
           "depth": ("ensemble", "flip"),
           "normal": ("flip", "ensemble"),
           "instance": ("roi",)}

ERROR_KIND = {"semantic": "cross_entropy", "depth": "l2", "normal": "angular"}

DEFAULT_METHOD = {"semantic": "entropy", "depth": "ensemble",
                  "normal": "flip", "instance": "roi"}


def compute_uncertainty(task: str, method: str, raster: np.ndarray,
                        ensemble: np.ndarray, flipped: np.ndarray) -> UncertaintyMap:
    """Evaluate a named estimator over one task's stored predictions."""
    if method not in METHODS.get(task, ()):
        raise UsageError(f"method {method!r} not available for task {task!r}")
    if method == "entropy":
        return softmax_entropy(raster, task)
    if method == "distance":
        return softmax_distance(raster, task)
    if method == "ensemble":
        kind = "classification" if TASK_KIND[task] == "classification" else "regression"
        return ensemble_uncertainty(ensemble, kind, task)
    if method == "flip":
        return flip_uncertainty(raster, flipped, task)
    return roi_uncertainty(raster, task)


def compute_error(task: str, raster: np.ndarray, gt: np.ndarray) -> ErrorMap:
    """Ground-truth error map for a task's canonical prediction raster."""
    if task not in ERROR_KIND:
        raise UsageError(f"no error definition for task {task!r}")
    return error_map(ERROR_KIND[task], raster, gt, task)
