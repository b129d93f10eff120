"""Exact precision-recall curves and average-precision AUPRC.

Thresholds sit at each distinct score, descending, so tied scores flip as
one group. The area is the average-precision step sum
``AP = sum_k (R_k - R_{k-1}) * P_k`` over threshold steps, with no
trapezoidal interpolation; numbers are therefore directly comparable
across reimplementations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DataError, MetricError

Array = np.ndarray


@dataclass
class PRCurve:
    """Precision/recall at each distinct threshold, highest first."""

    thresholds: Array
    precision: Array
    recall: Array
    auprc: float
    n_pos: int
    n_neg: int


def pr_curve(scores, labels) -> PRCurve:
    """Exact curve over the distinct score values, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricError(
            f"scores and labels differ in length: {scores.size} vs {labels.size}"
        )
    unique = np.unique(labels)
    if not np.isin(unique, (0, 1)).all():
        raise MetricError(f"labels must be binary, got values {unique}")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0:
        raise MetricError("precision-recall is undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    # Last element of every tie group of equal scores.
    boundary = np.ones(s.size, dtype=bool)
    boundary[:-1] = s[:-1] != s[1:]
    tp = np.cumsum(y)[boundary].astype(np.float64)
    pp = (np.flatnonzero(boundary) + 1).astype(np.float64)
    precision = tp / pp
    recall = tp / n_pos
    curve = PRCurve(
        thresholds=s[boundary],
        precision=precision,
        recall=recall,
        auprc=0.0,
        n_pos=n_pos,
        n_neg=n_neg,
    )
    curve.auprc = auprc(curve)
    return curve


def auprc(curve: PRCurve) -> float:
    """Average-precision step sum over the curve's threshold steps."""
    recall_steps = np.diff(curve.recall, prepend=0.0)
    return float(np.sum(recall_steps * curve.precision))


ScoreFn = Callable[[object], Array]


def _pool_pixels(scorer, samples) -> tuple[Array, Array]:
    scores: list[Array] = []
    labels: list[Array] = []
    if hasattr(scorer, "scores_batch"):
        planes = scorer.scores_batch(samples)
    else:
        planes = [scorer(s) for s in samples]
    for sample, plane in zip(samples, planes):
        plane = np.asarray(plane)
        target = np.asarray(sample.target).reshape(plane.shape)
        scores.append(plane.ravel())
        labels.append((target > 0).astype(np.int64).ravel())
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(
    model_or_baseline,
    samples: Sequence,
    variant: Optional[str] = None,
    max_curve_points: int = 512,
) -> dict:
    """Pool every pixel of every sample into one score/label vector and
    report AUPRC for the shared horizon.

    The report's curve is decimated to at most ``max_curve_points`` evenly
    spaced thresholds; the AUPRC is always computed on the full curve.
    """
    if not samples:
        raise DataError("evaluate needs at least one sample")
    horizons = {s.horizon for s in samples}
    if len(horizons) > 1:
        raise DataError(f"samples mix horizons {sorted(horizons)}")
    if variant is None:
        config = getattr(model_or_baseline, "config", None)
        variant = config.variant if config is not None else "baseline"
    scores, labels = _pool_pixels(model_or_baseline, samples)
    curve = pr_curve(scores, labels)

    n = curve.thresholds.size
    keep = np.unique(np.linspace(0, n - 1, min(n, max_curve_points)).astype(int))
    return {
        "variant": variant,
        "h": horizons.pop(),
        "n_pixels": int(labels.size),
        "n_pos": curve.n_pos,
        "auprc": curve.auprc,
        "curve": [
            {
                "thr": float(curve.thresholds[i]),
                "p": float(curve.precision[i]),
                "r": float(curve.recall[i]),
            }
            for i in keep
        ],
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
