"""Uncertainty-quality metrics: accuracy, NLL, calibration, entropy.

Every metric treats the predictive distribution at a pixel as the Gaussian
N(predicted depth, total variance). A pixel participates only when it is
valid (finite, positive depth) in prediction, variance, and ground truth
simultaneously. Variances are floored at 1e-6 m^2 so zero-variance inputs
cannot produce infinite log-likelihoods.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import NoValidPixels, ShapeMismatch

VAR_FLOOR = 1e-6  # meters^2
DELTA1_RATIO = 1.25
DEFAULT_LEVELS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


def _joint_valid(*arrays) -> np.ndarray:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"metric inputs {a.shape} vs {shape}")
    mask = np.ones(shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        for a in arrays:
            mask &= np.isfinite(a)
        mask &= (arrays[0] > 0) & (arrays[-1] > 0)  # pred and gt positive
    return mask


def _require(mask: np.ndarray):
    if not np.any(mask):
        raise NoValidPixels("no pixel is valid in every input map")


def delta1_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) < 1.25."""
    mask = _joint_valid(pred, gt)
    _require(mask)
    ratio = np.maximum(pred[mask] / gt[mask], gt[mask] / pred[mask])
    return float(np.mean(ratio < DELTA1_RATIO))


def nll(pred: np.ndarray, var: np.ndarray, gt: np.ndarray) -> float:
    """Mean Gaussian negative log-likelihood per pixel, nats."""
    mask = _joint_valid(pred, var, gt)
    _require(mask)
    v = np.maximum(var[mask], VAR_FLOOR)
    err2 = (pred[mask] - gt[mask]) ** 2
    return float(np.mean(0.5 * np.log(2.0 * np.pi * v) + err2 / (2.0 * v)))


def ece_quantile(pred, var, gt, levels=DEFAULT_LEVELS):
    """Quantile calibration: |empirical coverage - nominal| averaged.

    Coverage at level p is the fraction of pixels whose ground truth falls at
    or below the predictive p-quantile d + z(p) sqrt(v).
    """
    mask = _joint_valid(pred, var, gt)
    _require(mask)
    d = pred[mask]
    g = gt[mask]
    sd = np.sqrt(np.maximum(var[mask], VAR_FLOOR))
    curve = []
    for p in levels:
        cov = float(np.mean(g <= d + ndtri(p) * sd))
        curve.append((float(p), cov))
    scalar = float(np.mean([abs(c - p) for p, c in curve]))
    return scalar, curve


def ece_delta(pred, var, gt, bins: int = 10):
    """Calibration of the predicted probability of being delta1-accurate.

    Per pixel, q = P(gt/pred in (1/1.25, 1.25)) under N(pred, var); pixels are
    binned by q into equal-width bins and compared against the empirical
    delta1 accuracy inside each bin, weighted by bin occupancy.
    """
    mask = _joint_valid(pred, var, gt)
    _require(mask)
    d = pred[mask]
    g = gt[mask]
    sd = np.sqrt(np.maximum(var[mask], VAR_FLOOR))
    q = ndtr((DELTA1_RATIO * d - d) / sd) - ndtr((d / DELTA1_RATIO - d) / sd)
    accurate = np.maximum(d / g, g / d) < DELTA1_RATIO
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.digitize(q, edges) - 1, 0, bins - 1)
    scalar = 0.0
    curve = []
    n = q.size
    for b in range(bins):
        sel = which == b
        n_b = int(np.count_nonzero(sel))
        if n_b == 0:
            continue
        conf = float(np.mean(q[sel]))
        acc = float(np.mean(accurate[sel]))
        scalar += (n_b / n) * abs(conf - acc)
        curve.append((conf, acc))
    return float(scalar), curve


def entropy_histogram(var: np.ndarray, bins: int = 50):
    """Histogram and mean of per-pixel Gaussian differential entropy."""
    with np.errstate(invalid="ignore"):
        mask = np.isfinite(var) & (var > 0)
    _require(mask)
    ent = 0.5 * np.log(2.0 * np.pi * np.e * np.maximum(var[mask], VAR_FLOOR))
    counts, edges = np.histogram(ent, bins=bins)
    return {
        "mean_entropy": float(ent.mean()),
        "counts": counts.tolist(),
        "edges": edges.tolist(),
        "pixel_count": int(mask.sum()),
    }


def binned_error_vs_confidence(
    pred, var, gt, percentiles: int = 10, confidence_percentile: float = 50.0
):
    """Per-error-percentile mean NLL over the confident (low-variance) pixels.

    Groups differ in size by at most one pixel; the table exposes where
    confident predictions hide large errors.
    """
    mask = _joint_valid(pred, var, gt)
    _require(mask)
    d = pred[mask]
    g = gt[mask]
    v = np.maximum(var[mask], VAR_FLOOR)
    cutoff = np.percentile(v, confidence_percentile)
    keep = v <= cutoff
    if not np.any(keep):
        raise NoValidPixels("no pixel under the confidence cutoff")
    d, g, v = d[keep], g[keep], v[keep]
    err = np.abs(d - g)
    order = np.argsort(err, kind="stable")
    rows = []
    for gi, idx in enumerate(np.array_split(order, percentiles)):
        if idx.size == 0:
            continue
        pix_nll = 0.5 * np.log(2 * np.pi * v[idx]) + (d[idx] - g[idx]) ** 2 / (2 * v[idx])
        rows.append(
            {
                "group": gi,
                "count": int(idx.size),
                "mean_abs_error": float(err[idx].mean()),
                "mean_nll": float(pix_nll.mean()),
            }
        )
    return rows


@dataclass
class CalibrationReport:
    delta1: float
    nll: float
    ece_delta: float
    ece_q: float
    pixel_count: int
    quantile_curve: list = field(default_factory=list)
    delta_curve: list = field(default_factory=list)
    entropy: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def curve_csv(self, which: str) -> str:
        curve = self.quantile_curve if which == "quantile" else self.delta_curve
        lines = ["nominal,empirical"]
        lines += [f"{a:.6f},{b:.6f}" for a, b in curve]
        return "\n".join(lines) + "\n"


def evaluate(pred: np.ndarray, var: np.ndarray, gt: np.ndarray) -> CalibrationReport:
    """All Table-style uncertainty metrics for one prediction/variance pair."""
    mask = _joint_valid(pred, var, gt)
    _require(mask)
    ece_d, curve_d = ece_delta(pred, var, gt)
    ece_q, curve_q = ece_quantile(pred, var, gt)
    return CalibrationReport(
        delta1=delta1_accuracy(pred, gt),
        nll=nll(pred, var, gt),
        ece_delta=ece_d,
        ece_q=ece_q,
        pixel_count=int(mask.sum()),
        quantile_curve=curve_q,
        delta_curve=curve_d,
        entropy=entropy_histogram(np.where(mask, var, np.nan)),
    )
