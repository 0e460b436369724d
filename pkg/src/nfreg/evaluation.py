"""Correspondence and registration quality metrics.

All values are raw (unscaled); benchmark tables usually print geodesic
errors multiplied by 100, which is left to the command line front end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeMismatch
from .geometry import as_points, nearest_neighbors

DEFAULT_CURVE_STEPS = 101


@dataclass
class GeodesicErrorReport:
    """Per-point normalized geodesic errors and their cumulative curve."""

    errors: np.ndarray
    thresholds: np.ndarray = field(default=None)
    curve: np.ndarray = field(default=None)

    @property
    def mean(self):
        return float(self.errors.mean()) if len(self.errors) else 0.0


def error_curve(errors, thresholds=None, steps=DEFAULT_CURVE_STEPS):
    """Fraction of errors ``<= t`` for each threshold (default ``0..max(0.25, max)``)."""
    errors = np.asarray(errors, dtype=np.float64)
    if thresholds is None:
        top = max(0.25, float(errors.max()) if len(errors) else 0.0)
        thresholds = np.linspace(0.0, top, steps)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(errors) == 0:
        return thresholds, np.ones(len(thresholds))
    ordered = np.sort(errors)
    return thresholds, np.searchsorted(ordered, thresholds, side="right") / len(errors)


def geodesic_error(p2p_pred, p2p_gt, geo, area, thresholds=None):
    """Geodesic error of a target-to-source map, normalized by ``sqrt(area)``.

    Parameters
    ----------
    p2p_pred, p2p_gt : (n_T,) int arrays of source vertex indices
    geo : (N, N) source geodesic distances
    area : total source surface area

    Returns
    -------
    GeodesicErrorReport
    """
    p2p_pred, p2p_gt = np.asarray(p2p_pred), np.asarray(p2p_gt)
    if p2p_pred.shape != p2p_gt.shape:
        raise SizeMismatch(f"predicted map covers {p2p_pred.shape}, ground truth {p2p_gt.shape}")
    if len(p2p_pred) and max(p2p_pred.max(), p2p_gt.max()) >= len(geo):
        raise SizeMismatch(f"map index outside a geodesic matrix of {len(geo)} vertices")
    errors = np.asarray(geo[p2p_pred, p2p_gt], dtype=np.float64) / math.sqrt(area)
    t, c = error_curve(errors, thresholds)
    return GeodesicErrorReport(errors, t, c)


def euclidean_recall(pred_points, gt_points, thresholds=()):
    """Average correspondence error and recall at absolute distance thresholds.

    Returns
    -------
    ae : float
        Mean Euclidean distance between matched positions.
    recalls : dict
        ``threshold -> fraction of distances <= threshold``.
    """
    pred, gt = np.asarray(pred_points, dtype=np.float64), np.asarray(gt_points, dtype=np.float64)
    if pred.shape != gt.shape:
        raise SizeMismatch(f"{pred.shape} vs {gt.shape}")
    dist = np.linalg.norm(pred - gt, axis=1)
    ae = float(dist.mean()) if len(dist) else 0.0
    recalls = {float(t): float(np.mean(dist <= t)) if len(dist) else 1.0 for t in thresholds}
    return ae, recalls


def chamfer_metric(A, B, squared=False):
    """Symmetric Chamfer distance: sum of both mean-of-min nearest distances.

    ``squared=True`` averages squared distances instead, which is the
    form used as an optimization energy.
    """
    A, B = as_points(A), as_points(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer_metric needs two non-empty point sets")
    d_ab = nearest_neighbors(B, A)[1]
    d_ba = nearest_neighbors(A, B)[1]
    if squared:
        return float(np.mean(d_ab**2) + np.mean(d_ba**2))
    return float(d_ab.mean() + d_ba.mean())


def one_sided_chamfer(A, B, squared=False):
    """Mean over points of ``A`` of the distance to the nearest point of ``B``."""
    A, B = as_points(A), as_points(B)
    d = nearest_neighbors(B, A)[1]
    return float(np.mean(d**2) if squared else d.mean())


def report_lines(geo_report=None, ae=None, recalls=None, chamfer=None, scale=1.0):
    """``key=value`` lines; ``scale`` multiplies the geodesic error only."""
    lines = []
    if geo_report is not None:
        lines.append(f"geodesic_error={geo_report.mean * scale:.10g}")
        lines.append(f"geodesic_error_scale={scale:g}")
        lines.append(f"n_points={len(geo_report.errors)}")
    if ae is not None:
        lines.append(f"ae={ae:.10g}")
    for t, r in (recalls or {}).items():
        lines.append(f"recall@{t:g}={r:.10g}")
    if chamfer is not None:
        lines.append(f"chamfer={chamfer:.10g}")
    return lines


def write_curve_csv(path, report):
    with open(path, "w") as fh:
        fh.write("threshold,fraction\n")
        for t, c in zip(report.thresholds, report.curve):
            fh.write(f"{t:.10g},{c:.10g}\n")
