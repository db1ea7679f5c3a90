"""Evaluation metrics: position errors, Procrustes alignment, F-scores and PCK curves.

Inputs are in meters; errors and thresholds are reported in millimeters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_PCK_THRESHOLDS = np.linspace(0.0, 50.0, 51)


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} must be matching n x d arrays")
    return pred, gt


def position_error(pred, gt) -> float:
    """Mean per-point Euclidean distance in millimeters."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) * 1000.0)


def procrustes_transform(pred, gt):
    """Similarity (scale, rotation, translation) that best maps ``pred`` onto ``gt``.

    Closed form via the SVD of the centered cross-covariance, with the sign of
    the last singular direction flipped when needed to exclude reflections.
    """
    pred, gt = _pair(pred, gt)
    if pred.shape[0] < 3:
        raise ValueError("Procrustes alignment needs at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    cov = g0.T @ p0 / pred.shape[0]
    u, sv, vt = np.linalg.svd(cov)
    if sv[0] <= 0 or sv[1] <= 1e-12 * sv[0]:
        raise np.linalg.LinAlgError("rank-deficient cross-covariance; alignment is undetermined")
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u) * np.linalg.det(vt)) or 1.0
    rot = (u * d) @ vt
    var_p = np.sum(p0 * p0) / pred.shape[0]
    scale = float(np.sum(sv * d) / var_p)
    trans = mu_g - scale * rot @ mu_p
    return scale, rot, trans


def procrustes_align(pred, gt) -> np.ndarray:
    scale, rot, trans = procrustes_transform(pred, gt)
    return scale * np.asarray(pred, dtype=np.float64) @ rot.T + trans


def pa_position_error(pred, gt) -> float:
    return position_error(procrustes_align(pred, gt), gt)


def f_score(pred_mesh, gt_mesh, threshold_mm: float) -> float:
    """Harmonic mean of precision (pred to gt) and recall (gt to pred) at the threshold."""
    pred, gt = _pair(pred_mesh, gt_mesh)
    if pred.shape[0] == 0:
        raise ValueError("f_score needs non-empty meshes")
    tau = threshold_mm / 1000.0
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float(np.mean(d_pred <= tau))
    recall = float(np.mean(d_gt <= tau))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def pck_curve(pred, gt, thresholds_mm) -> tuple[list[float], float]:
    """Fraction of points within each threshold, and the normalized trapezoidal AUC."""
    thresholds = np.asarray(thresholds_mm, dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("pck_curve needs at least one threshold")
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted ascending")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    dist = np.linalg.norm(pred - gt, axis=1) * 1000.0
    fractions = [float(np.mean(dist <= t)) for t in thresholds]
    span = thresholds[-1] - thresholds[0]
    if span == 0:
        return fractions, fractions[0]
    auc = float(np.trapezoid(fractions, thresholds) / span)
    return fractions, auc


@dataclass
class MetricReport:
    j_pe: float
    v_pe: float
    pa_j_pe: float
    pa_v_pe: float
    pa_f5: float
    pa_f15: float
    pck_auc: float
    n_samples: int = 0

    def to_json_dict(self) -> dict:
        return {"j_pe_mm": self.j_pe, "v_pe_mm": self.v_pe, "pa_j_pe_mm": self.pa_j_pe,
                "pa_v_pe_mm": self.pa_v_pe, "pa_f5": self.pa_f5, "pa_f15": self.pa_f15,
                "pck_auc": self.pck_auc, "n_samples": self.n_samples}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_samples(preds, gts, thresholds_mm=DEFAULT_PCK_THRESHOLDS):
    """Mean metrics over samples of ``{"joints": n x 3, "vertices": m x 3}``.

    Returns the report and the Procrustes-aligned PCK curves for joints and vertices.
    """
    if len(preds) != len(gts):
        raise ValueError(f"sample count mismatch: {len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("no samples to evaluate")
    rows = []
    aligned_j, aligned_v, gt_j, gt_v = [], [], [], []
    for p, g in zip(preds, gts):
        pj, gj = _pair(p["joints"], g["joints"])
        pv, gv = _pair(p["vertices"], g["vertices"])
        aj = procrustes_align(pj, gj)
        av = procrustes_align(pv, gv)
        rows.append((position_error(pj, gj), position_error(pv, gv), position_error(aj, gj),
                     position_error(av, gv), f_score(av, gv, 5.0), f_score(av, gv, 15.0)))
        aligned_j.append(aj)
        aligned_v.append(av)
        gt_j.append(gj)
        gt_v.append(gv)
    m = np.mean(np.array(rows), axis=0)
    pck_j, auc_j = pck_curve(np.concatenate(aligned_j), np.concatenate(gt_j), thresholds_mm)
    pck_v, auc_v = pck_curve(np.concatenate(aligned_v), np.concatenate(gt_v), thresholds_mm)
    report = MetricReport(*map(float, m), pck_auc=auc_j, n_samples=len(preds))
    curves = {"thresholds_mm": list(map(float, thresholds_mm)), "joints": pck_j, "vertices": pck_v,
              "auc_joints": auc_j, "auc_vertices": auc_v}
    return report, curves
