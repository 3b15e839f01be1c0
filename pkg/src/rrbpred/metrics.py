"""ADE/FDE, road violation (RV) and cross-track (CT) metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import closest_mode
from .scene import SceneMap


@dataclass(frozen=True, eq=False)
class MultiModalPrediction:
    """``M`` trajectories with mode probabilities (uniform unless given)."""

    means: np.ndarray                 # (M, T, 2)
    variances: np.ndarray = None      # (M, T, 2)
    probs: np.ndarray = None

    def __post_init__(self):
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 2:
            m = m[None]
        if m.ndim != 3 or m.shape[-1] != 2 or len(m) < 1:
            raise ValueError("means must have shape (M, T, 2)")
        object.__setattr__(self, "means", m)
        if self.variances is not None:
            v = np.asarray(self.variances, dtype=float).reshape(m.shape)
            object.__setattr__(self, "variances", v)
        p = np.full(len(m), 1.0 / len(m)) if self.probs is None else np.asarray(self.probs, dtype=float)
        if p.shape != (len(m),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("mode probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_trajectories(cls, trajs, probs=None):
        return cls(np.stack([t.means for t in trajs]), np.stack([t.variances for t in trajs]), probs)

    @property
    def n_modes(self) -> int:
        return len(self.means)


def _as_prediction(pred) -> MultiModalPrediction:
    if isinstance(pred, MultiModalPrediction):
        return pred
    if hasattr(pred, "means"):
        return MultiModalPrediction(pred.means, getattr(pred, "variances", None))
    return MultiModalPrediction(pred)


def metric_ade_fde(pred, gt) -> tuple[float, float]:
    """Displacement errors of the mode closest to the ground truth."""
    pred = _as_prediction(pred)
    gt = np.asarray(gt, dtype=float)
    if pred.means.shape[1:] != gt.shape:
        raise ValueError("prediction and ground truth lengths differ")
    best = int(closest_mode(pred.means, gt))
    disp = np.linalg.norm(pred.means[best] - gt, axis=-1)
    return float(disp.mean()), float(disp[-1])


def metric_rv(pred, scene_map: SceneMap) -> float:
    """Percentage of predicted points on non-drivable cells, probability-weighted over modes."""
    pred = _as_prediction(pred)
    off = ~scene_map.is_drivable(pred.means)           # (M, T)
    per_mode = off.mean(axis=-1) * 100.0
    return float(np.dot(pred.probs, per_mode))


def _walk(path: np.ndarray, target: float) -> np.ndarray:
    """Point at arc length ``target`` along ``path``; extends the last moving segment."""
    seg = np.diff(path, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    moving = np.nonzero(lengths > 0.0)[0]
    if len(moving) == 0:
        return path[0].copy()
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    if target >= cum[-1]:
        k = moving[-1]
        return path[-1] + (target - cum[-1]) * seg[k] / lengths[k]
    k = int(np.searchsorted(cum, target, side="right")) - 1
    k = min(max(k, 0), len(lengths) - 1)
    while lengths[k] == 0.0:
        k += 1
    return path[k] + (target - cum[k]) * seg[k] / lengths[k]


def metric_ct(pred_means, gt, anchor) -> float:
    """Cross-track error of a single predicted trajectory.

    The prediction is retimed by the ground-truth speed profile: both paths
    start at ``anchor`` (the last observed ego position), the predicted path
    is walked to the ground truth's total arc length (extrapolating the last
    segment if it is shorter), and CT is the distance from that point to the
    true destination.
    """
    anchor = np.asarray(anchor, dtype=float)[None]
    pm = np.asarray(pred_means, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pm.shape != gt.shape:
        raise ValueError("prediction and ground truth lengths differ")
    gt_path = np.vstack([anchor, gt])
    s_total = float(np.linalg.norm(np.diff(gt_path, axis=0), axis=1).sum())
    end = _walk(np.vstack([anchor, pm]), s_total)
    return float(np.linalg.norm(end - gt[-1]))


@dataclass
class MetricsReport:
    """Category-averaged metrics; every category counts equally."""

    ade: float
    fde: float
    rv: float
    ct: float
    per_category: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ade": self.ade, "fde": self.fde, "rv": self.rv, "ct": self.ct,
                "per_category": self.per_category, "counts": self.counts}


def aggregate(rows) -> MetricsReport:
    """Average per-sample metric rows ``(category, ade, fde, rv, ct)`` per category, then across."""
    rows = list(rows)
    if not rows:
        raise ValueError("cannot aggregate an empty evaluation")
    cats: dict[str, list] = {}
    for cat, *vals in rows:
        cats.setdefault(cat, []).append(vals)
    per = {}
    for cat in sorted(cats):
        a = np.array(cats[cat], dtype=float)
        per[cat] = dict(zip(("ade", "fde", "rv", "ct"), (float(v) for v in a.mean(axis=0))))
    overall = {k: float(np.mean([per[c][k] for c in per])) for k in ("ade", "fde", "rv", "ct")}
    return MetricsReport(per_category=per, counts={c: len(cats[c]) for c in sorted(cats)}, **overall)
