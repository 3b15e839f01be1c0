"""Inverse-variance-weighted merging of the KD and residual-corrected trajectories.

All functions are elementwise over arrays of any matching shape, so the
same code serves a single (step, axis) entry or a whole batch of
trajectories. The merged mean is ``w * y_kd + w_t * y_ad``, with
``w + w_t = 1`` and, for the residual modes, ``y_ad = y_kd + y_res``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

VARIANCE_FLOOR = 1e-4
DEGENERATE_EPS = 1e-12
VI_FIXED_KD_VARIANCE = 1.0


class FusionMode(str, Enum):
    IVW = "ivw"
    SIMPLE_ADD = "simple_add"          # A-RRB
    VI_INDEPENDENT = "vi_independent"  # VI1
    VI_FIXED = "vi_fixed"              # VI2


class DegenerateFusionError(ArithmeticError):
    pass


def _weights(s_kd, s_ad, s_cross):
    """Clamped optimal weights plus bookkeeping needed for the backward pass."""
    s_kd, s_ad, s_cross = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (s_kd, s_ad, s_cross)))
    den = s_ad + s_kd - 2.0 * s_cross
    degenerate = den <= DEGENERATE_EPS
    safe = np.where(degenerate, 1.0, den)
    wt_raw = (s_kd - s_cross) / safe
    wt = np.clip(wt_raw, 0.0, 1.0)
    active = ~degenerate & (wt_raw > 0.0) & (wt_raw < 1.0)
    wt = np.where(degenerate, 0.0, wt)
    w = 1.0 - wt
    return w, wt, den, degenerate, active


def ivw_weights(sigma_kd, sigma_ad, sigma_cross=0.0):
    """Minimum-variance weights ``(w, w_t)`` for merging two correlated estimates.

    ``w = (s_ad - s_x) / (s_ad + s_kd - 2 s_x)`` and
    ``w_t = (s_kd - s_x) / (s_ad + s_kd - 2 s_x)``, clamped to [0, 1] and
    renormalized so they sum to one.

    Raises
    ------
    DegenerateFusionError
        If any denominator is at or below 1e-12.
    """
    w, wt, _, degenerate, _ = _weights(sigma_kd, sigma_ad, sigma_cross)
    if np.any(degenerate):
        raise DegenerateFusionError("fusion denominator vanished; fall back to w=1")
    if w.ndim == 0:
        return float(w), float(wt)
    return w, wt


def merged_variance(sigma_kd, sigma_ad, sigma_cross, w, wt):
    v = w * w * sigma_kd + wt * wt * sigma_ad + 2.0 * w * wt * sigma_cross
    return np.maximum(v, VARIANCE_FLOOR)


@dataclass
class FusionResult:
    mean: np.ndarray
    var: np.ndarray
    w: np.ndarray
    wt: np.ndarray
    n_degenerate: int
    _cache: tuple

    def backward(self, d_mean, d_var):
        """Gradients w.r.t. the second estimate's mean and variance."""
        mode, s_kd, s_ad, s_cross, delta, den, active, floored = self._cache
        w, wt = self.w, self.wt
        if mode == FusionMode.SIMPLE_ADD:
            return d_mean * 1.0, np.where(floored, 0.0, d_var)
        dwt_dsad = np.where(active, -(s_kd - s_cross) / np.where(active, den, 1.0) ** 2, 0.0)
        dvar_dwt = -2.0 * w * s_kd + 2.0 * wt * s_ad + 2.0 * s_cross * (w - wt)
        dvar_dsad = np.where(floored, 0.0, wt * wt + dvar_dwt * dwt_dsad)
        g_mean = d_mean * wt
        g_sad = d_mean * delta * dwt_dsad + d_var * dvar_dsad
        return g_mean, g_sad


def fuse(kd_mean, kd_var, other_mean, other_var, mode=FusionMode.IVW, sigma_cross=0.0,
         fixed_kd_var=VI_FIXED_KD_VARIANCE) -> FusionResult:
    """Merge a KD Gaussian with a second Gaussian estimate.

    For ``ivw`` and ``simple_add`` the second estimate is the residual
    ``(mu_res, s_res)``; the corrected trajectory is ``y_kd + mu_res`` with
    variance ``s_res``. For ``vi_independent`` / ``vi_fixed`` it is an
    independent full trajectory; ``vi_fixed`` replaces the KD variance with
    ``fixed_kd_var``.
    """
    mode = FusionMode(mode)
    kd_mean = np.asarray(kd_mean, dtype=float)
    other_mean = np.asarray(other_mean, dtype=float)
    s_ad = np.asarray(other_var, dtype=float)
    s_kd = np.broadcast_to(np.asarray(kd_var, dtype=float), s_ad.shape)
    if mode == FusionMode.VI_FIXED:
        s_kd = np.full_like(s_ad, fixed_kd_var)
    s_cross = np.broadcast_to(np.asarray(sigma_cross, dtype=float), s_ad.shape)
    if mode in (FusionMode.IVW, FusionMode.SIMPLE_ADD):
        delta = other_mean
    else:
        delta = other_mean - kd_mean
    if mode == FusionMode.SIMPLE_ADD:
        w = np.zeros_like(s_ad)
        wt = np.ones_like(s_ad)
        den = np.ones_like(s_ad)
        degenerate = np.zeros(s_ad.shape, dtype=bool)
        active = degenerate
    else:
        w, wt, den, degenerate, active = _weights(s_kd, s_ad, s_cross)
    mean = kd_mean + wt * delta
    raw_var = w * w * s_kd + wt * wt * s_ad + 2.0 * w * wt * s_cross
    floored = raw_var < VARIANCE_FLOOR
    var = np.maximum(raw_var, VARIANCE_FLOOR)
    cache = (mode, s_kd, s_ad, s_cross, delta, den, active, floored)
    return FusionResult(mean, var, w, wt, int(np.count_nonzero(degenerate)), cache)
