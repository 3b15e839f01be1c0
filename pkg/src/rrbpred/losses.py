"""Gaussian negative log-likelihood and the winner-takes-all multimodal loss."""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_nll(mean, var, gt):
    """Diagonal Gaussian NLL summed over the trailing (step, axis) dimensions.

    Returns ``(nll, d_mean, d_var)``; ``nll`` keeps any leading batch
    dimensions.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if mean.shape != var.shape or mean.shape[-2:] != gt.shape[-2:]:
        raise ValueError("mean, variance and ground truth shapes differ")
    if np.any(var <= 0.0):
        raise ValueError("variance must be positive")
    r = gt - mean
    nll = 0.5 * (LOG_2PI + np.log(var) + r * r / var)
    d_mean = -r / var
    d_var = 0.5 * (1.0 / var - r * r / (var * var))
    return nll.sum(axis=(-2, -1)), d_mean, d_var


def closest_mode(means, gt) -> np.ndarray:
    """Index of the mode with the smallest mean per-step displacement (first on ties).

    ``means``: (..., M, T, 2), ``gt``: (..., T, 2).
    """
    means = np.asarray(means, dtype=float)
    gt = np.asarray(gt, dtype=float)[..., None, :, :]
    dist = np.linalg.norm(means - gt, axis=-1).mean(axis=-1)
    return np.argmin(dist, axis=-1)


def wta_loss(means, var, gt):
    """NLL of the closest mode only; other modes get exactly zero gradient.

    ``means``/``var``: (..., M, T, 2). Returns ``(loss, d_means, d_var, best)``.
    """
    means = np.asarray(means, dtype=float)
    var = np.asarray(var, dtype=float)
    best = closest_mode(means, gt)
    sel = np.expand_dims(best, (-1, -2, -3))
    mu = np.take_along_axis(means, sel, axis=-3)[..., 0, :, :]
    sv = np.take_along_axis(var, sel, axis=-3)[..., 0, :, :]
    loss, gm, gv = gaussian_nll(mu, sv, gt)
    d_means = np.zeros_like(means)
    d_var = np.zeros_like(var)
    np.put_along_axis(d_means, sel, gm[..., None, :, :], axis=-3)
    np.put_along_axis(d_var, sel, gv[..., None, :, :], axis=-3)
    return loss, d_means, d_var, best
