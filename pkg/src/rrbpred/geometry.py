"""Polyline arc-length geometry and rigid 2D transforms."""

from __future__ import annotations

import numpy as np


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)  # in-range angles pass through bit-exact
    return w if w.ndim else float(w)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to the closed segment [a, b]."""
    points = np.asarray(points, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    t = ((points - a) @ ab) / denom
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[..., None] * ab
    return np.linalg.norm(points - foot, axis=-1)


class Polyline:
    """Ordered vertex chain parameterized by arc length.

    Arc length beyond the last vertex extends the final segment, so
    ``point_at`` and ``project`` are defined for any ``s >= 0``.
    """

    def __init__(self, vertices):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
            raise ValueError("polyline needs at least 2 vertices of shape (n, 2)")
        seg = np.diff(v, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths <= 0.0):
            raise ValueError("polyline has a zero-length segment")
        self.vertices = v
        self.segments = seg
        self.seg_lengths = lengths
        self.cum = np.concatenate([[0.0], np.cumsum(lengths)])
        self.directions = seg / lengths[:, None]
        self.vertices.flags.writeable = False

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def _segment_index(self, s: float) -> int:
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        return min(max(i, 0), len(self.seg_lengths) - 1)

    def point_at(self, s: float) -> np.ndarray:
        i = self._segment_index(s)
        return self.vertices[i] + (s - self.cum[i]) * self.directions[i]

    def tangent_at(self, s: float) -> np.ndarray:
        return self.directions[self._segment_index(s)]

    def normal_at(self, s: float) -> np.ndarray:
        t = self.tangent_at(s)
        return np.array([-t[1], t[0]])

    def project(self, p) -> tuple[float, float]:
        """Foot of the perpendicular from ``p``.

        Returns ``(s, d)`` with ``d`` signed, positive to the left of the
        direction of travel. The first segment is clamped at ``s = 0``; the
        last one extends to infinity.
        """
        p = np.asarray(p, dtype=float)
        rel = p - self.vertices[:-1]
        t = np.einsum("ij,ij->i", rel, self.segments) / self.seg_lengths**2
        t = np.clip(t, 0.0, None)
        t[:-1] = np.minimum(t[:-1], 1.0)
        foot = self.vertices[:-1] + t[:, None] * self.segments
        dist = np.linalg.norm(p - foot, axis=1)
        i = int(np.argmin(dist))
        s = float(self.cum[i] + t[i] * self.seg_lengths[i])
        side = cross2(self.directions[i], p - foot[i])
        d = float(dist[i]) if side >= 0.0 else -float(dist[i])
        return s, d

    def resample(self, s_values) -> np.ndarray:
        return np.array([self.point_at(s) for s in s_values])


def history_heading(xy) -> float:
    """Direction of the last non-degenerate history step, 0 if the track never moves."""
    xy = np.asarray(xy, dtype=float)
    for k in range(len(xy) - 1, 0, -1):
        step = xy[k] - xy[k - 1]
        if np.hypot(step[0], step[1]) > 1e-9:
            return float(wrap_angle(np.arctan2(step[1], step[0])))
    return 0.0
