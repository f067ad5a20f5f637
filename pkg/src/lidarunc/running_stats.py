"""Welford-style running count, center and scatter of a point set."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geom3 import vec3


class EmptyCloudError(ValueError):
    pass


class Increment(NamedTuple):
    """What a push reveals about the new point relative to the old center.

    ``v_u = p - m_prev`` (not normalized), ``d_u = |v_u|`` and ``D = v_u v_u^T``.
    All zero for the first point of a cloud.
    """

    d_u: float
    v_u: np.ndarray
    D: np.ndarray

    @property
    def v_u_hat(self) -> np.ndarray:
        if self.d_u == 0.0:
            return np.zeros(3)
        return self.v_u / self.d_u


@dataclass(frozen=True)
class CloudStats:
    """Count ``k``, center ``m`` and un-normalized scatter ``s``."""

    k: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(3))
    s: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def covariance(self) -> np.ndarray:
        return covariance(self)


def push(stats: CloudStats, p) -> tuple[CloudStats, Increment]:
    """Add one point. Returns the new stats and the increment it caused."""
    p = vec3(p)
    if stats.k == 0:
        return CloudStats(1, p.copy(), np.zeros((3, 3))), Increment(0.0, np.zeros(3), np.zeros((3, 3)))
    k = stats.k + 1
    v_u = p - stats.m
    d = np.outer(v_u, v_u)
    m = stats.m + v_u / k
    s = stats.s + ((k - 1) / k) * d
    return CloudStats(k, m, s), Increment(float(np.sqrt(v_u @ v_u)), v_u, d)


def covariance(stats: CloudStats) -> np.ndarray:
    """Normalized covariance ``S / k``."""
    if stats.k == 0:
        raise EmptyCloudError("empty cloud")
    return stats.s / stats.k


def batch_stats(points) -> CloudStats:
    """Two-pass statistics of a whole point set."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("empty cloud")
    m = pts.mean(axis=0)
    c = pts - m
    return CloudStats(len(pts), m, c.T @ c)


def accumulate(points, stats: CloudStats | None = None) -> CloudStats:
    """Push every point of ``points`` in order."""
    stats = CloudStats() if stats is None else stats
    for p in np.asarray(points, dtype=float).reshape(-1, 3):
        stats, _ = push(stats, p)
    return stats
