"""Per-point LiDAR covariance from range, bearing, incident angle and roughness.

The covariance is split along the ray and across it::

    A_p = s_r^2 v v^T + s_phi^2 (I - v v^T) + s_o^2 I

with ``s_r^2 = sigma_d^2 + (d sigma_w tan(alpha))^2``, ``s_phi = d sigma_w``
and ``s_o = eta sin(beta)``.  :func:`s2_perturbation_covariance` builds the
range/bearing part the long way, through an explicit tangent basis on the
unit sphere, and exists to cross-check the projection form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom3 import skew, unit, vec3

DEFAULT_ALPHA_CAP = math.radians(85.0)
_HALF_PI = 0.5 * math.pi


@dataclass(frozen=True)
class SensorNoise:
    """Noise parameters. Defaults are typical spinning-LiDAR datasheet values,
    not ground truth; override them per sensor."""

    sigma_d: float = 0.02  # range std, m
    sigma_w: float = math.radians(0.05)  # bearing std, rad
    eta: float = 0.1  # roughness scale, m

    def __post_init__(self):
        for name in ("sigma_d", "sigma_w", "eta"):
            value = getattr(self, name)
            if not value >= 0.0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class RayObservation:
    """One return in the sensor frame.

    ``alpha`` is the incident angle against the surface normal and ``beta``
    the angle between two normal estimates; both are clamped to [0, pi/2].
    """

    p: np.ndarray
    d: float
    v_r: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.d > 0.0:
            raise ValueError(f"range must be positive, got {self.d}")
        v_r = vec3(self.v_r)
        if abs(math.sqrt(float(v_r @ v_r)) - 1.0) > 1e-12:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "p", vec3(self.p))
        object.__setattr__(self, "v_r", v_r)
        object.__setattr__(self, "alpha", min(max(float(self.alpha), 0.0), _HALF_PI))
        object.__setattr__(self, "beta", min(max(float(self.beta), 0.0), _HALF_PI))

    @classmethod
    def from_point(cls, p, alpha: float = 0.0, beta: float = 0.0) -> "RayObservation":
        p = vec3(p)
        d = math.sqrt(float(p @ p))
        if d == 0.0:
            raise ValueError("point coincides with the sensor origin")
        return cls(p=p, d=d, v_r=p / d, alpha=alpha, beta=beta)

    @classmethod
    def from_normals(cls, p, surface_normal, n_r=None, n_v=None) -> "RayObservation":
        """Build an observation from geometry: the incident angle comes from
        the ray and ``surface_normal``; beta from the two normal estimates
        (zero when they are not given)."""
        p = vec3(p)
        v_r = unit(p)
        c = min(abs(float(v_r @ unit(surface_normal))), 1.0)
        alpha = math.acos(c)
        beta = 0.0 if n_r is None or n_v is None else normal_disagreement(n_r, n_v)
        return cls(p=p, d=math.sqrt(float(p @ p)), v_r=v_r, alpha=alpha, beta=beta)


def normal_disagreement(n_r, n_v) -> float:
    """Angle in [0, pi/2] between two normal estimates, ignoring orientation."""
    c = abs(float(unit(n_r) @ unit(n_v)))
    return math.acos(min(c, 1.0))


def incident_sigma(d: float, sigma_w: float, alpha: float,
                   alpha_cap: float = DEFAULT_ALPHA_CAP) -> float:
    """Range std caused by the incident angle, ``d * sigma_w * tan(alpha)``.

    ``alpha`` is clamped to ``[0, alpha_cap]`` since tan diverges at grazing
    incidence.
    """
    if not d > 0.0:
        raise ValueError(f"range must be positive, got {d}")
    a = min(max(alpha, 0.0), alpha_cap)
    return d * sigma_w * math.tan(a)


def roughness_sigma(eta: float, n_r, n_v) -> float:
    """``eta * sin(beta)`` with beta the unsigned angle between the normals."""
    c = min(abs(float(unit(n_r) @ unit(n_v))), 1.0)
    return eta * math.sqrt(1.0 - c * c)


def point_covariance(obs: RayObservation, noise: SensorNoise,
                     alpha_cap: float = DEFAULT_ALPHA_CAP) -> np.ndarray:
    v = obs.v_r
    s_in = incident_sigma(obs.d, noise.sigma_w, obs.alpha, alpha_cap)
    var_r = noise.sigma_d ** 2 + s_in ** 2
    var_phi = (obs.d * noise.sigma_w) ** 2
    var_o = (noise.eta * math.sin(obs.beta)) ** 2
    vv = np.outer(v, v)
    return var_r * vv + var_phi * (np.eye(3) - vv) + var_o * np.eye(3)


def point_covariance_world(obs: RayObservation, noise: SensorNoise, rotation,
                           alpha_cap: float = DEFAULT_ALPHA_CAP) -> np.ndarray:
    """Sensor-frame covariance rotated into the world, ``R A_p R^T``."""
    r = np.asarray(rotation, dtype=float)
    a = r @ point_covariance(obs, noise, alpha_cap) @ r.T
    return 0.5 * (a + a.T)


def tangent_basis(w, angle: float = 0.0) -> np.ndarray:
    """Orthonormal ``3x2`` basis of the plane orthogonal to unit ``w``,
    rotated in-plane by ``angle``."""
    w = vec3(w)
    helper = np.eye(3)[int(np.argmin(np.abs(w)))]
    n1 = unit(np.cross(w, helper))
    n2 = np.cross(w, n1)
    c, s = math.cos(angle), math.sin(angle)
    return np.column_stack((c * n1 + s * n2, -s * n1 + c * n2))


def s2_perturbation_covariance(obs: RayObservation, noise: SensorNoise,
                               basis_seed: int = 0) -> np.ndarray:
    """Range/bearing covariance through an explicit sphere-tangent basis.

    ``J = [w, -d [w]_x N(w)]`` maps (range, 2D bearing) noise to the point;
    the in-plane orientation of ``N`` is drawn from ``basis_seed`` and must
    not change the result.  Roughness and incident angle are not included.
    """
    w = obs.v_r
    if abs(math.sqrt(float(w @ w)) - 1.0) > 1e-12:
        raise ValueError("ray direction must be a unit vector")
    angle = np.random.default_rng(basis_seed).uniform(0.0, 2.0 * math.pi)
    n = tangent_basis(w, angle)
    jac = np.column_stack((w, -obs.d * skew(w) @ n))
    sigma = np.diag([noise.sigma_d ** 2, noise.sigma_w ** 2, noise.sigma_w ** 2])
    a = jac @ sigma @ jac.T
    return 0.5 * (a + a.T)
