"""LiDAR point uncertainty and fast covariance propagation for plane features."""

from .geom3 import EigenBasis, align_sign, eig_sym3
from .lufa import LufaPolicy, LufaState, Mode, TrackedCloud, lufa_step, residual_variance, rigorous_propagate
from .point_noise import RayObservation, SensorNoise, point_covariance
from .running_stats import CloudStats, batch_stats, push

__version__ = "0.1.0"

__all__ = [
    "CloudStats",
    "EigenBasis",
    "LufaPolicy",
    "LufaState",
    "Mode",
    "RayObservation",
    "SensorNoise",
    "TrackedCloud",
    "align_sign",
    "batch_stats",
    "eig_sym3",
    "lufa_step",
    "point_covariance",
    "push",
    "residual_variance",
    "rigorous_propagate",
]
