"""Plane-sampling simulation comparing the fast propagator with the rigorous one.

A square plane is observed by a ring of LiDARs placed on one side of it.
Every sample is a real measurement: the true surface point (plus roughness
along the normal) is seen through a noisy range and bearing, then mapped to
the world with a slightly wrong sensor pose.  Each sample carries the
world-frame point covariance both propagators consume.

All randomness comes from one ``numpy.random.Generator`` (PCG64) seeded with
``SimConfig.seed`` and drawn in a fixed order, so a seed pins the scenario.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom3 import align_sign, eig_sym3, unit
from .lufa import LufaPolicy, LufaState, Mode, TrackedCloud, lufa_step, rigorous_propagate
from .point_noise import (
    DEFAULT_ALPHA_CAP,
    RayObservation,
    SensorNoise,
    incident_sigma,
    point_covariance_world,
    tangent_basis,
)
from .running_stats import batch_stats, push


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class OutputError(OSError):
    pass


@dataclass(frozen=True)
class SimConfig:
    plane_half_extent: float = 10.0  # m, the plane is 2x this on a side
    plane_center_extent: float = 20.0  # m, plane center drawn in this cube
    n_lidars: int = 20
    points_per_lidar: int = 50
    lidar_radius: float = 100.0  # m, max sensor distance from plane center
    lidar_min_radius: float = 30.0  # m
    lidar_min_elevation: float = math.radians(15.0)  # rad above the plane
    noise: SensorNoise = field(default_factory=SensorNoise)
    alpha_cap: float = DEFAULT_ALPHA_CAP
    plane_roughness_std: float = 0.01  # m, along the normal
    pose_noise_pos_std: float = 0.02  # m
    pose_noise_rot_std: float = math.radians(0.2)  # rad
    seed: int = 0
    policy: LufaPolicy = field(default_factory=LufaPolicy)

    def __post_init__(self):
        for key in ("plane_half_extent", "n_lidars", "points_per_lidar", "lidar_radius",
                    "lidar_min_radius"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        for key in ("plane_center_extent", "plane_roughness_std", "pose_noise_pos_std",
                    "pose_noise_rot_std"):
            if not getattr(self, key) >= 0:
                raise ConfigError(key, f"must be >= 0, got {getattr(self, key)}")
        if self.lidar_min_radius > self.lidar_radius:
            raise ConfigError("lidar_min_radius", "must not exceed lidar_radius")
        if not 0.0 < self.lidar_min_elevation <= math.pi / 2:
            raise ConfigError("lidar_min_elevation", "must be in (0, pi/2]")
        if not 0.0 < self.alpha_cap < math.pi / 2:
            raise ConfigError("alpha_cap", "must be in (0, pi/2)")

    @property
    def n_points(self) -> int:
        return self.n_lidars * self.points_per_lidar

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown config key")
        try:
            if "noise" in data:
                data["noise"] = _sub(SensorNoise, data["noise"], "noise")
            if "policy" in data:
                data["policy"] = _sub(LufaPolicy, data["policy"], "policy")
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("config", str(exc)) from exc


def _sub(kind, value, prefix):
    if isinstance(value, kind):
        return value
    known = {f.name for f in dataclasses.fields(kind)}
    for key in value:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown config key")
    try:
        return kind(**value)
    except ValueError as exc:
        raise ConfigError(prefix, str(exc)) from exc


@dataclass(frozen=True)
class SimSample:
    point_world: np.ndarray
    ray_dir: np.ndarray  # world frame, unit
    range: float
    true_normal: np.ndarray
    obs: RayObservation  # sensor frame
    cov: np.ndarray  # world-frame point covariance
    lidar: int


@dataclass(frozen=True)
class ComparisonRecord:
    k: int
    a_lambda_lufa: tuple
    a_lambda_rig: tuple
    trace_n_lufa: float
    trace_n_rig: float
    trace_m_lufa: float
    trace_m_rig: float
    t_lufa_ns: int
    t_rig_ns: int
    mode: str


CSV_HEADER = (
    ["k"]
    + [f"a_lambda_lufa_{j}" for j in (1, 2, 3)]
    + [f"a_lambda_rig_{j}" for j in (1, 2, 3)]
    + ["trace_n_lufa", "trace_n_rig", "trace_m_lufa", "trace_m_rig",
       "t_lufa_ns", "t_rig_ns", "mode"]
)
TIMING_COLUMNS = ("t_lufa_ns", "t_rig_ns")


def _rotation(rotvec) -> np.ndarray:
    theta = float(np.linalg.norm(rotvec))
    if theta == 0.0:
        return np.eye(3)
    k = np.asarray(rotvec) / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _perturb_bearing(w, sigma_w, rng) -> np.ndarray:
    # rotate w by a tangent-plane angle drawn from N(0, sigma_w^2 I2)
    delta = tangent_basis(w) @ rng.normal(0.0, 1.0, size=2) * sigma_w
    if not np.any(delta):
        return w
    return _rotation(np.cross(w, delta)) @ w


def generate_scenario(cfg: SimConfig) -> list[SimSample]:
    """Draw the plane, the sensors and every sample; round-robin over sensors."""
    if cfg.n_points <= 0:
        raise ConfigError("n_lidars", "scenario has no points")
    rng = np.random.default_rng(cfg.seed)
    noise = cfg.noise
    center = rng.uniform(-cfg.plane_center_extent, cfg.plane_center_extent, size=3)
    normal = unit(rng.normal(size=3))
    t1, t2 = tangent_basis(normal).T

    per_lidar = []
    for lidar in range(cfg.n_lidars):
        sin_el = rng.uniform(math.sin(cfg.lidar_min_elevation), 1.0)
        az = rng.uniform(0.0, 2.0 * math.pi)
        r = rng.uniform(cfg.lidar_min_radius, cfg.lidar_radius)
        cos_el = math.sqrt(1.0 - sin_el * sin_el)
        direction = cos_el * (math.cos(az) * t1 + math.sin(az) * t2) + sin_el * normal
        pos = center + r * direction
        rot = _random_rotation(rng)
        # the pose the mapping side believes in
        rot_est = rot @ _rotation(rng.normal(0.0, cfg.pose_noise_rot_std, size=3))
        pos_est = pos + rng.normal(0.0, cfg.pose_noise_pos_std, size=3)

        uv = rng.uniform(-cfg.plane_half_extent, cfg.plane_half_extent,
                         size=(cfg.points_per_lidar, 2))
        rough = rng.normal(0.0, cfg.plane_roughness_std, size=cfg.points_per_lidar)
        beta_draw = np.abs(rng.normal(size=cfg.points_per_lidar))
        samples = []
        for i in range(cfg.points_per_lidar):
            surface = center + uv[i, 0] * t1 + uv[i, 1] * t2 + rough[i] * normal
            p_sensor = rot.T @ (surface - pos)
            d_true = float(np.linalg.norm(p_sensor))
            w_true = p_sensor / d_true
            alpha_true = math.acos(min(abs(float((rot @ w_true) @ normal)), 1.0))
            s_in = incident_sigma(d_true, noise.sigma_w, alpha_true, cfg.alpha_cap)
            s_r = math.sqrt(noise.sigma_d ** 2 + s_in ** 2)
            d_meas = d_true + rng.normal(0.0, 1.0) * s_r
            w_meas = unit(_perturb_bearing(w_true, noise.sigma_w, rng))
            ray_world = rot_est @ w_meas
            alpha = math.acos(min(abs(float(ray_world @ normal)), 1.0))
            # roughness angle: sin(beta) * eta reproduces a |N(0, std)| roughness sigma
            if noise.eta > 0.0:
                beta = math.asin(min(1.0, beta_draw[i] * cfg.plane_roughness_std / noise.eta))
            else:
                beta = 0.0
            obs = RayObservation(p=d_meas * w_meas, d=d_meas, v_r=w_meas, alpha=alpha, beta=beta)
            samples.append(SimSample(
                point_world=rot_est @ obs.p + pos_est,
                ray_dir=ray_world,
                range=d_meas,
                true_normal=normal,
                obs=obs,
                cov=point_covariance_world(obs, noise, rot_est, cfg.alpha_cap),
                lidar=lidar,
            ))
        per_lidar.append(samples)

    return [per_lidar[l][i] for i in range(cfg.points_per_lidar) for l in range(cfg.n_lidars)]


def plane_of(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """True plane ``(center, normal)`` of the scenario drawn from ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    center = rng.uniform(-cfg.plane_center_extent, cfg.plane_center_extent, size=3)
    return center, unit(rng.normal(size=3))


def _nan3():
    return (math.nan, math.nan, math.nan)


def run_comparison(samples, cfg: SimConfig) -> list[ComparisonRecord]:
    """Feed the samples to a scheduled cloud and an always-rigorous cloud.

    One record per push from ``n_min`` on, until the scheduled cloud freezes.
    Timings cover only the propagation work of each cloud (push and
    eigendecomposition are shared and excluded).
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    fast = TrackedCloud(policy=cfg.policy)
    ref = TrackedCloud(policy=cfg.policy, rigorous_only=True)
    records = []
    for s in samples:
        if fast.frozen:
            break
        mode = fast.add(s.point_world, s.cov)
        ref.add(s.point_world, s.cov)
        k = fast.k
        if k < cfg.policy.n_min:
            continue
        if fast.lufa is not None:
            lam_f = tuple(float(x) for x in fast.lufa.a_lambda)
            tn_f = float(np.trace(fast.lufa.a_n))
            tm_f = float(np.trace(fast.lufa.a_m))
        else:
            lam_f, tn_f, tm_f = _nan3(), math.nan, math.nan
        if ref.lufa is not None and not ref.stale:
            lam_r = tuple(float(x) for x in ref.lufa.a_lambda)
            tn_r = float(np.trace(ref.lufa.a_n))
            tm_r = float(np.trace(ref.lufa.a_m))
        else:
            lam_r, tn_r, tm_r = _nan3(), math.nan, math.nan
        records.append(ComparisonRecord(
            k, lam_f, lam_r, tn_f, tn_r, tm_f, tm_r,
            fast.last_propagation_ns, ref.last_propagation_ns, Mode(mode).value,
        ))
    return records


def record_row(r: ComparisonRecord) -> list:
    return ([r.k, *r.a_lambda_lufa, *r.a_lambda_rig, r.trace_n_lufa, r.trace_n_rig,
             r.trace_m_lufa, r.trace_m_rig, r.t_lufa_ns, r.t_rig_ns, r.mode])


def write_csv(records, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for r in records:
                writer.writerow([repr(x) if isinstance(x, float) else x for x in record_row(r)])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))


def relative_gaps(records) -> dict[str, float]:
    """Largest ``|fast - rigorous| / rigorous`` per tracked quantity."""
    out = {"trace_n": 0.0, "trace_m": 0.0, "a_lambda_1": 0.0, "a_lambda_2": 0.0, "a_lambda_3": 0.0}
    for r in records:
        pairs = [("trace_n", r.trace_n_lufa, r.trace_n_rig), ("trace_m", r.trace_m_lufa, r.trace_m_rig)]
        pairs += [(f"a_lambda_{j + 1}", r.a_lambda_lufa[j], r.a_lambda_rig[j]) for j in range(3)]
        for name, f, g in pairs:
            if g > 0.0:
                out[name] = max(out[name], abs(f - g) / g)
    return out


def _median_ns(fn, repeats: int, warmup: int = 3) -> int:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def time_propagators(samples, ks=(300, 600, 900), repeats: int = 100,
                     rigorous_only: bool = False) -> dict[int, tuple[int | None, int]]:
    """Median wall time (ns) of one fast step and one rigorous pass at each
    cloud size in ``ks``.  Returns ``{k: (lufa_ns, rigorous_ns)}``; the fast
    entry is ``None`` with ``rigorous_only``.

    The fast step is timed from the exact state at ``k - 1``, so every repeat
    does identical work.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    pts = np.array([s.point_world for s in samples])
    covs = np.array([s.cov for s in samples])
    if max(ks) > len(pts):
        raise ValueError(f"need {max(ks)} samples, have {len(pts)}")
    out = {}
    for k in ks:
        stats = batch_stats(pts[:k - 1])
        prev = eig_sym3(stats.s / stats.k)
        stats, inc = push(stats, pts[k - 1])
        cur = align_sign(eig_sym3(stats.s / stats.k), prev)
        t_rig = _median_ns(lambda: rigorous_propagate(pts[:k], covs[:k], cur), repeats)
        t_fast = None
        if not rigorous_only:
            state = LufaState(*rigorous_propagate(pts[:k - 1], covs[:k - 1], prev), prev)
            t_fast = _median_ns(lambda: lufa_step(state, inc, cur, covs[k - 1], k), repeats)
        out[k] = (t_fast, t_rig)
    return out
