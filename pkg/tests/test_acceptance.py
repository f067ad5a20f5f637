"""Acceptance checks, one group per criterion.

Each check reports through the ``criterion`` fixture, which prints a
``criterion N: PASS/FAIL`` line and repeats one line per criterion in the
terminal summary.
"""

import time

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from lidarunc.eigen_jacobian import (
    DegenerateSpectrumError,
    GuardError,
    gradcheck_cloud,
    incremental_C_update,
    incremental_lambda_jacobian_full,
    new_point_C,
    new_point_lambda_jacobian,
    rigorous_C_all,
    rigorous_lambda_jacobians,
    seeded_cloud,
)
from lidarunc.geom3 import EigenBasis, align_sign, eig_sym3, min_eig_ratio, unit
from lidarunc.lufa import LufaState, TrackedCloud, lufa_step, residual_variance, rigorous_propagate
from lidarunc.point_noise import RayObservation, SensorNoise, point_covariance, s2_perturbation_covariance
from lidarunc.running_stats import accumulate, batch_stats, push
from lidarunc.sim import SimConfig, generate_scenario, run_comparison, time_propagators

ACCURACY_TOL = 0.10
MONOTONE_JITTER = 0.01
MONOTONE_WINDOW = 20  # one round over the 20 sensors


@pytest.fixture(scope="module")
def default_run():
    cfg = SimConfig(seed=0)
    samples = generate_scenario(cfg)
    return cfg, samples, run_comparison(samples, cfg)


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b))


# 1. projection operator == sphere-tangent construction

def test_c1_projection_equals_s2(criterion):
    rng = np.random.default_rng(101)
    noise = SensorNoise(sigma_d=0.02, sigma_w=0.001, eta=0.1)
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(1000):
        p = unit(rng.normal(size=3)) * rng.uniform(0.5, 150.0)
        obs = RayObservation.from_point(p)  # alpha = beta = 0: no incident or roughness term
        worst = max(worst, _rel(point_covariance(obs, noise), s2_perturbation_covariance(obs, noise, seed)))
    elapsed = time.perf_counter() - t0
    criterion.check(1, worst < 1e-12 and elapsed < 1.0,
                    f"1000 rays, max rel err {worst:.2e} (< 1e-12), {elapsed:.2f} s (< 1 s)")


# 2. incremental statistics == batch

def test_c2_welford_matches_batch(criterion):
    rng = np.random.default_rng(102)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 1001))
        scale = rng.uniform(0.01, 10.0, size=3)
        pts = rng.normal(size=(k, 3)) * scale + rng.uniform(-100, 100, size=3)
        inc, ref = accumulate(pts), batch_stats(pts)
        assert inc.k == ref.k == k
        worst = max(worst, _rel(inc.m, ref.m))
        if np.linalg.norm(ref.s) > 0:
            worst = max(worst, _rel(inc.s, ref.s))
    elapsed = time.perf_counter() - t0
    criterion.check(2, worst < 1e-9 and elapsed < 5.0,
                    f"100 clouds, max rel err {worst:.2e} (< 1e-9), {elapsed:.2f} s (< 5 s)")


# 3. rigorous Jacobians == central finite differences

def test_c3_gradcheck(criterion):
    t0 = time.perf_counter()
    worst_lam = worst_vec = 0.0
    for k in (5, 20, 100):
        for seed in range(5):
            e_lam, e_vec = gradcheck_cloud(seeded_cloud(seed, k))
            worst_lam, worst_vec = max(worst_lam, e_lam), max(worst_vec, e_vec)
    elapsed = time.perf_counter() - t0
    criterion.check(3, worst_lam < 1e-5 and worst_vec < 1e-4 and elapsed < 30.0,
                    f"k in (5, 20, 100) x 5 seeds, eigenvalue err {worst_lam:.1e} (< 1e-5), "
                    f"eigenvector err {worst_vec:.1e} (< 1e-4), {elapsed:.1f} s")


# 4. incremental forms == rigorous forms when the basis does not move

def _symmetric_update(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    rot = q * np.sign(np.diag(r))
    scales = np.array([3.0, 1.5, 0.4])
    base = rng.normal(size=(int(rng.integers(2, 9)), 3)) * scales
    signs = np.array([[a, b, c] for a in (1, -1) for b in (1, -1) for c in (1, -1)])
    center = rng.uniform(-10, 10, size=3)
    old = (base[:, None] * signs[None]).reshape(-1, 3) @ rot.T + center
    axis = int(rng.integers(3))
    new = center + rng.uniform(0.2, 0.8) * scales[axis] * rot[:, axis]
    return old, new


_C4_WORST = []


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_c4_cancellation_property(seed):
    old, new = _symmetric_update(seed)
    stats = batch_stats(old)
    prev = eig_sym3(stats.s / stats.k)
    stats, inc = push(stats, new)
    cur = align_sign(eig_sym3(stats.s / stats.k), prev)
    # the new point must not reorder or merge two eigenvalues
    assume(np.min(np.diff(cur.lam)) > 1e-3 * cur.lam[-1])
    assume(np.einsum("ij,ij->j", cur.vecs, prev.vecs).min() > 1.0 - 1e-9)
    k = stats.k
    pts = np.vstack([old, new])
    rows_prev = rigorous_lambda_jacobians(old, old.mean(0), prev)
    rows = rigorous_lambda_jacobians(pts, stats.m, cur)
    c_prev = rigorous_C_all(old, old.mean(0), prev)
    c_cur = rigorous_C_all(pts, stats.m, cur)
    lam_scale, c_scale = np.abs(rows).max(), np.abs(c_cur).max()
    err = 0.0
    for j in range(3):
        for i in range(k - 1):
            upd = incremental_lambda_jacobian_full(rows_prev[i, j], inc.d_u, inc.v_u_hat, prev, cur, j, k)
            err = max(err, np.abs(upd - rows[i, j]).max() / lam_scale)
        nrow = new_point_lambda_jacobian(inc.d_u, inc.v_u_hat, prev, cur, j, k)
        err = max(err, np.abs(nrow - rows[k - 1, j]).max() / lam_scale)
    for i in range(k - 1):
        upd, _ = incremental_C_update(c_prev[i], inc.d_u, inc.v_u_hat, prev, cur, k)
        err = max(err, np.abs(upd - c_cur[i]).max() / c_scale)
    err = max(err, np.abs(new_point_C(inc.d_u, inc.v_u_hat, cur, k) - c_cur[k - 1]).max() / c_scale)
    _C4_WORST.append(err)
    assert err < 1e-10


def test_c4_report(criterion):
    # runs after the property test in file order
    worst = max(_C4_WORST) if _C4_WORST else float("nan")
    criterion.check(4, bool(_C4_WORST) and worst < 1e-10,
                    f"{len(_C4_WORST)} symmetric updates, max rel err {worst:.1e} (< 1e-10)")


# 5. accuracy and monotone decay in the default scenario

def _series(records, name):
    if name == "trace_n":
        return (np.array([r.trace_n_lufa for r in records]), np.array([r.trace_n_rig for r in records]))
    j = int(name[-1]) - 1
    return (np.array([r.a_lambda_lufa[j] for r in records]), np.array([r.a_lambda_rig[j] for r in records]))


def _max_gap(records, name):
    fast, rig = _series(records, name)
    gap = np.abs(fast - rig) / rig
    i = int(np.argmax(gap))
    return float(gap[i]), records[i].k


@pytest.mark.parametrize("name", ["trace_n", "lambda_1"])
def test_c5_accuracy_normal_and_smallest_eigenvalue(default_run, criterion, name):
    gap, k = _max_gap(default_run[2], name)
    criterion.check(5, gap < ACCURACY_TOL, f"{name} max gap {gap:.2%} at k={k} (< 10%)")


@pytest.mark.parametrize("name", ["lambda_2", "lambda_3"])
def test_c5_accuracy_in_plane_eigenvalues(default_run, criterion, name):
    gap, k = _max_gap(default_run[2], name)
    criterion.check(5, gap < ACCURACY_TOL, f"{name} max gap {gap:.2%} at k={k} (< 10%)")


def _moving_average(x):
    return np.convolve(x, np.ones(MONOTONE_WINDOW) / MONOTONE_WINDOW, mode="valid")


def test_c5_monotone_decay(default_run, criterion):
    worst, where = 0.0, ""
    for name in ("trace_n", "lambda_1", "lambda_2", "lambda_3"):
        for label, x in zip(("fast", "rigorous"), _series(default_run[2], name)):
            avg = _moving_average(x)
            rise = float(np.max(avg[1:] / avg[:-1]) - 1.0)
            if rise > worst:
                worst, where = rise, f"{name} {label}"
    criterion.check(5, worst <= MONOTONE_JITTER,
                    f"largest rise of a {MONOTONE_WINDOW}-push average {worst:.2%} ({where}) (<= 1%)")


# 6. constant-time fast step, linear rigorous pass, refresh every n_ct

def test_c6_timing_ratios(default_run, criterion, timing_multiplier):
    _, samples, _ = default_run
    t0 = time.perf_counter()
    times = time_propagators(samples, ks=(300, 900), repeats=100)
    elapsed = time.perf_counter() - t0
    lufa_ratio = times[900][0] / times[300][0]
    rig_ratio = times[900][1] / times[300][1]
    ok = (lufa_ratio <= 1.5 * timing_multiplier and rig_ratio >= 2.0 / timing_multiplier
          and elapsed < 60.0)
    criterion.check(6, ok, f"fast step 900/300 = {lufa_ratio:.2f} (<= 1.5), "
                           f"rigorous 900/300 = {rig_ratio:.2f} (>= 2.0), {elapsed:.1f} s")


def test_c6_refresh_spikes(default_run, criterion, timing_multiplier):
    cfg, _, records = default_run
    n_min, n_ct, n_max = cfg.policy.n_min, cfg.policy.n_ct, cfg.policy.n_max
    refresh = [r.k for r in records if r.mode == "rigorous"]
    expected = list(range(n_min, n_max, n_ct))
    fast = np.array([r.t_lufa_ns for r in records if r.mode == "fast"])
    spikes = np.array([r.t_lufa_ns for r in records if r.mode == "rigorous"])
    typical = float(np.median(fast))
    ok = (refresh == expected
          and bool(np.all(spikes > typical / timing_multiplier))
          and float(np.median(spikes)) >= 1.5 * typical / timing_multiplier)
    criterion.check(6, ok, f"rigorous steps at k={refresh[:3]}..{refresh[-1]} every {n_ct}, "
                           f"median spike {np.median(spikes) / typical:.1f}x the fast step")


# 7. Monte-Carlo oracle

def _redraw(points, chol, rng, n):
    pts = points + np.einsum("iab,nib->nia", chol, rng.standard_normal((n, len(points), 3)))
    m = pts.mean(axis=1)
    cen = pts - m[:, None]
    lam, vecs = np.linalg.eigh(np.einsum("nia,nib->nab", cen, cen) / len(points))
    return lam, vecs[:, :, 0], m


@pytest.fixture(scope="module")
def mc_plane(default_run):
    _, samples, _ = default_run
    pts = np.array([s.point_world for s in samples[:300]])
    covs = np.array([s.cov for s in samples[:300]])
    basis = eig_sym3(batch_stats(pts).covariance())
    a_lambda, a_nm = rigorous_propagate(pts, covs, basis)
    return pts, covs, basis, a_lambda, a_nm


@pytest.mark.slow
def test_c7_monte_carlo_covariances(mc_plane, criterion):
    pts, covs, basis, a_lambda, a_nm = mc_plane
    rng = np.random.default_rng(107)
    chol = np.linalg.cholesky(covs)
    lam, n, m = [], [], []
    for _ in range(10):
        l_, n_, m_ = _redraw(pts, chol, rng, 1000)
        lam.append(l_)
        n.append(n_ * np.sign(n_ @ basis.normal)[:, None])
        m.append(m_)
    lam, n, m = np.concatenate(lam), np.concatenate(n), np.concatenate(m)
    ratios = {f"lambda_{j + 1}": lam[:, j].var(ddof=1) / a_lambda[j] for j in range(3)}
    ratios["normal"] = np.trace(np.cov(n.T)) / np.trace(a_nm[:3, :3])
    ratios["center"] = np.trace(np.cov(m.T)) / np.trace(a_nm[3:, 3:])
    worst = max(abs(r - 1.0) for r in ratios.values())
    criterion.check(7, worst < 0.15, "10^4 redraws of a 300-point plane, sample/model "
                    + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items()) + " (within 15%)")


@pytest.mark.slow
def test_c7_monte_carlo_residual(mc_plane, default_run, criterion):
    pts, covs, basis, _, a_nm = mc_plane
    _, samples, _ = default_run
    m0, n0 = pts.mean(0), basis.normal
    # a fresh measured point, and a bare plane location where the
    # normal/center cross block matters most
    toward = a_nm[:3, 3:] @ n0
    toward = unit(toward - (toward @ n0) * n0)
    queries = [(samples[300].point_world, samples[300].cov), (m0 + 12.0 * toward, np.zeros((3, 3)))]
    rng = np.random.default_rng(108)
    chol = np.linalg.cholesky(covs)
    z = [[] for _ in queries]
    for _ in range(20):
        _, n, m = _redraw(pts, chol, rng, 5000)
        n *= np.sign(n @ n0)[:, None]
        for q, (p, a_p) in enumerate(queries):
            dp = rng.multivariate_normal(np.zeros(3), a_p, len(n)) if a_p.any() else 0.0
            z[q].append(np.einsum("na,na->n", n, p + dp - m))
    no_cross = a_nm.copy()
    no_cross[:3, 3:] = no_cross[3:, :3] = 0.0
    ratios, dropped = [], []
    for q, (p, a_p) in enumerate(queries):
        sample = np.concatenate(z[q]).var(ddof=1)
        ratios.append(sample / residual_variance(p, a_p, n0, m0, a_nm))
        dropped.append(sample / residual_variance(p, a_p, n0, m0, no_cross))
    ok = all(abs(r - 1.0) < 0.05 for r in ratios) and abs(dropped[1] - 1.0) > 0.05
    criterion.check(7, ok, "10^5 redraws, residual sample/model "
                    + ", ".join(f"{r:.3f}" for r in ratios)
                    + f" (within 5%); without the cross block {dropped[1]:.3f}")


# 8. PSD everywhere and clean refusal of degenerate input

def test_c8_psd_everywhere(default_run, criterion):
    cfg, samples, _ = default_run
    worst = min(min_eig_ratio(s.cov) for s in samples)
    cloud = TrackedCloud(policy=cfg.policy)
    for s in samples:
        cloud.add(s.point_world, s.cov)
        if cloud.k >= 3:
            a_lambda, a_nm = cloud.covariances()
            worst = min(worst, min_eig_ratio(a_nm), min_eig_ratio(np.diag(a_lambda)))
    rng = np.random.default_rng(109)
    for seed in range(20):
        pts = seeded_cloud(seed, 50)
        covs = np.array([(x := rng.normal(size=(3, 3)) * 0.01) @ x.T for _ in pts])
        a_lambda, a_nm = rigorous_propagate(pts, covs)
        worst = min(worst, min_eig_ratio(a_nm), min_eig_ratio(np.diag(a_lambda)))
    criterion.check(8, worst >= -1e-10, f"smallest eigenvalue/trace over all outputs {worst:.1e} (>= -1e-10)")


def test_c8_degenerate_input_refused(criterion):
    iso = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 1.0], [0, 0, -1.0]])
    covs = np.broadcast_to(1e-4 * np.eye(3), (6, 3, 3))
    refused = []
    for call in (lambda: rigorous_propagate(iso, covs),
                 lambda: rigorous_C_all(iso, iso.mean(0), eig_sym3(np.cov(iso.T))),
                 lambda: new_point_C(1.0, np.array([1.0, 0, 0]), EigenBasis([1.0, 1.0, 2.0], np.eye(3)), 7)):
        try:
            call()
            refused.append(False)
        except DegenerateSpectrumError as exc:
            refused.append("degenerate spectrum" in str(exc))
    # the fast step refuses a degenerate current basis too
    good = EigenBasis([1.0, 2.0, 3.0], np.eye(3))
    state = LufaState(np.zeros(3), np.zeros((6, 6)), good)
    _, inc = push(batch_stats(seeded_cloud(0, 10)), [1.0, 1.0, 1.0])
    try:
        lufa_step(state, inc, EigenBasis([1.0, 1.0, 3.0], np.eye(3)), np.eye(3), 11)
        refused.append(False)
    except GuardError:
        refused.append(True)
    # a tracked line never reports garbage: it keeps its last values and says so
    cloud = TrackedCloud()
    for x in range(250):
        cloud.add([float(x), 0.0, 0.0], 1e-4 * np.eye(3))
    refused.append(cloud.stale and cloud.lufa is None)
    criterion.check(8, all(refused), f"{sum(refused)}/{len(refused)} degenerate cases refused with an error")
