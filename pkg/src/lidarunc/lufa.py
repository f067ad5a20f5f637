"""Propagating point covariances into eigenvalue, normal and center covariances.

:func:`rigorous_propagate` walks every member point (``O(n)``).
:func:`lufa_step` updates the previous result when one point joins, touching
nothing but the new point and the two eigenbases (``O(1)``):

    A_lam,k = ((k-1)/k)^2 A_lam,k-1 + J_lam,new A_p J_lam,new^T
    A_n,k   = Q A_n,k-1 Q^T + J_n,new A_p J_n,new^T
    A_nm,k  = (k-1)/k Q A_nm,k-1 + J_n,new A_p / k
    A_m,k   = ((k-1)/k)^2 A_m,k-1 + A_p / k^2

That is the column-only form (``LufaPolicy(overlap_transport=False)``).  The
default also lets ``Q`` follow the rotation of the two eigenvectors orthogonal
to the normal and keeps the center-shift term shared by all old rows; both
corrections are assembled from blocks already in the state, so the step stays
constant-time.

:class:`TrackedCloud` chooses between the two on every push (warm-up,
periodic refresh, increment gate, freeze) following :func:`decide_mode`.

The joint normal/center covariance is a 6x6 array laid out as
``[[A_n, A_nm], [A_nm^T, A_m]]`` with ``A_nm = Cov(n, m)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .eigen_jacobian import (
    DEFAULT_GUARD,
    GapGuard,
    GuardError,
    check_gaps,
    eigvec_jacobian,
    increment_ratio,
    new_point_C,
    new_point_lambda_jacobian,
    q_transport,
    q_weights,
)
from .geom3 import EigenBasis, align_sign, eig_sym3, vec3
from .running_stats import CloudStats, Increment, push


class Mode(str, Enum):
    WARMUP = "warmup"
    FAST = "fast"
    RIGOROUS = "rigorous"
    FROZEN = "frozen"


@dataclass(frozen=True)
class LufaPolicy:
    """Scheduling thresholds.

    ``tau`` bounds the eigenvalue increment term relative to a typical old
    Jacobian row (see :func:`lidarunc.eigen_jacobian.increment_ratio`); a
    push above it is handled rigorously.  A rigorous refresh happens every
    ``n_ct`` pushes once the fast path is active.  ``overlap_transport``
    selects the normal update (see :func:`lufa_step`).
    """

    n_min: int = 200
    n_ct: int = 100
    n_max: int = 1000
    tau: float = 0.05
    overlap_transport: bool = True

    def __post_init__(self):
        if not 0 < self.n_min < self.n_max:
            raise ValueError(f"need 0 < n_min < n_max, got n_min={self.n_min}, n_max={self.n_max}")
        if self.n_ct < 1:
            raise ValueError(f"n_ct must be >= 1, got {self.n_ct}")
        if not self.tau >= 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


@dataclass(frozen=True)
class LufaState:
    a_lambda: np.ndarray
    a_nm: np.ndarray
    prev_basis: EigenBasis
    consecutive_fast: int = 0
    mode: Mode = Mode.RIGOROUS

    @property
    def a_n(self) -> np.ndarray:
        return self.a_nm[:3, :3]

    @property
    def a_m(self) -> np.ndarray:
        return self.a_nm[3:, 3:]

    @property
    def a_cross(self) -> np.ndarray:
        return self.a_nm[:3, 3:]


def joint(a_n, a_cross, a_m) -> np.ndarray:
    out = np.empty((6, 6))
    out[:3, :3] = a_n
    out[:3, 3:] = a_cross
    out[3:, :3] = np.asarray(a_cross).T
    out[3:, 3:] = a_m
    return 0.5 * (out + out.T)


def rigorous_propagate(points, covs, basis: EigenBasis | None = None,
                       guard: GapGuard = DEFAULT_GUARD) -> tuple[np.ndarray, np.ndarray]:
    """Sum ``J A_p J^T`` over all points. Returns ``(a_lambda, a_nm)``.

    ``basis`` defaults to a fresh decomposition of the points' covariance;
    pass the tracked (sign-aligned) basis to keep ``A_nm`` consistent with it.
    Raises :class:`~lidarunc.eigen_jacobian.DegenerateSpectrumError` when the
    normal is not separated from the other two eigenvalues.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    k = len(pts)
    if k < 3:
        raise ValueError(f"need at least 3 points, got {k}")
    if len(covs) != k:
        raise ValueError("one covariance per point is required")
    m = pts.mean(axis=0)
    a = pts - m
    if basis is None:
        basis = eig_sym3(a.T @ a / k)
    check_gaps(basis, guard, column=0)
    V = basis.vecs
    lam = basis.lam
    proj = a @ V  # (k, 3)

    vav = np.einsum("aj,kab,bj->kj", V, covs, V)
    a_lambda = (4.0 / (k * k)) * np.einsum("kj,kj->j", proj * proj, vav)

    # d n / d p_i = u_i n^T + (p_i - m).n * M with
    #   u_i = sum_m (p_i - m).v_m v_m / (k (lam_0 - lam_m)),  M = sum_m v_m v_m^T / (k (lam_0 - lam_m))
    inv_gap = 1.0 / (k * (lam[0] - lam[1:]))
    Vt = V[:, 1:]
    u = (proj[:, 1:] * inv_gap) @ Vt.T  # (k, 3)
    M = (Vt * inv_gap) @ Vt.T
    J = u[:, :, None] * V[:, 0][None, None, :] + proj[:, 0, None, None] * M[None]
    JA = np.einsum("kab,kbc->kac", J, covs)
    a_n = np.einsum("kac,kdc->ad", JA, J)
    a_cross = JA.sum(axis=0) / k
    a_m = covs.sum(axis=0) / (k * k)
    return a_lambda, joint(a_n, a_cross, a_m)


def lufa_step(state: LufaState, inc: Increment, basis_cur: EigenBasis, cov_new, k: int,
              guard: GapGuard = DEFAULT_GUARD, overlap: bool = True) -> LufaState:
    """Constant-time update after the ``k``-th point was pushed.

    ``basis_cur`` must be the decomposition at ``k`` aligned to
    ``state.prev_basis``.  Raises :class:`~lidarunc.eigen_jacobian.GuardError`
    if a gap or rotation guard fails; the caller then goes rigorous.

    With ``overlap`` the normal transport uses the full in-plane overlap
    (:func:`lidarunc.eigen_jacobian.q_weights`) and keeps the center-shift
    term of the old rows; without it both are dropped.
    """
    basis_prev = state.prev_basis
    a_p = np.asarray(cov_new, dtype=float)
    q = q_transport(basis_prev, basis_cur,
                    q_weights(basis_prev, basis_cur, k, 0, guard, overlap=overlap))
    v_hat = inc.v_u_hat
    s = (k - 1) / k

    a_lambda = s * s * state.a_lambda
    for j in range(3):
        row = new_point_lambda_jacobian(inc.d_u, v_hat, basis_prev, basis_cur, j, k, guard)
        a_lambda[j] += row @ a_p @ row

    j_n = eigvec_jacobian(basis_cur, new_point_C(inc.d_u, v_hat, basis_cur, k, guard, column=0), 0)
    j_na = j_n @ a_p
    if overlap:
        # every old row also gains -j_n / (k-1), the shift of the center;
        # its sums over old points are the tracked cross and center blocks
        shift = -j_n / (k - 1)
        x = (k - 1) * (q @ state.a_cross)
        sum_a = (k - 1) ** 2 * state.a_m
        xs = x @ shift.T
        a_n = (q @ state.a_n @ q.T + xs + xs.T + shift @ sum_a @ shift.T + j_na @ j_n.T)
        a_cross = (x + shift @ sum_a + j_na) / k
    else:
        a_n = q @ state.a_n @ q.T + j_na @ j_n.T
        a_cross = s * (q @ state.a_cross) + j_na / k
    a_m = s * s * state.a_m + a_p / (k * k)
    return LufaState(a_lambda, joint(a_n, a_cross, a_m), basis_cur,
                     state.consecutive_fast + 1, Mode.FAST)


def decide_mode(state: LufaState | None, k: int, increment_mag: float,
                policy: LufaPolicy) -> Mode:
    """Pick how the ``k``-th push is handled.

    ``increment_mag`` is the gate statistic from
    :func:`lidarunc.eigen_jacobian.increment_ratio`.  The refresh fires when
    ``n_ct - 1`` fast steps have run, so rigorous steps land exactly ``n_ct``
    pushes apart.
    """
    if state is not None and state.mode is Mode.FROZEN:
        return Mode.FROZEN
    if k < policy.n_min:
        return Mode.WARMUP
    if k >= policy.n_max:
        return Mode.FROZEN
    if state is None or state.mode is Mode.WARMUP:
        return Mode.RIGOROUS
    if increment_mag > policy.tau:
        return Mode.RIGOROUS
    if state.consecutive_fast >= policy.n_ct - 1:
        return Mode.RIGOROUS
    return Mode.FAST


def residual_variance(p, a_p, n, m, a_nm) -> float:
    """First-order variance of the point-to-plane residual ``n^T (p - m)``."""
    p, n, m = vec3(p), vec3(n), vec3(m)
    if abs(float(n @ n) - 1.0) > 1e-9:
        raise ValueError("plane normal must be a unit vector")
    a_nm = np.asarray(a_nm, dtype=float)
    r = p - m
    var = (n @ np.asarray(a_p, dtype=float) @ n
           + r @ a_nm[:3, :3] @ r
           + n @ a_nm[3:, 3:] @ n
           - 2.0 * r @ a_nm[:3, 3:] @ n)
    var = float(var)
    if var < 0.0:
        if var < -1e-12:
            raise ValueError(f"negative residual variance {var:.3g}; inputs are not PSD")
        return 0.0
    return var


@dataclass
class StepEvent:
    k: int
    mode: Mode
    reason: str


@dataclass
class TrackedCloud:
    """A growing point set with its eigenbasis and propagated covariances.

    Points and covariances are kept so a rigorous pass is always possible,
    until the cloud freezes at ``policy.n_max``.  With ``rigorous_only`` the
    cloud never takes the fast path and never freezes; it is the reference
    the fast path is compared against.
    """

    policy: LufaPolicy = field(default_factory=LufaPolicy)
    guard: GapGuard = DEFAULT_GUARD
    rigorous_only: bool = False
    stats: CloudStats = field(default_factory=CloudStats)
    basis: EigenBasis | None = None
    lufa: LufaState | None = None
    points: list = field(default_factory=list)
    covs: list = field(default_factory=list)
    events: list = field(default_factory=list)
    last_mode: Mode = Mode.WARMUP
    last_propagation_ns: int = 0
    stale: bool = False  # the last push left the covariances un-updated

    @property
    def k(self) -> int:
        return self.stats.k

    @property
    def frozen(self) -> bool:
        return self.lufa is not None and self.lufa.mode is Mode.FROZEN

    def add(self, p, cov) -> Mode:
        """Push one point with its covariance; returns how it was handled."""
        if self.frozen:
            self.last_mode = Mode.FROZEN
            self.last_propagation_ns = 0
            return Mode.FROZEN
        p = vec3(p)
        cov = np.asarray(cov, dtype=float).reshape(3, 3)
        prev_basis = self.basis
        self.stats, inc = push(self.stats, p)
        self.points.append(p)
        self.covs.append(cov)
        k = self.stats.k
        basis = eig_sym3(self.stats.s / k)
        if prev_basis is not None:
            basis = align_sign(basis, prev_basis)
        self.basis = basis

        self.stale = False
        t0 = time.perf_counter_ns()
        if self.rigorous_only:
            mode = Mode.WARMUP if k < self.policy.n_min else Mode.RIGOROUS
            if mode is Mode.RIGOROUS:
                self._rigorous(Mode.RIGOROUS, "reference")
        else:
            mode = self._scheduled(inc, prev_basis, basis, cov, k)
        self.last_propagation_ns = time.perf_counter_ns() - t0
        self.last_mode = mode
        return mode

    def _scheduled(self, inc, prev_basis, basis, cov, k) -> Mode:
        ratio = 0.0
        if self.lufa is not None and self.lufa.mode is not Mode.WARMUP and k < self.policy.n_max:
            try:
                ratio = increment_ratio(inc.d_u, inc.v_u_hat, prev_basis, basis, k, self.guard)
            except GuardError:
                ratio = np.inf
        mode = decide_mode(self.lufa, k, ratio, self.policy)
        if mode is Mode.FAST:
            try:
                self.lufa = lufa_step(self.lufa, inc, basis, cov, k, self.guard,
                                      self.policy.overlap_transport)
                return Mode.FAST
            except GuardError as exc:
                self.events.append(StepEvent(k, Mode.RIGOROUS, f"fallback: {exc}"))
                mode = Mode.RIGOROUS
        if mode is Mode.RIGOROUS:
            if self.lufa is None or self.lufa.mode is Mode.WARMUP:
                reason = "init"
            elif ratio > self.policy.tau:
                reason = "gate"
            else:
                reason = "refresh"
            self._rigorous(Mode.RIGOROUS, reason)
        elif mode is Mode.FROZEN:
            self._rigorous(Mode.FROZEN, "freeze")
            if self.frozen:
                self.points = []
                self.covs = []
        return mode

    def _rigorous(self, mode: Mode, reason: str):
        try:
            a_lambda, a_nm = rigorous_propagate(self.points, self.covs, self.basis, self.guard)
        except (GuardError, ValueError) as exc:
            # keep the previous covariances; the next push retries
            self.events.append(StepEvent(self.k, mode, f"rigorous failed: {exc}"))
            self.stale = True
            if self.lufa is not None:
                self.lufa = replace(self.lufa, prev_basis=self.basis, consecutive_fast=0,
                                    mode=Mode.FROZEN if mode is Mode.FROZEN else self.lufa.mode)
            return
        self.lufa = LufaState(a_lambda, a_nm, self.basis, 0, mode)
        self.events.append(StepEvent(self.k, mode, reason))

    def covariances(self) -> tuple[np.ndarray, np.ndarray]:
        """Current ``(a_lambda, a_nm)``; computed rigorously on demand while
        the cloud is still warming up."""
        if self.lufa is None or self.lufa.mode is Mode.WARMUP:
            return rigorous_propagate(self.points, self.covs, self.basis, self.guard)
        return self.lufa.a_lambda.copy(), self.lufa.a_nm.copy()
