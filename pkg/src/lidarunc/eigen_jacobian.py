"""Jacobians of the eigenvalues and eigenvectors of a point set's covariance.

Two families live here:

* rigorous forms that touch every point::

      d lam_j / d p_i = (2/k) (p_i - m)^T v_j v_j^T
      C[m, n]         = (p_i - m)^T (v_m v_n^T + v_n v_m^T) / (k (lam_n - lam_m))
      d v_j / d p_i   = V C[:, j]

* incremental forms that update the previous Jacobians when point ``p_k``
  joins, using only ``d_u = |p_k - m_{k-1}|``, the direction of that offset and
  the eigenbases before and after the push.

Indices are 0-based: ``j = 0`` is the smallest eigenvalue (the normal).
A ``CMatrix`` is a ``(3, 3, 3)`` array ``C[m, n, :]`` of 1x3 rows.

Every incremental formula assumes ``basis_cur`` was sign-aligned to
``basis_prev`` (see :func:`lidarunc.geom3.align_sign`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom3 import EigenBasis, align_sign, eig_sym3


class GuardError(ValueError):
    """An incremental or eigenvector formula was asked to divide by ~0."""


class DegenerateSpectrumError(GuardError):
    pass


class BasisRotationError(GuardError):
    pass


@dataclass(frozen=True)
class GapGuard:
    eps_gap: float = 1e-6  # relative to the eigenvalue sum
    cos_floor: float = 0.5

    def __post_init__(self):
        if not self.eps_gap > 0.0:
            raise ValueError("eps_gap must be positive")
        if not 0.0 < self.cos_floor < 1.0:
            raise ValueError("cos_floor must be in (0, 1)")


DEFAULT_GUARD = GapGuard()


def _pairs(column):
    if column is None:
        return ((0, 1), (0, 2), (1, 2))
    return tuple((min(column, n), max(column, n)) for n in range(3) if n != column)


def check_gaps(basis: EigenBasis, guard: GapGuard = DEFAULT_GUARD, column: int | None = None):
    """Raise :class:`DegenerateSpectrumError` if a needed eigenvalue gap is
    below ``eps_gap * sum(lam)``.  With ``column`` set only the gaps that
    column of ``C`` divides by are checked."""
    lam = basis.lam
    floor = guard.eps_gap * abs(float(lam.sum()))
    for m, n in _pairs(column):
        gap = lam[n] - lam[m]
        if not (gap >= floor and gap > 0.0):
            raise DegenerateSpectrumError(
                f"degenerate spectrum; eigenvector Jacobian undefined "
                f"(lam[{m}]={lam[m]:.6g}, lam[{n}]={lam[n]:.6g})"
            )


def cos_theta(basis_prev: EigenBasis, basis_cur: EigenBasis) -> np.ndarray:
    """Cosines between matching eigenvectors before and after an update."""
    return np.einsum("ij,ij->j", basis_prev.vecs, basis_cur.vecs)


def _checked_cos(basis_prev, basis_cur, guard, which=(0, 1, 2)) -> np.ndarray:
    c = cos_theta(basis_prev, basis_cur)
    for j in which:
        if c[j] < guard.cos_floor:
            raise BasisRotationError(
                f"basis rotated too far; use rigorous path (cos theta_{j} = {c[j]:.3f})"
            )
    return c


# -- eigenvalues ---------------------------------------------------------------

def rigorous_lambda_jacobian(points, m, basis: EigenBasis, j: int, i: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    v = basis.vecs[:, j]
    return (2.0 / k) * float((pts[i] - m) @ v) * v


def rigorous_lambda_jacobians(points, m, basis: EigenBasis) -> np.ndarray:
    """All rows at once, shape ``(k, 3, 3)`` indexed ``[i, j, :]``."""
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    proj = (pts - m) @ basis.vecs  # (k, 3): (p_i - m) . v_j
    return (2.0 / k) * proj[:, :, None] * basis.vecs.T[None, :, :]


def _lambda_increment(d_u, v_u_hat, basis_prev, basis_cur, j, k, cos_j):
    v_prev = basis_prev.vecs[:, j]
    v_cur = basis_cur.vecs[:, j]
    cphi_prev = float(v_u_hat @ v_prev)
    cphi_cur = float(v_u_hat @ v_cur)
    return (d_u / (k * k * cos_j)) * (cphi_prev * v_cur + cphi_cur * v_prev)


def new_point_lambda_jacobian(d_u, v_u_hat, basis_prev, basis_cur, j, k,
                              guard: GapGuard = DEFAULT_GUARD) -> np.ndarray:
    """``d lam_{j,k} / d p_k`` from the increment alone."""
    if d_u == 0.0:
        return np.zeros(3)
    c = _checked_cos(basis_prev, basis_cur, guard, (j,))
    return (k - 1) * _lambda_increment(d_u, v_u_hat, basis_prev, basis_cur, j, k, c[j])


def incremental_lambda_jacobian_full(prev_row, d_u, v_u_hat, basis_prev, basis_cur, j, k,
                                     guard: GapGuard = DEFAULT_GUARD) -> np.ndarray:
    """Update ``d lam_j / d p_i`` (i < k) from its value at ``k - 1``."""
    scaled = ((k - 1) / k) * np.asarray(prev_row, dtype=float)
    if d_u == 0.0:
        return scaled
    c = _checked_cos(basis_prev, basis_cur, guard, (j,))
    return scaled - _lambda_increment(d_u, v_u_hat, basis_prev, basis_cur, j, k, c[j])


def incremental_lambda_jacobian_scaled(prev_row, k) -> np.ndarray:
    return ((k - 1) / k) * np.asarray(prev_row, dtype=float)


def increment_magnitude(d_u, v_u_hat, basis_prev, basis_cur, j, k,
                        guard: GapGuard = DEFAULT_GUARD) -> float:
    """Norm of the increment term shared by all old points' eigenvalue rows."""
    if d_u == 0.0:
        return 0.0
    c = _checked_cos(basis_prev, basis_cur, guard, (j,))
    inc = _lambda_increment(d_u, v_u_hat, basis_prev, basis_cur, j, k, c[j])
    return float(np.sqrt(inc @ inc))


def typical_row_norm(basis: EigenBasis, j: int, k: int) -> float:
    """RMS of the rigorous rows ``|d lam_j / d p_i|`` over a cloud of ``k``
    points, ``2 sqrt(lam_j) / k``; needs no traversal."""
    return 2.0 * float(np.sqrt(max(basis.lam[j], 0.0))) / k


def increment_ratio(d_u, v_u_hat, basis_prev, basis_cur, k,
                    guard: GapGuard = DEFAULT_GUARD) -> float:
    """Largest increment magnitude over the three eigenvalues, relative to
    the typical (already rescaled) old row.  This is the statistic the
    scaled shortcut is gated on."""
    if d_u == 0.0:
        return 0.0
    scale = typical_row_norm(basis_prev, 2, k)
    worst = 0.0
    for j in range(3):
        mag = increment_magnitude(d_u, v_u_hat, basis_prev, basis_cur, j, k, guard)
        ref = max(typical_row_norm(basis_prev, j, k), 1e-9 * scale)
        if ref == 0.0:
            ratio = 0.0 if mag == 0.0 else np.inf
        else:
            ratio = mag / ref
        worst = max(worst, ratio)
    return float(worst)


# -- eigenvectors --------------------------------------------------------------

def _entry_mask(column=None) -> np.ndarray:
    mask = ~np.eye(3, dtype=bool)
    if column is not None:
        idx = np.arange(3)
        mask &= (idx[:, None] == column) | (idx[None, :] == column)
    return mask


def _gap_matrix(lam) -> np.ndarray:
    # g[m, n] = lam_n - lam_m
    return lam[None, :] - lam[:, None]


def _sym_rows(coef, vecs) -> np.ndarray:
    # out[..., m, n, :] = coef[..., m] v_n + coef[..., n] v_m
    vt = vecs.T  # vt[n] = v_n
    return coef[..., :, None, None] * vt[None, :, :] + coef[..., None, :, None] * vt[:, None, :]


def _apply_gap(rows, gap, column):
    mask = _entry_mask(column)
    inv = np.zeros((3, 3))
    inv[mask] = 1.0 / gap[mask]
    return rows * inv[:, :, None]


def rigorous_C(points, m, basis: EigenBasis, i: int,
               guard: GapGuard = DEFAULT_GUARD) -> np.ndarray:
    check_gaps(basis, guard)
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    proj = (pts[i] - m) @ basis.vecs
    return _apply_gap(_sym_rows(proj, basis.vecs), k * _gap_matrix(basis.lam), None)


def rigorous_C_all(points, m, basis: EigenBasis, guard: GapGuard = DEFAULT_GUARD,
                   column: int | None = None) -> np.ndarray:
    """``C`` for every point, shape ``(k, 3, 3, 3)``.  With ``column`` only the
    entries in that row/column of ``C`` are filled (the rest stay zero)."""
    check_gaps(basis, guard, column)
    pts = np.asarray(points, dtype=float)
    k = len(pts)
    proj = (pts - m) @ basis.vecs
    rows = _sym_rows(proj, basis.vecs)
    return _apply_gap(rows, k * _gap_matrix(basis.lam), column)


def eigvec_jacobian(basis: EigenBasis, C: np.ndarray, j: int) -> np.ndarray:
    """``d v_j / d p`` (3x3) from a CMatrix: ``sum_m v_m C[m, j]``."""
    return basis.vecs @ C[..., :, j, :]


def c_weights(basis_prev: EigenBasis, basis_cur: EigenBasis, k: int,
              guard: GapGuard = DEFAULT_GUARD, column: int | None = None) -> np.ndarray:
    """Scale factors carrying the old ``C`` entries to step ``k``:
    ``W[m, n] = (k-1) gap_{k-1} cos(theta_m) cos(theta_n) / (k gap_k)``,
    zero on the diagonal."""
    check_gaps(basis_prev, guard, column)
    check_gaps(basis_cur, guard, column)
    c = _checked_cos(basis_prev, basis_cur, guard)
    g_prev = _gap_matrix(basis_prev.lam)
    g_cur = _gap_matrix(basis_cur.lam)
    mask = _entry_mask(column)
    w = np.zeros((3, 3))
    w[mask] = ((k - 1) * g_prev[mask] * np.outer(c, c)[mask]) / (k * g_cur[mask])
    return w


def _c_increment(d_u, v_u_hat, basis_cur, k, column=None) -> np.ndarray:
    # (cos phi_m v_n + cos phi_n v_m) / (k^2 gap_k), scaled by d_u
    cphi = v_u_hat @ basis_cur.vecs
    rows = _sym_rows(cphi, basis_cur.vecs)
    return d_u * _apply_gap(rows, (k * k) * _gap_matrix(basis_cur.lam), column)


def incremental_C_update(prev_C, d_u, v_u_hat, basis_prev, basis_cur, k,
                         guard: GapGuard = DEFAULT_GUARD) -> tuple[np.ndarray, np.ndarray]:
    """Carry an old point's CMatrix from ``k - 1`` to ``k``.  Returns ``(C_k, W)``."""
    w = c_weights(basis_prev, basis_cur, k, guard)
    c_k = w[:, :, None] * np.asarray(prev_C, dtype=float)
    if d_u != 0.0:
        c_k = c_k - _c_increment(d_u, v_u_hat, basis_cur, k)
    return c_k, w


def new_point_C(d_u, v_u_hat, basis_cur, k, guard: GapGuard = DEFAULT_GUARD,
                column: int | None = None) -> np.ndarray:
    """CMatrix of the point that was just pushed."""
    check_gaps(basis_cur, guard, column)
    if d_u == 0.0:
        return np.zeros((3, 3, 3))
    return (k - 1) * _c_increment(d_u, v_u_hat, basis_cur, k, column)


def q_weights(basis_prev: EigenBasis, basis_cur: EigenBasis, k: int, j: int = 0,
              guard: GapGuard = DEFAULT_GUARD, overlap: bool = True) -> np.ndarray:
    """Middle factor ``M`` of ``Q = V_k M V_{k-1}^T`` for eigenvector ``j``.

    The diagonal holds the ``C`` scale factors ``W[m, j]``.  With ``overlap``
    the entries between the other two eigenvectors are filled from
    ``V_k^T V_{k-1}``::

        M[m, n] = (V_k^T V_{k-1})[m, n] (k-1) gap_{k-1}[n, j] cos(theta_j) / (k gap_k[m, j])

    which reduces to ``W[m, j]`` on the diagonal.  Without it those entries
    are zero and any rotation of the eigenvectors orthogonal to ``v_j`` is
    lost at every step, a bias that accumulates when their eigenvalues are
    close.  Only ``cos(theta_j)`` is held to the rotation floor in that case.
    """
    check_gaps(basis_prev, guard, j)
    check_gaps(basis_cur, guard, j)
    if not overlap:
        return np.diag(c_weights(basis_prev, basis_cur, k, guard, column=j)[:, j])
    cos_j = _checked_cos(basis_prev, basis_cur, guard, (j,))[j]
    others = [m for m in range(3) if m != j]
    g_prev = _gap_matrix(basis_prev.lam)[others, j]
    g_cur = _gap_matrix(basis_cur.lam)[others, j]
    o = (basis_cur.vecs.T @ basis_prev.vecs)[np.ix_(others, others)]
    out = np.zeros((3, 3))
    out[np.ix_(others, others)] = o * ((k - 1) * cos_j) * g_prev[None, :] / (k * g_cur[:, None])
    return out


def q_transport(basis_prev: EigenBasis, basis_cur: EigenBasis, weights: np.ndarray) -> np.ndarray:
    """``Q = V_k M V_{k-1}^T`` so that ``J_{v_j,k} ~ Q J_{v_j,k-1}`` for old points.

    ``weights`` is the ``3x3`` middle factor from :func:`q_weights`.
    """
    return basis_cur.vecs @ np.asarray(weights, dtype=float) @ basis_prev.vecs.T


# -- finite-difference oracle --------------------------------------------------

def _perturbed_bases(points, i, c, h):
    pts = np.array(points, dtype=float)
    out = []
    for step in (h, -h):
        q = pts.copy()
        q[i, c] += step
        a = q - q.mean(axis=0)
        out.append(eig_sym3(a.T @ a / len(q)))
    return out


def fd_lambda_jacobians(points, h: float) -> np.ndarray:
    """Central differences of the eigenvalues, shape ``(k, 3, 3)`` like
    :func:`rigorous_lambda_jacobians`."""
    pts = np.asarray(points, dtype=float)
    out = np.empty((len(pts), 3, 3))
    for i in range(len(pts)):
        for c in range(3):
            plus, minus = _perturbed_bases(pts, i, c, h)
            out[i, :, c] = (plus.lam - minus.lam) / (2.0 * h)
    return out


def fd_eigvec_jacobians(points, h: float, basis: EigenBasis) -> np.ndarray:
    """Central differences of the eigenvectors, shape ``(k, 3, 3, 3)`` indexed
    ``[i, j, :, c]``.  Perturbed bases are sign-aligned to ``basis``."""
    pts = np.asarray(points, dtype=float)
    out = np.empty((len(pts), 3, 3, 3))
    for i in range(len(pts)):
        for c in range(3):
            plus, minus = (align_sign(b, basis) for b in _perturbed_bases(pts, i, c, h))
            out[i, :, :, c] = ((plus.vecs - minus.vecs) / (2.0 * h)).T
    return out


def rigorous_eigvec_jacobians(points, m, basis: EigenBasis,
                              guard: GapGuard = DEFAULT_GUARD) -> np.ndarray:
    """``d v_j / d p_i`` for every point and eigenvector, ``(k, 3, 3, 3)``."""
    C = rigorous_C_all(points, m, basis, guard)
    return np.einsum("am,imjc->ijac", basis.vecs, C)


def seeded_cloud(seed: int, k: int, min_rel_gap: float = 0.05) -> np.ndarray:
    """A ``k``-point anisotropic cloud whose eigenvalues are pairwise separated
    by at least ``min_rel_gap`` of their sum; redraws until they are."""
    if k < 3:
        raise ValueError(f"need at least 3 points, got {k}")
    rng = np.random.default_rng(seed)
    while True:
        pts = rng.normal(size=(k, 3)) * np.array([3.0, 1.5, 0.5]) + rng.uniform(-5, 5, size=3)
        a = pts - pts.mean(axis=0)
        lam = eig_sym3(a.T @ a / k).lam
        if np.min(np.diff(lam)) >= min_rel_gap * lam.sum():
            return pts


def _rel_err(analytic, numeric) -> float:
    return float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))


def gradcheck_cloud(points, h_rel: float = 1e-6,
                    guard: GapGuard = DEFAULT_GUARD) -> tuple[float, float]:
    """Relative Frobenius error of the rigorous eigenvalue and eigenvector
    Jacobians against central differences with step ``h_rel`` times the
    cloud's RMS radius.  Returns ``(err_lambda, err_vec)``."""
    pts = np.asarray(points, dtype=float)
    m = pts.mean(axis=0)
    a = pts - m
    basis = eig_sym3(a.T @ a / len(pts))
    h = h_rel * float(np.sqrt(np.mean(np.sum(a * a, axis=1))))
    err_lam = _rel_err(rigorous_lambda_jacobians(pts, m, basis), fd_lambda_jacobians(pts, h))
    err_vec = _rel_err(rigorous_eigvec_jacobians(pts, m, basis, guard),
                       fd_eigvec_jacobians(pts, h, basis))
    return err_lam, err_vec
