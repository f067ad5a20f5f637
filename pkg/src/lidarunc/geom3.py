"""Small 3D linear-algebra layer: symmetric 3x3 matrices and their eigenbases.

Vectors are ``(3,)`` float arrays and symmetric matrices are ``(3, 3)`` arrays
that are symmetrized on the way in (:func:`sym3`).  The eigensolver is a
cyclic Jacobi iteration on plain floats: slower than LAPACK for big
matrices, but deterministic, accurate to the last few ulps on eigenvectors,
and free of dispatch overhead at this size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_PAIRS = ((0, 1), (0, 2), (1, 2))
_OTHER = {(0, 1): 2, (0, 2): 1, (1, 2): 0}
_MAX_SWEEPS = 50


def vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


def unit(v) -> np.ndarray:
    """Return ``v / |v|``; raises on the zero vector."""
    v = vec3(v)
    n = math.sqrt(float(v @ v))
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / n


def sym3(a) -> np.ndarray:
    """Symmetrize a 3x3 matrix, ``(a + a^T) / 2``."""
    a = np.asarray(a, dtype=float).reshape(3, 3)
    return 0.5 * (a + a.T)


def outer(u, v) -> np.ndarray:
    return np.outer(vec3(u), vec3(v))


def rank1_update(s, u, weight: float = 1.0) -> np.ndarray:
    """Return ``s + weight * u u^T`` (stays exactly symmetric)."""
    u = vec3(u)
    return np.asarray(s, dtype=float) + weight * np.outer(u, u)


def skew(w) -> np.ndarray:
    """Cross-product matrix: ``skew(w) @ x == cross(w, x)``."""
    x, y, z = vec3(w)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def min_eig_ratio(a) -> float:
    """Smallest eigenvalue over the trace (0 for the zero matrix).

    Used as the PSD check for covariances of any size: a covariance is
    accepted when this is >= -1e-10.
    """
    a = np.asarray(a, dtype=float)
    tr = float(np.trace(a))
    lo = float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])
    if tr <= 0.0:
        return 0.0 if lo >= 0.0 else -math.inf
    return lo / tr


def is_psd(a, rtol: float = 1e-10) -> bool:
    return min_eig_ratio(a) >= -rtol


@dataclass(frozen=True)
class EigenBasis:
    """Ascending eigenvalues ``lam`` and eigenvectors as the columns of ``vecs``.

    ``vecs[:, 0]`` belongs to the smallest eigenvalue (the plane normal for a
    planar cloud).
    """

    lam: np.ndarray
    vecs: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float).reshape(3)
        vecs = np.array(self.vecs, dtype=float).reshape(3, 3)
        lam.setflags(write=False)
        vecs.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "vecs", vecs)

    def v(self, j: int) -> np.ndarray:
        return self.vecs[:, j]

    @property
    def normal(self) -> np.ndarray:
        return self.vecs[:, 0]

    def reconstruct(self) -> np.ndarray:
        return (self.vecs * self.lam) @ self.vecs.T

    def gaps_ok(self, eps_gap: float) -> bool:
        """True when every pairwise gap is at least ``eps_gap * sum(lam)``."""
        floor = eps_gap * abs(float(self.lam.sum()))
        l0, l1, l2 = self.lam
        return min(l1 - l0, l2 - l1) >= floor and floor > 0.0


def _jacobi(a: list[list[float]]) -> tuple[list[float], list[list[float]]]:
    v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    fro2 = sum(a[i][j] * a[i][j] for i in range(3) for j in range(3))
    stop = (1e-19 * 1e-19) * fro2
    for _ in range(_MAX_SWEEPS):
        off = a[0][1] ** 2 + a[0][2] ** 2 + a[1][2] ** 2
        if off <= stop:
            break
        for p, q in _PAIRS:
            apq = a[p][q]
            if apq == 0.0:
                continue
            app, aqq = a[p][p], a[q][q]
            theta = (aqq - app) / (2.0 * apq)
            if abs(theta) > 1e150:
                t = 0.5 / theta
            else:
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            a[p][p] = app - t * apq
            a[q][q] = aqq + t * apq
            a[p][q] = a[q][p] = 0.0
            r = _OTHER[(p, q)]
            arp, arq = a[r][p], a[r][q]
            a[r][p] = a[p][r] = c * arp - s * arq
            a[r][q] = a[q][r] = s * arp + c * arq
            for row in v:
                vip, viq = row[p], row[q]
                row[p] = c * vip - s * viq
                row[q] = s * vip + c * viq
    return [a[0][0], a[1][1], a[2][2]], v


def _fix_sign(col: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive; argmax picks the first on ties
    if col[int(np.argmax(np.abs(col)))] < 0.0:
        return -col
    return col


def eig_sym3(a) -> EigenBasis:
    """Eigendecomposition of a symmetric 3x3 matrix.

    Eigenvalues come back ascending.  Each eigenvector is normalized and
    signed so its largest-magnitude component is positive.  Identical input
    gives bit-identical output.
    """
    m = sym3(a)
    work = [[float(m[i, j]) for j in range(3)] for i in range(3)]
    lam, v = _jacobi(work)
    vecs = np.array(v)
    order = sorted(range(3), key=lambda i: (lam[i], i))
    lam_sorted = np.array([lam[i] for i in order])
    cols = []
    for i in order:
        col = vecs[:, i]
        col = col / math.sqrt(float(col @ col))
        cols.append(_fix_sign(col))
    return EigenBasis(lam_sorted, np.column_stack(cols))


def align_sign(basis: EigenBasis, reference: EigenBasis) -> EigenBasis:
    """Flip eigenvectors of ``basis`` so each has a non-negative dot product
    with the matching eigenvector of ``reference``."""
    dots = np.einsum("ij,ij->j", basis.vecs, reference.vecs)
    signs = np.where(dots < 0.0, -1.0, 1.0)
    if np.all(signs > 0.0):
        return basis
    return EigenBasis(basis.lam, basis.vecs * signs)
