"""Real spherical harmonics and vector spherical harmonics on the unit sphere.

The scalar harmonics are orthonormal in L2(S^2).  The vector harmonics are

    U1_{k,m} = surface gradient of Y_{k,m}
    U2_{k,m} = U1_{k,m} x s

evaluated through closed forms that divide by 1 - z^2, so points within
``POLE_GUARD`` of a pole are rejected.
"""
from __future__ import annotations

from math import factorial, pi, sqrt

import numpy as np

MAX_ORDER = 12
POLE_GUARD = 1e-9


def legendre_assoc(k: int, m: int, z):
    """Associated Legendre function P_{k,m}(z) without the Condon-Shortley phase.

    Parameters
    ----------
    k, m : int
        Degree and order, ``0 <= m <= k``.
    z : float or array_like
        Argument in [-1, 1].
    """
    k, m = int(k), int(m)
    if m < 0 or m > k:
        raise ValueError(f"need 0 <= m <= k, got k={k}, m={m}")
    z = np.asarray(z, dtype=float)
    # P_{m,m} = (2m-1)!! (1-z^2)^{m/2}
    pmm = np.ones_like(z)
    if m > 0:
        s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
        fact = 1.0
        for _ in range(m):
            pmm = pmm * fact * s
            fact += 2.0
    if k == m:
        return pmm
    pm1 = z * (2 * m + 1) * pmm
    if k == m + 1:
        return pm1
    p_prev, p_cur = pmm, pm1
    for ell in range(m + 2, k + 1):
        p_prev, p_cur = p_cur, ((2 * ell - 1) * z * p_cur - (ell + m - 1) * p_prev) / (ell - m)
    return p_cur


def _norm_const(k, m):
    m = abs(m)
    return sqrt((2 * k + 1) / (4 * pi) * factorial(k - m) / factorial(k + m))


def _as_points(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != 3:
        raise ValueError(f"points must be 3-vectors, got shape {s.shape}")
    norms = np.linalg.norm(s, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError("points must lie on the unit sphere (|s| = 1 within 1e-9)")
    return s


def _check_km(k, m, kmin=0):
    if int(k) < kmin or abs(int(m)) > int(k):
        raise ValueError(f"invalid harmonic index k={k}, m={m}")


def _sph(k, m, x, y, z):
    if abs(m) > k or k < 0:
        return np.zeros_like(z)
    lon = np.arctan2(y, x)
    p = legendre_assoc(k, abs(m), z) * _norm_const(k, m)
    if m == 0:
        return p
    if m > 0:
        return sqrt(2.0) * np.cos(m * lon) * p
    return sqrt(2.0) * np.sin(m * lon) * p


def sph_harmonic(k: int, m: int, s):
    """Real spherical harmonic Y_{k,m} at unit vector(s) ``s``.

    Longitude is atan2(y, x) and the sine of latitude is z.  For ``m < 0``
    the angular factor is sqrt(2) sin(m * lon).
    """
    _check_km(k, m)
    s = _as_points(s)
    return _sph(int(k), int(m), s[..., 0], s[..., 1], s[..., 2])


def _c(k, m):
    return sqrt((2 * k + 1) * (k * k - m * m) / (2 * k - 1))


def _vsh(family, k, m, x, y, z):
    w = 1.0 - z * z
    Y = _sph(k, m, x, y, z)
    Yneg = _sph(k, -m, x, y, z)
    Yk1 = _sph(k - 1, m, x, y, z)
    c = _c(k, m)
    if family == 1:
        vx = -m * y * Yneg - c * x * z * Yk1 + k * x * z * z * Y
        vy = m * x * Yneg - c * y * z * Yk1 + k * y * z * z * Y
        vz = c * w * Yk1 - w * k * z * Y
    else:
        vx = k * z * y * Y - c * y * Yk1 + m * z * x * Yneg
        vy = -k * x * z * Y + c * x * Yk1 + m * y * z * Yneg
        vz = -m * w * Yneg
    return np.stack([vx, vy, vz], axis=-1) / w[..., None]


def vsh(family: int, k: int, m: int, s):
    """Vector spherical harmonic of the given family (1 or 2) at ``s``.

    Returns an array of shape ``s.shape`` (last axis is the 3-vector).

    Raises
    ------
    ValueError
        If ``s`` lies within ``POLE_GUARD`` of a pole, where the closed form is
        indeterminate.
    """
    if family not in (1, 2):
        raise ValueError(f"family must be 1 or 2, got {family}")
    _check_km(k, m, kmin=1)
    s = _as_points(s)
    z = s[..., 2]
    if np.any(np.abs(z) >= 1.0 - POLE_GUARD):
        raise ValueError("vector spherical harmonics are not evaluated within 1e-9 of a pole")
    return _vsh(family, int(k), int(m), s[..., 0], s[..., 1], z)


class ScalarHarmonicBasis:
    """Real spherical harmonics up to order ``k_max``.

    Columns are ordered by k ascending, then m from -k to k.  With
    ``axially_symmetric`` only the m = 0 functions are kept.
    """

    def __init__(self, k_max: int, axially_symmetric: bool = False):
        k_max = int(k_max)
        if not 0 <= k_max <= MAX_ORDER:
            raise ValueError(f"k_max must be in [0, {MAX_ORDER}], got {k_max}")
        self.k_max = k_max
        self.axially_symmetric = bool(axially_symmetric)
        if self.axially_symmetric:
            self.index = [(k, 0) for k in range(k_max + 1)]
        else:
            self.index = [(k, m) for k in range(k_max + 1) for m in range(-k, k + 1)]

    def __len__(self):
        return len(self.index)

    def __repr__(self):
        return f"ScalarHarmonicBasis(k_max={self.k_max}, axially_symmetric={self.axially_symmetric})"

    def __eq__(self, other):
        return (isinstance(other, ScalarHarmonicBasis) and self.k_max == other.k_max
                and self.axially_symmetric == other.axially_symmetric)

    def __hash__(self):
        return hash(("scalar", self.k_max, self.axially_symmetric))

    @property
    def labels(self) -> list[str]:
        return [f"k={k},m={m}" for k, m in self.index]

    def truncate(self, k_max: int) -> "ScalarHarmonicBasis":
        return ScalarHarmonicBasis(min(k_max, self.k_max), self.axially_symmetric)

    def evaluate(self, points) -> np.ndarray:
        return eval_scalar_basis(self, points)


class VectorHarmonicBasis:
    """Vector spherical harmonics of both families, orders 1..k_max.

    Columns are ordered by k, then m from -k to k, then family (1 before 2).
    """

    def __init__(self, k_max: int, axially_symmetric: bool = False):
        k_max = int(k_max)
        if not 1 <= k_max <= MAX_ORDER:
            raise ValueError(f"k_max must be in [1, {MAX_ORDER}], got {k_max}")
        self.k_max = k_max
        self.axially_symmetric = bool(axially_symmetric)
        ms = (lambda k: [0]) if self.axially_symmetric else (lambda k: range(-k, k + 1))
        self.index = [(f, k, m) for k in range(1, k_max + 1) for m in ms(k) for f in (1, 2)]

    def __len__(self):
        return len(self.index)

    def __repr__(self):
        return f"VectorHarmonicBasis(k_max={self.k_max}, axially_symmetric={self.axially_symmetric})"

    def __eq__(self, other):
        return (isinstance(other, VectorHarmonicBasis) and self.k_max == other.k_max
                and self.axially_symmetric == other.axially_symmetric)

    def __hash__(self):
        return hash(("vector", self.k_max, self.axially_symmetric))

    @property
    def labels(self) -> list[str]:
        return [f"f={f},k={k},m={m}" for f, k, m in self.index]

    def truncate(self, k_max: int) -> "VectorHarmonicBasis":
        return VectorHarmonicBasis(min(k_max, self.k_max), self.axially_symmetric)

    def evaluate(self, points) -> list[np.ndarray]:
        return eval_vector_basis(self, points)


def eval_scalar_basis(basis: ScalarHarmonicBasis, points) -> np.ndarray:
    """Dense (n_points, len(basis)) matrix of scalar harmonics."""
    s = _as_points(np.atleast_2d(points))
    x, y, z = s[:, 0], s[:, 1], s[:, 2]
    return np.column_stack([_sph(k, m, x, y, z) for k, m in basis.index])


def eval_vector_basis(basis: VectorHarmonicBasis, points) -> list[np.ndarray]:
    """Three (n_points, len(basis)) matrices, one per Cartesian component."""
    s = _as_points(np.atleast_2d(points))
    if np.any(np.abs(s[:, 2]) >= 1.0 - POLE_GUARD):
        raise ValueError("vector spherical harmonics are not evaluated within 1e-9 of a pole")
    x, y, z = s[:, 0], s[:, 1], s[:, 2]
    cols = np.stack([_vsh(f, k, m, x, y, z) for f, k, m in basis.index], axis=1)
    return [cols[:, :, c] for c in range(3)]
