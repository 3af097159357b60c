"""Closed-form covariances of stationary nested SPDE fields.

For constant parameters the field solving

    prod_i (kappa_i^2 - Laplacian)^{alpha_i / 2} X0 = phi W,
    X = prod_j (b_j + B_j . grad) X0

has spectral density

    S(k) = phi^2 / (2 pi)^d * prod_j (b_j^2 + (B_j . k)^2) / prod_i (kappa_i^2 + |k|^2)^{alpha_i}.

The covariance is a partial-fraction mixture of Matern covariances to which
the operators (b_j^2 - grad' B_j B_j' grad) are applied term by term.
Derivatives of a Matern term stay in the family, so the result is a finite
sum of polynomials in h times Matern-type functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb, gamma, lgamma, log, pi

import numpy as np
from scipy import integrate, special


@dataclass(frozen=True)
class MaternParams:
    """Shape ``nu``, scale ``kappa``, variance parameter ``phi2``, dimension ``d``."""
    nu: float
    kappa: float
    phi2: float = 1.0
    d: int = 2

    def __post_init__(self):
        if not (self.nu > 0 and self.kappa > 0 and self.phi2 > 0):
            raise ValueError(f"Matern parameters must be positive: {self}")
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")


@dataclass(frozen=True)
class StationarySpec:
    """Constant-parameter nested operator system.

    Parameters
    ----------
    l1 : sequence of (kappa2, alpha)
    l2 : sequence of (b, B) with B a length-d vector
    phi2 : float
    d : int
    """
    l1: tuple
    l2: tuple = ()
    phi2: float = 1.0
    d: int = 2

    def __post_init__(self):
        l1 = tuple((float(k2), _as_order(a)) for k2, a in self.l1)
        l2 = tuple((float(b), tuple(float(c) for c in np.ravel(B))) for b, B in self.l2)
        object.__setattr__(self, "l1", l1)
        object.__setattr__(self, "l2", l2)
        if not l1:
            raise ValueError("at least one L1 factor is required")
        if any(k2 <= 0 or a < 1 for k2, a in l1):
            raise ValueError("kappa^2 must be positive and alpha a positive integer")
        if any(len(B) != self.d for _, B in l2):
            raise ValueError(f"B vectors must have length d={self.d}")
        if self.phi2 <= 0:
            raise ValueError("phi2 must be positive")

    @property
    def alpha_total(self) -> int:
        return sum(a for _, a in self.l1)

    @property
    def n2(self) -> int:
        """Number of L2 factors with a nonzero derivative term."""
        return sum(any(c != 0.0 for c in B) for _, B in self.l2)


def _as_order(a) -> int:
    if float(a) != int(a):
        raise ValueError(f"alpha must be an integer, got {a}")
    return int(a)


def as_stationary(spec, d: int | None = None) -> StationarySpec:
    if isinstance(spec, StationarySpec):
        return spec
    if hasattr(spec, "stationary"):
        return spec.stationary(d)
    raise TypeError(f"cannot interpret {type(spec).__name__} as a stationary specification")


# ---------------------------------------------------------------------------
# Matern family
# ---------------------------------------------------------------------------

def _log_scale(nu, kappa, phi2, d):
    """log of 2^{1-nu} phi2 / ((4 pi)^{d/2} Gamma(nu + d/2) kappa^{2 nu})."""
    return (1 - nu) * log(2) + log(phi2) - 0.5 * d * log(4 * pi) - lgamma(nu + 0.5 * d) - 2 * nu * log(kappa)


def matern_variance(params: MaternParams) -> float:
    """C(0) = phi^2 Gamma(nu) / ((4 pi)^{d/2} Gamma(nu + d/2) kappa^{2 nu})."""
    nu, kappa, phi2, d = params.nu, params.kappa, params.phi2, params.d
    return float(np.exp(log(phi2) + lgamma(nu) - 0.5 * d * log(4 * pi) - lgamma(nu + 0.5 * d) - 2 * nu * log(kappa)))


def _xk(order, x):
    """x^order K_order(x) for x > 0 (any real order), computed in log space."""
    with np.errstate(divide="ignore", over="ignore"):
        return np.exp(order * np.log(x) + np.log(special.kve(abs(order), x)) - x)


def matern_cov_dist(params: MaternParams, r) -> np.ndarray:
    """Matern covariance as a function of distance ``r``."""
    r = np.abs(np.asarray(r, dtype=float))
    c0 = matern_variance(params)
    x = params.kappa * r
    out = np.full(x.shape, c0)
    pos = x > 0
    if np.any(pos):
        val = np.exp(_log_scale(params.nu, params.kappa, params.phi2, params.d)) * _xk(params.nu, x[pos])
        out[pos] = np.where(np.isfinite(val), val, c0)
    return out if out.ndim else float(out)


def matern_cov(params: MaternParams, h) -> np.ndarray:
    """Matern covariance at lag vector(s) ``h`` of shape (..., d)."""
    h = np.asarray(h, dtype=float)
    if h.shape[-1:] != (params.d,):
        raise ValueError(f"lags must have last dimension {params.d}, got shape {h.shape}")
    return matern_cov_dist(params, np.linalg.norm(h, axis=-1))


def matern_cov_derivative(params: MaternParams, h, i: int):
    """Partial derivative of the Matern covariance in lag component ``i``.

    Uses dC^nu/dh_i = -h_i / (2 nu + d - 2) * C^{nu-1}(h), where C^{nu-1}
    keeps kappa and phi2.  For d = 2 the factor is 1 / (2 nu).
    """
    if params.nu <= 1:
        raise ValueError(f"derivative identity needs nu > 1, got {params.nu}")
    h = np.asarray(h, dtype=float)
    lower = MaternParams(params.nu - 1, params.kappa, params.phi2, params.d)
    return -h[..., i] / (2 * params.nu + params.d - 2) * matern_cov(lower, h)


# ---------------------------------------------------------------------------
# spectral side
# ---------------------------------------------------------------------------

def spectral_density(spec, k) -> np.ndarray:
    """Spectral density of a stationary nested field at frequencies ``k`` (..., d)."""
    s = as_stationary(spec)
    k = np.asarray(k, dtype=float)
    if k.shape[-1:] != (s.d,):
        raise ValueError(f"frequencies must have last dimension {s.d}")
    k2 = np.sum(k * k, axis=-1)
    num = np.ones(k2.shape)
    for b, B in s.l2:
        num = num * (b * b + (k @ np.asarray(B)) ** 2)
    den = np.ones(k2.shape)
    for kappa2, alpha in s.l1:
        den = den * (kappa2 + k2) ** alpha
    return s.phi2 / (2 * pi) ** s.d * num / den


@dataclass(frozen=True)
class PartialFraction:
    """Terms (kappa_i, j, p_ij) with sum p_ij / (kappa_i^2 + x)^j = prod (kappa_i^2 + x)^{-alpha_i}."""
    terms: tuple

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return sum(p / (kappa * kappa + x) ** j for kappa, j, p in self.terms)


def partial_fractions(l1_factors) -> PartialFraction:
    """Partial-fraction expansion of prod_i (kappa_i^2 + x)^{-alpha_i}.

    Coefficients come from the Taylor expansion of the remaining factors
    about each pole (the cover-up method generalised to repeated poles).
    """
    factors = [(float(k2), int(a)) for k2, a in l1_factors]
    k2s = [k2 for k2, _ in factors]
    if len(set(k2s)) != len(k2s):
        raise ValueError("repeated kappa^2 across factors; merge them into one factor first")
    terms = []
    for i, (k2i, ai) in enumerate(factors):
        # series of g(u) = prod_{l != i} (delta_l + u)^{-alpha_l} up to u^{ai-1}
        series = np.zeros(ai)
        series[0] = 1.0
        for l, (k2l, al) in enumerate(factors):
            if l == i:
                continue
            delta = k2l - k2i
            coef = np.array([_binom_neg(al, t) * delta ** (-al - t) for t in range(ai)])
            series = np.convolve(series, coef)[:ai]
        kappa = float(np.sqrt(k2i))
        for j in range(1, ai + 1):
            terms.append((kappa, j, float(series[ai - j])))
    return PartialFraction(tuple(terms))


def _binom_neg(a, t):
    """Binomial coefficient C(-a, t)."""
    return (-1) ** t * comb(a + t - 1, t)


# ---------------------------------------------------------------------------
# symbolic application of (b^2 - grad' B B' grad)
# ---------------------------------------------------------------------------

def _padd(out, mono, c):
    if c != 0.0:
        v = out.get(mono, 0.0) + c
        if v == 0.0:
            out.pop(mono, None)
        else:
            out[mono] = v


def _dir_deriv(poly, B):
    out = {}
    for mono, c in poly.items():
        for k, e in enumerate(mono):
            if e and B[k]:
                m2 = list(mono)
                m2[k] -= 1
                _padd(out, tuple(m2), c * e * B[k])
    return out


def _times_linear(poly, B):
    out = {}
    for mono, c in poly.items():
        for k, bk in enumerate(B):
            if bk:
                m2 = list(mono)
                m2[k] += 1
                _padd(out, tuple(m2), c * bk)
    return out


def _scale(poly, s):
    return {m: c * s for m, c in poly.items() if c * s != 0.0}


def _merge(dst, poly):
    for m, c in poly.items():
        _padd(dst, m, c)


def expand_operators(l2, d: int) -> dict:
    """Expand prod_j (b_j^2 - grad' B_j B_j' grad) applied to F_0.

    Returns ``{m: poly}`` meaning sum_m poly_m(h) F_m(|h|), where
    dF_m/dh_i = h_i F_{m+1} and each poly maps exponent tuples to
    coefficients.
    """
    terms = {0: {(0,) * d: 1.0}}
    for b, B in l2:
        B = tuple(float(c) for c in B)
        BB = sum(c * c for c in B)
        new: dict[int, dict] = {}
        for m, P in terms.items():
            acc = new.setdefault(m, {})
            _merge(acc, _scale(P, b * b))
            # - (B' Hess P B) F_m
            _merge(acc, _scale(_dir_deriv(_dir_deriv(P, B), B), -1.0))
            acc1 = new.setdefault(m + 1, {})
            _merge(acc1, _scale(_times_linear(_dir_deriv(P, B), B), -2.0))
            _merge(acc1, _scale(P, -BB))
            acc2 = new.setdefault(m + 2, {})
            _merge(acc2, _scale(_times_linear(_times_linear(P, B), B), -1.0))
        terms = {m: P for m, P in new.items() if P}
    return terms


def _poly_eval(poly, h):
    out = np.zeros(h.shape[:-1])
    for mono, c in poly.items():
        term = np.full(h.shape[:-1], c)
        for k, e in enumerate(mono):
            if e:
                term = term * h[..., k] ** e
        out += term
    return out


def _F(m, nu, kappa, phi2, d, r):
    """F_m(r) = (-kappa^2)^m A_nu (kappa r)^{nu-m} K_{nu-m}(kappa r) for r > 0."""
    logA = _log_scale(nu, kappa, 1.0, d) + 2 * m * log(kappa)
    return phi2 * (-1.0) ** m * np.exp(logA) * _xk(nu - m, kappa * r)


# ---------------------------------------------------------------------------
# variance by spectral moments
# ---------------------------------------------------------------------------

def _angular_moment(beta, d):
    """Integral of u^beta over the unit sphere S^{d-1}."""
    if any(b % 2 for b in beta):
        return 0.0
    return 2.0 * np.prod([gamma((b + 1) / 2) for b in beta]) / gamma((sum(beta) + d) / 2)


def _radial_moment(a, l1):
    """Integral over (0, inf) of rho^{a-1} / prod (kappa_i^2 + rho^2)^{alpha_i}."""
    alpha = sum(al for _, al in l1)
    if not a < 2 * alpha:
        raise ValueError("spectral moment diverges")
    if len(l1) == 1:
        k2 = l1[0][0]
        return 0.5 * k2 ** (0.5 * a - alpha) * special.beta(0.5 * a, alpha - 0.5 * a)

    def f(rho):
        val = rho ** (a - 1)
        for k2, al in l1:
            val /= (k2 + rho * rho) ** al
        return val

    scale = float(np.sqrt(min(k2 for k2, _ in l1)))
    v1, _ = integrate.quad(f, 0.0, scale, epsabs=0, epsrel=1e-12, limit=200)
    v2, _ = integrate.quad(f, scale, np.inf, epsabs=0, epsrel=1e-12, limit=200)
    return v1 + v2


def nested_variance(spec) -> float:
    """C(0) as the integral of the spectral density, via exact moments."""
    s = as_stationary(spec)
    _check_finite_variance(s)
    num = {(0,) * s.d: 1.0}
    for b, B in s.l2:
        sq = _times_linear(_times_linear(num, B), B)
        _merge(sq, _scale(num, b * b))
        num = sq
    total = 0.0
    for beta, c in num.items():
        ang = _angular_moment(beta, s.d)
        if ang:
            total += c * ang * _radial_moment(sum(beta) + s.d, s.l1)
    return s.phi2 / (2 * pi) ** s.d * total


def _check_finite_variance(s: StationarySpec):
    if not 2 * s.alpha_total - 2 * s.n2 > s.d:
        raise ValueError(
            f"covariance is not finite: need 2*sum(alpha) - 2*n2 > d "
            f"(got 2*{s.alpha_total} - 2*{s.n2} <= {s.d})"
        )


def nested_cov(spec, h) -> np.ndarray:
    """Covariance of a stationary nested SPDE field at lags ``h`` (..., d).

    Lags of length zero return the spectral variance.
    """
    s = as_stationary(spec)
    _check_finite_variance(s)
    h = np.asarray(h, dtype=float)
    if h.shape[-1:] != (s.d,):
        raise ValueError(f"lags must have last dimension {s.d}, got shape {h.shape}")
    r = np.linalg.norm(h, axis=-1)
    out = np.empty(r.shape)
    zero = r == 0
    if np.any(zero):
        out[zero] = nested_variance(s)
    pos = ~zero
    if np.any(pos):
        hp, rp = h[pos], r[pos]
        expansion = expand_operators(s.l2, s.d)
        acc = np.zeros(rp.shape)
        for kappa, j, p in partial_fractions(s.l1).terms:
            if p == 0.0:
                continue
            nu = j - 0.5 * s.d
            for m, poly in expansion.items():
                acc += p * _poly_eval(poly, hp) * _F(m, nu, kappa, s.phi2, s.d, rp)
        out[pos] = acc
    return out if out.ndim else float(out)


def cov_x0(l1_factors, phi2: float, h, d: int = 2) -> np.ndarray:
    """Covariance of the L1-only field X0: a partial-fraction Matern mixture."""
    return nested_cov(StationarySpec(tuple(l1_factors), (), phi2, d), h)


def gamma_matern(k: int, nu: float, kappa: float, r, phi2: float = 1.0) -> np.ndarray:
    """gamma_k C^{nu-k}(r) in the plane, with gamma_k = 1 / (2^k prod_{i<k} (nu - i)).

    Written as one closed form so it stays finite when nu - k <= 0.
    """
    r = np.asarray(r, dtype=float)
    logA = _log_scale(nu, kappa, 1.0, 2) + 2 * k * log(kappa)
    return phi2 * np.exp(logA) * _xk(nu - k, kappa * r)


# ---------------------------------------------------------------------------
# FFT oracle
# ---------------------------------------------------------------------------

def cov_fft_oracle(spec, grid_size: int, extent: float):
    """Covariance on a lag grid by inverse FFT of the spectral density (d = 2).

    Parameters
    ----------
    spec : stationary specification
    grid_size : int
        Number of frequencies per axis.
    extent : float
        Side length of the periodic lag domain; must exceed 8 / min kappa.

    Returns
    -------
    lags : (M,) array
        Lag coordinates, symmetric about 0 (M odd).
    grid : (M, M) array
        ``grid[i, j]`` is the covariance at ``(lags[i], lags[j])``.
    """
    s = as_stationary(spec)
    if s.d != 2:
        raise ValueError("the FFT oracle is implemented for d = 2 only")
    kmin = min(np.sqrt(k2) for k2, _ in s.l1)
    if not extent > 8.0 / kmin:
        raise ValueError(f"extent {extent} too small: must exceed 8/min(kappa) = {8.0 / kmin:.4g}")
    n = int(grid_size)
    dx = extent / n
    freqs = 2 * pi * np.fft.fftfreq(n, d=dx)
    K1, K2 = np.meshgrid(freqs, freqs, indexing="ij")
    S = spectral_density(s, np.stack([K1, K2], axis=-1))
    dk = 2 * pi / extent
    C = np.real(np.fft.ifft2(S)) * n * n * dk * dk
    C = np.fft.fftshift(C)
    lags = (np.arange(n) - n // 2) * dx
    if n % 2 == 0:
        C, lags = C[1:, 1:], lags[1:]
    C = 0.5 * (C + C[::-1, ::-1])
    return lags, C
