"""Likelihood-based estimation and kriging for nested SPDE models.

Observation model::

    Y = M mu + Phi H w0 + eps,   w0 ~ N(0, Q^{-1}),  eps ~ N(0, sigma2 I),
    mu ~ N(m_mu, Q_mu^{-1})

With Lambda = Phi H both w0 and mu are integrated out analytically, so only
the covariance parameters psi are optimised numerically.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .cholesky import CholeskyFactor, cholesky, logdet_diff
from .mesh import TriangularMesh, evaluate_basis
from .optimize import bfgs_maximize, hessian_covariance
from .spde import (CONSTANT, LOGLINEAR, VECTORLINEAR, DiscretizedModel, L2Factor,
                   OperatorSystemSpec, ParamField, discretize, fem_for)

log = logging.getLogger(__name__)

DEFAULT_TREND_PRECISION = 1e-8
LOG_2PI = math.log(2 * math.pi)


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

class ObservationSet:
    """Observed values at mesh-compatible locations.

    Parameters
    ----------
    locations : (N, 2) planar coordinates or (N, 3) unit vectors
    values : (N,) array
    """

    def __init__(self, locations, values):
        values = np.asarray(values, dtype=float).ravel()
        locations = np.asarray(locations, dtype=float)
        if locations.ndim != 2 or len(locations) != len(values):
            if len(values) == 0:
                locations = locations.reshape(0, locations.shape[-1] if locations.ndim == 2 else 2)
            else:
                raise ValueError(f"locations {locations.shape} and values {values.shape} do not match")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(locations))):
            raise ValueError("observations contain non-finite values")
        self.locations = locations
        self.values = values
        self._phi_cache: dict = {}

    def __len__(self):
        return len(self.values)

    @property
    def n(self) -> int:
        return len(self.values)

    def basis_matrix(self, mesh: TriangularMesh) -> sp.csr_matrix:
        """Basis functions evaluated at the observation locations (cached per mesh)."""
        hit = self._phi_cache.get(id(mesh))
        if hit is not None and hit[0] is mesh:
            return hit[1]
        if self.n == 0:
            Phi = sp.csr_matrix((0, mesh.n_vertices))
        else:
            Phi = evaluate_basis(mesh, self.locations)
        self._phi_cache[id(mesh)] = (mesh, Phi)
        return Phi


class TrendModel:
    """Mean model M mu with a Gaussian prior on mu.

    Parameters
    ----------
    basis : None or object with ``evaluate(points)`` and ``__len__``
        ``None`` gives a single constant column.
    prior_mean : array_like, optional
        Defaults to zeros.
    prior_precision : array_like, optional
        Defaults to 1e-8 times the identity.
    """

    def __init__(self, basis=None, prior_mean=None, prior_precision=None):
        self.basis = basis
        p = 1 if basis is None else len(basis)
        self.prior_mean = np.zeros(p) if prior_mean is None else np.asarray(prior_mean, dtype=float).reshape(p)
        if prior_precision is None:
            Qm = DEFAULT_TREND_PRECISION * np.eye(p)
        else:
            Qm = np.asarray(prior_precision, dtype=float)
            Qm = np.diag(np.full(p, float(Qm))) if Qm.ndim == 0 else Qm.reshape(p, p)
        if not np.allclose(Qm, Qm.T):
            raise ValueError("trend prior precision must be symmetric")
        if np.any(np.linalg.eigvalsh(Qm) < 0):
            raise ValueError("trend prior precision must be positive semidefinite")
        self.prior_precision = Qm

    @property
    def n_coef(self) -> int:
        return len(self.prior_mean)

    @property
    def labels(self) -> list[str]:
        if self.basis is None:
            return ["mu"]
        names = getattr(self.basis, "labels", None) or [str(i) for i in range(self.n_coef)]
        return [f"mu[{s}]" for s in names]

    def design(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.basis is None:
            return np.ones((len(points), 1))
        if len(points) == 0:
            return np.zeros((0, self.n_coef))
        return np.asarray(self.basis.evaluate(points), dtype=float)


# ---------------------------------------------------------------------------
# parameter packing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Entry:
    name: str
    section: str      # "l1" or "l2"
    factor: int
    attr: str         # "kappa2", "b" or "B"
    index: int        # coefficient / component index, -1 for a scalar constant
    log: bool


def _labels(field_: ParamField):
    labels = getattr(field_.basis, "labels", None)
    return labels if labels is not None else [str(i) for i in range(field_.size)]


class ParameterMap:
    """Packing between the free parameters of an operator template and psi.

    psi[0] is log sigma2; then, factor by factor, the free entries of
    kappa^2 (log scale for constants, plain log-linear coefficients),
    b (likewise) and B (plain).
    """

    def __init__(self, template: OperatorSystemSpec):
        self.template = template
        entries = [_Entry("log_sigma2", "", -1, "", -1, True)]
        for i, f in enumerate(template.l1):
            entries += self._entries(f.kappa2, "l1", i, "kappa2", "log_kappa2")
        for i, f in enumerate(template.l2):
            entries += self._entries(f.b, "l2", i, "b", "log_b")
            if f.B is not None:
                entries += self._entries(f.B, "l2", i, "B", "B")
        self.entries = entries
        self.names = [e.name for e in entries]

    @staticmethod
    def _entries(field_: ParamField, section, i, attr, stem):
        if not field_.free:
            return []
        prefix = f"{section}[{i}].{stem}"
        if field_.kind == CONSTANT:
            if isinstance(field_.value, float):
                return [_Entry(prefix, section, i, attr, -1, attr != "B")]
            return [_Entry(f"{prefix}[{j}]", section, i, attr, j, False) for j in range(field_.size)]
        return [_Entry(f"{prefix}[{lab}]", section, i, attr, j, False) for j, lab in enumerate(_labels(field_))]

    def __len__(self):
        return len(self.entries)

    def _field(self, spec, e):
        factor = (spec.l1 if e.section == "l1" else spec.l2)[e.factor]
        return getattr(factor, e.attr)

    def pack(self, spec: OperatorSystemSpec, sigma2: float) -> np.ndarray:
        psi = np.empty(len(self.entries))
        psi[0] = math.log(sigma2)
        for k, e in enumerate(self.entries[1:], start=1):
            f = self._field(spec, e)
            if f.kind == CONSTANT:
                v = f.value if e.index < 0 else f.value[e.index]
            else:
                v = f.coefficients[e.index]
            psi[k] = math.log(v) if e.log else v
        return psi

    def unpack(self, psi) -> tuple[OperatorSystemSpec, float]:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (len(self.entries),):
            raise ValueError(f"expected {len(self.entries)} parameters, got {psi.shape}")
        updates: dict[tuple, dict] = {}
        for k, e in enumerate(self.entries[1:], start=1):
            v = math.exp(psi[k]) if e.log else float(psi[k])
            updates.setdefault((e.section, e.factor, e.attr), {})[e.index] = v
        l1 = list(self.template.l1)
        l2 = list(self.template.l2)
        for (section, i, attr), vals in updates.items():
            target = l1 if section == "l1" else l2
            factor = target[i]
            f = getattr(factor, attr)
            if f.kind == CONSTANT and isinstance(f.value, float):
                new = f.with_coefficients([vals[-1]])
            else:
                cur = list(f.value) if f.kind == CONSTANT else list(f.coefficients)
                for j, v in vals.items():
                    cur[j] = v
                new = f.with_coefficients(cur)
            target[i] = replace(factor, **{attr: new})
        return replace(self.template, l1=tuple(l1), l2=tuple(l2)), math.exp(psi[0])

    def as_dict(self, psi) -> dict:
        return dict(zip(self.names, map(float, psi)))


# ---------------------------------------------------------------------------
# posterior quantities
# ---------------------------------------------------------------------------

@dataclass
class CanonicalPosterior:
    """Canonical-form posterior pieces at fixed psi.

    ``b`` is evaluated at ``mu_hat``.  ``Q_hat_factor`` and ``Q_factor``
    are sparse Cholesky factors of Q_hat and Q.
    """
    b: np.ndarray
    Q_hat: sp.csr_matrix
    b_mu: np.ndarray
    Q_mu_hat: np.ndarray
    mu_hat: np.ndarray
    sigma2: float
    log_likelihood: float
    Q_hat_factor: CholeskyFactor
    Q_factor: CholeskyFactor
    Lambda: sp.csr_matrix
    U: np.ndarray          # Q_hat^{-1} Lambda^T M
    model: DiscretizedModel


def _prepare(model: DiscretizedModel, trend: TrendModel, obs: ObservationSet):
    Phi = obs.basis_matrix(model.mesh)
    M = trend.design(obs.locations)
    return Phi, M, obs.values


def _posterior(model, Phi, M, Y, sigma2, m_mu, Q_mu) -> CanonicalPosterior:
    N = len(Y)
    Lam = sp.csr_matrix(Phi @ model.H)
    Q = model.Q
    Q_hat = sp.csr_matrix(Q + (Lam.T @ Lam) / sigma2)
    Q_hat.sort_indices()
    F = model.factor
    Fh = cholesky(Q_hat)
    LtY = Lam.T @ Y
    LtM = np.asarray(Lam.T @ M)
    u = Fh.solve_L(LtY)
    V = Fh.solve_L(LtM).reshape(LtY.shape[0], -1)
    s2, s4 = sigma2, sigma2 * sigma2
    Q_mu_hat = Q_mu + M.T @ M / s2 - V.T @ V / s4
    Q_mu_hat = 0.5 * (Q_mu_hat + Q_mu_hat.T)
    b_mu = Q_mu @ m_mu + M.T @ Y / s2 - V.T @ u / s4
    cf = sla.cho_factor(Q_mu_hat, lower=True)
    mu_hat = sla.cho_solve(cf, b_mu)
    logdet_mu_hat = 2.0 * np.sum(np.log(np.diag(cf[0])))
    if Q_mu.size:
        sign, logdet_mu = np.linalg.slogdet(Q_mu)
        if sign <= 0:
            raise np.linalg.LinAlgError("trend prior precision must be positive definite")
    else:
        logdet_mu = 0.0
    ll = (
        -0.5 * N * LOG_2PI
        + 0.5 * logdet_diff(F, Fh)
        - 0.5 * N * math.log(sigma2)
        + 0.5 * logdet_mu - 0.5 * logdet_mu_hat
        - 0.5 * (Y @ Y) / s2
        + 0.5 * (u @ u) / s4
        + 0.5 * b_mu @ mu_hat
        - 0.5 * m_mu @ Q_mu @ m_mu
    )
    b = Lam.T @ (Y - M @ mu_hat) / s2
    U = Fh.solve(LtM).reshape(LtY.shape[0], -1)
    return CanonicalPosterior(b, Q_hat, b_mu, Q_mu_hat, mu_hat, sigma2, float(ll), Fh, F, Lam, U, model)


def posterior_canonical(model: DiscretizedModel, trend: TrendModel, obs: ObservationSet,
                        sigma2: float) -> CanonicalPosterior:
    """Canonical parameters (b, Q_hat) of w0 | mu, psi, Y and (b_mu, Q_mu_hat) of mu | psi, Y.

    Raises
    ------
    numpy.linalg.LinAlgError
        If Q or Q_hat is not positive definite.
    """
    Phi, M, Y = _prepare(model, trend, obs)
    return _posterior(model, Phi, M, Y, float(sigma2), trend.prior_mean, trend.prior_precision)


def log_marginal_posterior(model: DiscretizedModel, trend: TrendModel, obs: ObservationSet,
                           sigma2: float, log_prior: float = 0.0) -> float:
    """log p(Y | psi) + log prior(psi), with w0 and mu integrated out.

    The value is the exact Gaussian log marginal likelihood (all constants
    kept).  Factorisation failures return ``-inf``.
    """
    try:
        return posterior_canonical(model, trend, obs, sigma2).log_likelihood + log_prior
    except np.linalg.LinAlgError as exc:
        log.debug("log marginal posterior rejected: %s", exc)
        return -math.inf


class MarginalPosterior:
    """log pi(psi | Y) as a function of the packed vector psi.

    Parameters
    ----------
    mesh, template, trend, obs
    prior : dict, optional
        ``{name: (mean, sd)}`` independent Gaussian priors on packed
        coordinates; unlisted coordinates have a flat prior.
    """

    def __init__(self, mesh, template: OperatorSystemSpec, trend: TrendModel, obs: ObservationSet, prior=None):
        self.mesh = mesh
        self.fem = fem_for(mesh)
        self.params = ParameterMap(template)
        self.trend = trend
        self.obs = obs
        self.prior = dict(prior or {})
        unknown = set(self.prior) - set(self.params.names)
        if unknown:
            raise ValueError(f"prior given for unknown parameters: {sorted(unknown)}")
        self._Phi = obs.basis_matrix(mesh)
        self._M = trend.design(obs.locations)
        self._Y = obs.values

    def log_prior(self, psi) -> float:
        total = 0.0
        for k, name in enumerate(self.params.names):
            if name in self.prior:
                m, sd = self.prior[name]
                total += -0.5 * ((psi[k] - m) / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
        return total

    def posterior(self, psi) -> CanonicalPosterior:
        spec, sigma2 = self.params.unpack(psi)
        model = discretize(self.mesh, spec, self.fem)
        return _posterior(model, self._Phi, self._M, self._Y, sigma2,
                          self.trend.prior_mean, self.trend.prior_precision)

    def __call__(self, psi) -> float:
        psi = np.asarray(psi, dtype=float)
        if not np.all(np.isfinite(psi)) or np.max(np.abs(psi)) > 700:
            return -math.inf
        try:
            post = self.posterior(psi)
        except (np.linalg.LinAlgError, ValueError) as exc:
            log.debug("objective rejected psi: %s", exc)
            return -math.inf
        value = post.log_likelihood + self.log_prior(psi)
        return value if np.isfinite(value) else -math.inf


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FitOptions:
    """Optimiser and staging settings.

    Attributes
    ----------
    max_iter, gtol, ftol : BFGS controls
    fd_step : central-difference step on the packed scale
    staged : fit increasing basis orders in turn, warm-starting each stage
    init : dict of packed-parameter starting values by name
    sigma2_init : starting noise variance (default half the data variance)
    auto_scale : choose the starting constant level of the first b so that
        the field variance is about half the data variance
    prior : dict of Gaussian priors by name
    """
    max_iter: int = 2000
    gtol: float = 1e-5
    ftol: float = 1e-9
    fd_step: float = 1e-4
    staged: bool = True
    init: Optional[dict] = None
    sigma2_init: Optional[float] = None
    auto_scale: bool = True
    prior: Optional[dict] = None


@dataclass
class StageResult:
    stage: int
    names: list
    psi: np.ndarray
    log_posterior: float
    n_iter: int
    converged: bool


@dataclass
class FittedModel:
    """Result of :func:`fit`.

    ``log_likelihood`` is the maximised log marginal posterior (equal to
    the log marginal likelihood under the default flat prior).
    """
    spec: OperatorSystemSpec
    template: OperatorSystemSpec
    names: list
    psi: np.ndarray
    sigma2: float
    mu: np.ndarray
    mu_names: list
    log_likelihood: float
    n_obs: int
    converged: bool
    n_iter: int
    mesh: TriangularMesh
    trend: TrendModel
    obs: ObservationSet
    posterior: CanonicalPosterior
    stages: list = field(default_factory=list)
    message: str = ""

    @property
    def n_params(self) -> int:
        return len(self.psi) + len(self.mu)

    @property
    def aic(self) -> float:
        return 2 * self.n_params - 2 * self.log_likelihood

    @property
    def bic(self) -> float:
        return self.n_params * math.log(max(self.n_obs, 1)) - 2 * self.log_likelihood

    @property
    def params(self) -> dict:
        return dict(zip(self.names, map(float, self.psi)))

    def objective(self, prior=None) -> MarginalPosterior:
        return MarginalPosterior(self.mesh, self.template, self.trend, self.obs, prior)

    def predict(self, points, return_components: bool = False):
        return kriging(self, points, return_components)


def _truncated_field(f: ParamField, order: int):
    """Copy of ``f`` with its basis truncated to ``order`` (None drops a vector field)."""
    if f is None or f.kind == CONSTANT or not hasattr(f.basis, "truncate"):
        return f
    if f.kind == VECTORLINEAR and order < 1:
        return None
    basis = f.basis.truncate(order)
    old = dict(zip(_labels(f), f.coefficients))
    coefs = [old.get(lab, 0.0) for lab in getattr(basis, "labels", [])] or [0.0] * len(basis)
    return replace(f, basis=basis, coefficients=tuple(coefs))


def _field_order(f):
    if f is None or f.kind == CONSTANT or not hasattr(f.basis, "truncate"):
        return 0
    return int(getattr(f.basis, "k_max", 0))


def stage_template(template: OperatorSystemSpec, stage: int) -> OperatorSystemSpec:
    """Restriction of ``template`` with all bases truncated to order ``stage``.

    Stage 0 is the stationary restriction: scalar fields keep only their
    order-0 term and vector fields are dropped.
    """
    l1 = tuple(replace(f, kappa2=_truncated_field(f.kappa2, stage)) for f in template.l1)
    l2 = tuple(replace(f, b=_truncated_field(f.b, stage), B=_truncated_field(f.B, stage)) for f in template.l2)
    return replace(template, l1=l1, l2=l2)


def n_stages(template: OperatorSystemSpec) -> int:
    orders = [_field_order(f.kappa2) for f in template.l1]
    orders += [max(_field_order(f.b), _field_order(f.B)) for f in template.l2]
    return max(orders, default=0) + 1


def _auto_start(template, obs, options, params: ParameterMap, psi):
    var_y = float(np.var(obs.values)) if obs.n > 1 else 1.0
    var_y = var_y if var_y > 0 else 1.0
    psi[0] = math.log(options.sigma2_init if options.sigma2_init else 0.5 * var_y)
    if not options.auto_scale or not template.l2 or not template.l2[0].b.free:
        return psi
    f0 = template.l1[0].kappa2
    if f0.kind == CONSTANT:
        kappa2 = f0.value
    else:
        kappa2 = float(np.mean(np.exp(np.asarray(f0.coefficients)[:1] / math.sqrt(4 * math.pi))))
    nu = max(template.alpha_total - 1, 1)
    unit_var = template.phi ** 2 / (4 * math.pi * nu * kappa2 ** nu)
    log_b = 0.5 * math.log(0.5 * var_y / unit_var)
    for k, e in enumerate(params.entries):
        if e.section == "l2" and e.factor == 0 and e.attr == "b":
            if e.index < 0:
                psi[k] = log_b
            elif params.names[k].endswith("[k=0,m=0]") or e.index == 0:
                psi[k] = log_b * math.sqrt(4 * math.pi)
            break
    return psi


def fit(mesh: TriangularMesh, template: OperatorSystemSpec, trend: TrendModel, obs: ObservationSet,
        options: Optional[FitOptions] = None, warm_start: Optional[dict] = None) -> FittedModel:
    """Maximise the log marginal posterior over the free parameters of ``template``.

    With ``options.staged`` the bases are grown one order at a time: stage 0
    is the stationary restriction, and each later stage starts new
    coefficients at their template values (zero by default) and carries the
    previous estimates over by name.

    Parameters
    ----------
    warm_start : dict, optional
        Packed values by name (for example the ``params`` of a smaller fitted
        model); applied at every stage where the name exists.
    """
    options = options or FitOptions()
    total = n_stages(template)
    stages = range(total) if options.staged else [total - 1]
    carry: dict = {}
    history = []
    objective = None
    result = None
    for s in stages:
        stage_spec = stage_template(template, s) if s < total - 1 else template
        objective = MarginalPosterior(mesh, stage_spec, trend, obs, options.prior)
        params = objective.params
        psi0 = params.pack(stage_spec, 1.0)
        if not carry:
            psi0 = _auto_start(stage_spec, obs, options, params, psi0)
        for src in (warm_start or {}, options.init or {}, carry):
            for k, name in enumerate(params.names):
                if name in src:
                    psi0[k] = src[name]
        if not np.isfinite(objective(psi0)):
            raise np.linalg.LinAlgError(f"objective is not finite at the starting values of stage {s}")
        result = bfgs_maximize(objective, psi0, gtol=options.gtol, ftol=options.ftol,
                               max_iter=options.max_iter, step=options.fd_step)
        carry = params.as_dict(result.x)
        history.append(StageResult(s, list(params.names), result.x.copy(), result.fun, result.n_iter, result.converged))
        log.info("stage %d: log posterior %.10g after %d iterations (%s)", s, result.fun, result.n_iter, result.message)
    post = objective.posterior(result.x)
    spec, sigma2 = objective.params.unpack(result.x)
    return FittedModel(
        spec=spec, template=template, names=list(objective.params.names), psi=result.x, sigma2=sigma2,
        mu=post.mu_hat, mu_names=trend.labels, log_likelihood=result.fun, n_obs=obs.n,
        converged=result.converged, n_iter=sum(h.n_iter for h in history), mesh=mesh, trend=trend,
        obs=obs, posterior=post, stages=history, message=result.message,
    )


def fitted_at(mesh: TriangularMesh, template: OperatorSystemSpec, trend: TrendModel, obs: ObservationSet,
              psi, prior=None, converged: bool = True) -> FittedModel:
    """FittedModel at given packed parameters without optimising (for
    example values read back from a parameter file)."""
    objective = MarginalPosterior(mesh, template, trend, obs, prior)
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (len(objective.params),):
        raise ValueError(f"expected {len(objective.params)} packed parameters, got {psi.size}")
    value = objective(psi)
    if not np.isfinite(value):
        raise np.linalg.LinAlgError("log marginal posterior is not finite at the given parameters")
    post = objective.posterior(psi)
    spec, sigma2 = objective.params.unpack(psi)
    return FittedModel(
        spec=spec, template=template, names=list(objective.params.names), psi=psi, sigma2=sigma2,
        mu=post.mu_hat, mu_names=trend.labels, log_likelihood=value, n_obs=obs.n, converged=converged,
        n_iter=0, mesh=mesh, trend=trend, obs=obs, posterior=post,
    )


def information_criteria(fitted: FittedModel) -> tuple[float, float]:
    """(AIC, BIC) with p = dim psi + dim mu."""
    return fitted.aic, fitted.bic


# ---------------------------------------------------------------------------
# prediction and uncertainty
# ---------------------------------------------------------------------------

def _kriging(post: CanonicalPosterior, trend: TrendModel, mesh, points, chunk=256):
    points = np.asarray(points, dtype=float)
    Phi_q = evaluate_basis(mesh, points) if len(points) else sp.csr_matrix((0, mesh.n_vertices))
    M_q = trend.design(points)
    A = sp.csr_matrix(Phi_q @ post.model.H)
    Fh = post.Q_hat_factor
    mean = M_q @ post.mu_hat + A @ Fh.solve(post.b)
    field_var = np.empty(len(points))
    At = A.T.tocsc()
    for start in range(0, len(points), chunk):
        block = At[:, start:start + chunk].toarray()
        field_var[start:start + chunk] = np.sum(Fh.solve_L(block).reshape(block.shape) ** 2, axis=0)
    g = M_q - A @ post.U / post.sigma2
    cf = sla.cho_factor(post.Q_mu_hat, lower=True)
    trend_var = np.sum(g * sla.cho_solve(cf, g.T).T, axis=1)
    return mean, field_var, trend_var


def kriging(fitted: FittedModel, query_points, return_components: bool = False):
    """Posterior mean and standard deviation of the latent field at ``query_points``.

    The variance combines the field part a' Q_hat^{-1} a with the trend
    uncertainty from the joint (w0, mu) posterior.

    Returns
    -------
    mean, sd : arrays
    components : dict, only with ``return_components``
        ``field_var`` and ``trend_var``.
    """
    mean, fv, tv = _kriging(fitted.posterior, fitted.trend, fitted.mesh, query_points)
    sd = np.sqrt(np.maximum(fv + tv, 0.0))
    if return_components:
        return mean, sd, {"field_var": fv, "trend_var": tv}
    return mean, sd


def kriging_at(model: DiscretizedModel, trend: TrendModel, obs: ObservationSet, sigma2: float, query_points):
    """Kriging for given operator parameters without fitting."""
    post = posterior_canonical(model, trend, obs, sigma2)
    mean, fv, tv = _kriging(post, trend, model.mesh, query_points)
    return mean, np.sqrt(np.maximum(fv + tv, 0.0))


@dataclass
class HessianUncertainty:
    names: list
    covariance: np.ndarray

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.covariance)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(self.variances)


def hessian_uncertainty(fitted: FittedModel, step: float = 1e-3, prior=None) -> HessianUncertainty:
    """Negative inverse of the central-difference Hessian of log pi(psi | Y) at psi_hat.

    Raises
    ------
    HessianError
        If the Hessian is not negative definite; eigenvalues are attached.
    """
    cov = hessian_covariance(fitted.objective(prior), fitted.psi, step)
    return HessianUncertainty(list(fitted.names), cov)


# ---------------------------------------------------------------------------
# residual diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    """Residual covariance by distance bin and local residual summaries.

    Bin 0 is the zero lag (the residual variance); bins 1.. cover
    ``(edges[i-1], edges[i]]``.
    """
    residuals: np.ndarray
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    covariance: np.ndarray
    counts: np.ndarray
    std_error: np.ndarray
    local_mean: np.ndarray
    local_sd: np.ndarray
    node_counts: np.ndarray


def _distances(a, b, sphere):
    if sphere:
        return np.arccos(np.clip(a @ b.T, -1.0, 1.0))
    return np.sqrt(np.maximum(np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2 * a @ b.T, 0.0))


def residual_report(mesh: TriangularMesh, locations, residuals, n_bins: int = 15,
                    max_distance: Optional[float] = None, chunk: int = 1024) -> DiagnosticsReport:
    """Binned empirical covariance and local mean/sd of residuals.

    Distances are great-circle on the sphere and Euclidean in the plane.
    Local statistics pool the residuals whose nearest node is the node itself
    or one of its neighbours; nodes with no residuals get NaN.
    """
    locations = np.asarray(locations, dtype=float)
    r = np.asarray(residuals, dtype=float)
    N = len(r)
    if max_distance is None:
        max_distance = math.pi / 2 if mesh.is_sphere else 0.5 * float(np.ptp(mesh.vertices, axis=0).max())
    edges = np.linspace(0.0, max_distance, n_bins + 1)
    c = r - r.mean() if N else r
    sums = np.zeros(n_bins + 1)
    sq = np.zeros(n_bins + 1)
    counts = np.zeros(n_bins + 1, dtype=np.int64)
    if N:
        sums[0] = np.sum(c * c)
        sq[0] = np.sum(c ** 4)
        counts[0] = N
    for start in range(0, N, chunk):
        a = locations[start:start + chunk]
        D = _distances(a, locations, mesh.is_sphere)
        P = c[start:start + chunk, None] * c[None, :]
        i_idx = np.arange(start, start + len(a))[:, None]
        keep = (np.arange(N)[None, :] > i_idx) & (D > 0) & (D <= max_distance)
        d, p = D[keep], P[keep]
        bins = np.clip(np.searchsorted(edges, d, side="left"), 1, n_bins)
        sums += np.bincount(bins, weights=p, minlength=n_bins + 1)
        sq += np.bincount(bins, weights=p * p, minlength=n_bins + 1)
        counts += np.bincount(bins, minlength=n_bins + 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        var = np.where(counts > 1, sq / np.maximum(counts, 1) - cov ** 2, np.nan)
        se = np.sqrt(np.maximum(var, 0.0) / np.maximum(counts, 1))
    centers = np.concatenate([[0.0], 0.5 * (edges[:-1] + edges[1:])])

    n = mesh.n_vertices
    local_mean = np.full(n, np.nan)
    local_sd = np.full(n, np.nan)
    node_counts = np.zeros(n, dtype=np.int64)
    if N:
        _, nearest = cKDTree(mesh.vertices).query(locations)
        node_counts = np.bincount(nearest, minlength=n)
        s1 = np.bincount(nearest, weights=r, minlength=n)
        s2 = np.bincount(nearest, weights=r * r, minlength=n)
        pool = mesh.adjacency.astype(float) + sp.identity(n)
        cnt = pool @ node_counts
        m1 = pool @ s1
        m2 = pool @ s2
        has = cnt > 0
        local_mean[has] = m1[has] / cnt[has]
        local_sd[has] = np.sqrt(np.maximum(m2[has] / cnt[has] - local_mean[has] ** 2, 0.0))
    return DiagnosticsReport(r, edges, centers, cov, counts, se, local_mean, local_sd, node_counts)


def residual_diagnostics(fitted: FittedModel, obs: Optional[ObservationSet] = None, n_bins: int = 15,
                         max_distance: Optional[float] = None) -> DiagnosticsReport:
    """Residuals Y - kriging mean at the observation locations, summarised."""
    obs = fitted.obs if obs is None else obs
    mean, _ = kriging(fitted, obs.locations)
    return residual_report(fitted.mesh, obs.locations, obs.values - mean, n_bins, max_distance)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

@dataclass
class SelectionRow:
    name: str
    n_params: int
    log_likelihood: float
    aic: float
    bic: float
    converged: bool
    fitted: Optional[FittedModel] = None
    error: Optional[str] = None


def select_models(mesh, templates: dict, trend: TrendModel, obs: ObservationSet,
                  options: Optional[FitOptions] = None) -> list[SelectionRow]:
    """Fit each named template in order, warm-starting from all earlier fits,
    and return rows sorted by BIC (failed fits last)."""
    rows = []
    warm: dict = {}
    for name, template in templates.items():
        try:
            fitted = fit(mesh, template, trend, obs, options, warm_start=warm)
        except (np.linalg.LinAlgError, ValueError) as exc:
            rows.append(SelectionRow(name, -1, math.nan, math.nan, math.nan, False, None, str(exc)))
            continue
        warm = {**warm, **fitted.params}
        rows.append(SelectionRow(name, fitted.n_params, fitted.log_likelihood, fitted.aic, fitted.bic,
                                 fitted.converged, fitted))
    return sorted(rows, key=lambda r: (r.fitted is None, r.bic if r.fitted is not None else 0.0))
