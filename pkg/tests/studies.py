"""Seeded simulation studies shared by the acceptance and inference tests.

Each study is cached so that tests checking different properties of the
same replicates fit the models only once per session.
"""
import math
from dataclasses import dataclass
from functools import cache

import numpy as np

from nestedspde.harmonics import ScalarHarmonicBasis, VectorHarmonicBasis
from nestedspde.inference import ObservationSet, TrendModel, fit, select_models
from nestedspde.mesh import build_icosphere, build_planar_mesh, evaluate_basis, lonlat_to_xyz
from nestedspde.spde import L1Factor, L2Factor, OperatorSystemSpec, ParamField, discretize, simulate

C = ParamField.constant
Y00 = 1 / math.sqrt(4 * math.pi)

KAPPA2, B_SCALE, SIGMA2, MU = 64.0, 50.0, 0.25, 5.0


def uniform_sphere(rng, n):
    lon = rng.uniform(-180, 180, n)
    lat = np.degrees(np.arcsin(rng.uniform(-1, 1, n)))
    return lonlat_to_xyz(lon, lat)


@cache
def sphere_mesh():
    return build_icosphere(3)


def stationary_truth():
    return OperatorSystemSpec((L1Factor(C(KAPPA2), 2),), (L2Factor(C(B_SCALE)),))


def model_a():
    """Constant kappa^2 and b, both free: with sigma^2 and mu, p = 4."""
    return OperatorSystemSpec((L1Factor(C(4.0, free=True), 2),), (L2Factor(C(1.0, free=True)),))


def model_c_prime():
    """Axially symmetric order-1 log b and drift B (3 extra parameters)."""
    sb, vb = ScalarHarmonicBasis(1, True), VectorHarmonicBasis(1, True)
    return OperatorSystemSpec((L1Factor(C(4.0, free=True), 2),),
                              (L2Factor(ParamField.loglinear(sb), ParamField.vectorlinear(vb)),))


def stationary_data(seed, n_obs):
    mesh = sphere_mesh()
    model = discretize(mesh, stationary_truth())
    rng = np.random.default_rng(seed)
    x = simulate(model, MU, seed=rng.integers(2 ** 32))
    pts = uniform_sphere(rng, n_obs)
    y = evaluate_basis(mesh, pts) @ x + rng.normal(0, math.sqrt(SIGMA2), n_obs)
    return ObservationSet(pts, y)


# ---------------------------------------------------------------------------
# parameter recovery
# ---------------------------------------------------------------------------

@dataclass
class Recovery:
    seed: int
    log_kappa_err: float
    log_sigma2_err: float
    mu_z: float
    converged: bool

    @property
    def ok(self) -> bool:
        return abs(self.log_kappa_err) <= 0.2 and abs(self.log_sigma2_err) <= 0.2 and abs(self.mu_z) <= 3


@cache
def recovery_study(n_rep=20, n_obs=2000):
    out = []
    for seed in range(n_rep):
        fitted = fit(sphere_mesh(), model_a(), TrendModel(), stationary_data(seed, n_obs))
        p = fitted.params
        mu_sd = math.sqrt(np.linalg.inv(fitted.posterior.Q_mu_hat)[0, 0])
        out.append(Recovery(seed, 0.5 * (p["l1[0].log_kappa2"] - math.log(KAPPA2)),
                            p["log_sigma2"] - math.log(SIGMA2), (fitted.mu[0] - MU) / mu_sd, fitted.converged))
    return tuple(out)


# ---------------------------------------------------------------------------
# nonstationary mechanics
# ---------------------------------------------------------------------------

def nonstationary_truth():
    sb, vb = ScalarHarmonicBasis(1, True), VectorHarmonicBasis(1, True)
    b = ParamField.loglinear(sb, [math.log(B_SCALE) / Y00, 1.2], free=False)
    B = ParamField.vectorlinear(vb, [1.5, 1.5], free=False)
    return OperatorSystemSpec((L1Factor(C(KAPPA2), 2),), (L2Factor(b, B),))


@cache
def nonstationary_study(n_rep=10, n_obs=3000):
    """Pearson correlation between fitted and true b(s) at the mesh nodes."""
    mesh = sphere_mesh()
    truth = nonstationary_truth()
    model = discretize(mesh, truth)
    b_true = truth.l2[0].b.node_values(mesh)
    out = []
    for seed in range(n_rep):
        rng = np.random.default_rng(500 + seed)
        x = simulate(model, MU, seed=rng.integers(2 ** 32))
        pts = uniform_sphere(rng, n_obs)
        y = evaluate_basis(mesh, pts) @ x + rng.normal(0, math.sqrt(SIGMA2), n_obs)
        fitted = fit(mesh, model_c_prime(), TrendModel(), ObservationSet(pts, y))
        out.append(float(np.corrcoef(fitted.spec.l2[0].b.node_values(mesh), b_true)[0, 1]))
    return tuple(out)


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

@cache
def selection_study(n_rep=20, n_obs=2000):
    """(BIC of A, BIC of C') per replicate on stationary truth."""
    out = []
    for seed in range(n_rep):
        rows = select_models(sphere_mesh(), {"A": model_a(), "C_prime": model_c_prime()}, TrendModel(),
                             stationary_data(100 + seed, n_obs))
        bic = {r.name: r.bic for r in rows}
        out.append((bic["A"], bic["C_prime"]))
    return tuple(out)


@cache
def withheld_direction_study(n_rep=20, n_obs=800):
    """(AIC, BIC) without and with the drift B on planar data with a
    directional L2 factor."""
    P = ParamField
    mesh = build_planar_mesh((0, 1), (0, 1), 31, 31)
    truth = OperatorSystemSpec((L1Factor(C(100.0), 4),), (L2Factor(C(5.0), C([1.0, 0.0])),))
    model = discretize(mesh, truth)
    sd = math.sqrt(np.mean(np.diag(model.covariance_dense())))
    out = []
    for seed in range(n_rep):
        rng = np.random.default_rng(seed)
        x = simulate(model, 0.0, seed=1000 + seed)
        pts = rng.uniform(0, 1, (n_obs, 2))
        obs = ObservationSet(pts, evaluate_basis(mesh, pts) @ x + rng.normal(0, 0.2 * sd, n_obs))
        plain = OperatorSystemSpec((L1Factor(C(30.0, free=True), 4),), (L2Factor(C(1.0, free=True)),))
        f0 = fit(mesh, plain, TrendModel(), obs)
        # B and -B give the same law, so start from two orthogonal directions
        fits = []
        for B0 in ([0.5, 0.0], [0.0, 0.5]):
            drift = OperatorSystemSpec((L1Factor(C(30.0, free=True), 4),),
                                       (L2Factor(C(1.0, free=True), P.constant(B0, free=True)),))
            fits.append(fit(mesh, drift, TrendModel(), obs, warm_start=f0.params))
        f1 = max(fits, key=lambda f: f.log_likelihood)
        out.append(((f0.aic, f0.bic), (f1.aic, f1.bic)))
    return tuple(out)
