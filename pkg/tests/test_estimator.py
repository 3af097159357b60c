import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nestedspde.estimator import NestedSPDERegressor
from nestedspde.mesh import build_planar_mesh, evaluate_basis
from nestedspde.spde import discretize, matern_spec, simulate


@pytest.fixture(scope="module")
def plane_data():
    mesh = build_planar_mesh((0, 1), (0, 1), 21, 21)
    x = simulate(discretize(mesh, matern_spec(50.0, 2)), 1.0, seed=4)
    rng = np.random.default_rng(4)
    X = rng.uniform(0.05, 0.95, (150, 2))
    sd = np.std(x)
    y = evaluate_basis(mesh, X) @ x + rng.normal(0, 0.1 * sd, 150)
    return X, y


@pytest.fixture(scope="module")
def fitted(plane_data):
    return NestedSPDERegressor(domain="plane", plane_nx=21).fit(*plane_data)


def test_params_and_clone():
    est = NestedSPDERegressor(domain="plane", alpha=3, b_init=2.0)
    p = est.get_params()
    assert p["alpha"] == 3 and p["b_init"] == 2.0 and p["domain"] == "plane"
    c = clone(est)
    assert c is not est and c.get_params() == p
    assert est.set_params(alpha=2).alpha == 2


def test_not_fitted():
    with pytest.raises(NotFittedError):
        NestedSPDERegressor().predict(np.zeros((1, 2)))


def test_fit_attributes(fitted):
    assert fitted.fitted_.converged
    assert set(fitted.params_) == {"log_sigma2", "l1[0].log_kappa2", "l2[0].log_b"}
    assert fitted.sigma2_ > 0 and np.isfinite(fitted.bic_)
    assert fitted.n_features_in_ == 2
    assert fitted.mesh_.n_vertices == 21 * 21


def test_predict(fitted, plane_data):
    X, y = plane_data
    mean, sd = fitted.predict(X, return_std=True)
    assert np.array_equal(mean, fitted.predict(X))
    assert np.all(sd > 0)
    assert fitted.score(X, y) > 0.8
    q = np.array([[0.5, 0.5], [0.2, 0.7]])
    assert fitted.predict(q).shape == (2,)
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 3)))


def test_sphere_inputs(tmp_path):
    rng = np.random.default_rng(1)
    lon, lat = rng.uniform(-180, 180, 80), np.degrees(np.arcsin(rng.uniform(-1, 1, 80)))
    y = np.sin(np.radians(lat)) + rng.normal(0, 0.05, 80)
    est = NestedSPDERegressor(subdivisions=2).fit(np.column_stack([lon, lat]), y)
    xyz = np.column_stack([np.cos(np.radians(lat)) * np.cos(np.radians(lon)),
                           np.cos(np.radians(lat)) * np.sin(np.radians(lon)), np.sin(np.radians(lat))])
    est3 = NestedSPDERegressor(subdivisions=2).fit(2 * xyz, y)
    np.testing.assert_allclose(est.predict(np.column_stack([lon, lat])), est3.predict(xyz), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kwargs,X", [
    ({"domain": "torus"}, np.zeros((3, 2))),
    ({"domain": "plane"}, np.zeros((3, 3))),
    ({}, np.array([[0, 95.0], [0, 0], [1, 1]])),
    ({}, np.zeros((3, 3))),
    ({"domain": "plane", "trend_order": 1}, np.random.default_rng(0).uniform(size=(3, 2))),
])
def test_invalid(kwargs, X):
    with pytest.raises(ValueError):
        NestedSPDERegressor(**kwargs).fit(X, np.arange(len(X), dtype=float))
