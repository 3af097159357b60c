import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from nestedspde.covariance import MaternParams, matern_cov_dist
from nestedspde.harmonics import ScalarHarmonicBasis, VectorHarmonicBasis
from nestedspde.mesh import build_icosphere, build_planar_mesh
from nestedspde.spde import (L1Factor, L2Factor, OperatorSystemSpec, ParamField, SpecificationError, build_H,
                             build_K, build_Q_x0, discretize, fem_for, matern_spec, simulate,
                             smoothness_check, smoothness_from_orders)


@pytest.fixture(scope="module")
def small_plane():
    return build_planar_mesh((0, 1), (0, 1), 10, 10)


def const(v):
    return ParamField.constant(v)


def dense_Q(fem, kappa2, alphas, phi=1.0):
    C = np.diag(fem.c_lumped)
    Ci = np.diag(1 / fem.c_lumped)
    Q = None
    for k2, a in zip(kappa2, alphas):
        K = k2 * C + fem.G.toarray()
        base = K if a % 2 else C
        for _ in range(a // 2):
            base = K @ Ci @ base @ Ci @ K
        Q = base if Q is None else Q @ Ci @ base
    return Q / phi ** 2


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def test_smoothness_examples():
    assert not smoothness_from_orders([2], 1, 2).continuous
    s = smoothness_from_orders([4], 1, 2)
    assert s.continuous and s.max_continuous_derivative == 3
    assert smoothness_from_orders([2], 0, 2).continuous
    assert smoothness_from_orders([2], 1, 2).max_continuous_derivative == -1


def test_smoothness_sweep():
    for alpha, n2, d in itertools.product(range(1, 7), range(4), (1, 2, 3)):
        excess = 2 * alpha - 2 * n2 - d
        m = max((j for j in range(excess) if excess > j), default=-1)
        s = smoothness_from_orders([alpha], n2, d)
        assert s.continuous == (excess > 0)
        assert s.max_continuous_derivative == (m if excess > 0 else -1)


def test_smoothness_ignores_pure_scaling():
    spec = OperatorSystemSpec((L1Factor(const(1.0), 2),), (L2Factor(const(2.0)),))
    assert smoothness_check(spec, 2).continuous
    spec = OperatorSystemSpec((L1Factor(const(1.0), 2),), (L2Factor(const(2.0), const([1.0, 0.0])),))
    assert not smoothness_check(spec, 2).continuous


# ---------------------------------------------------------------------------
# specification
# ---------------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(SpecificationError):
        L1Factor(const(1.0), 0)
    with pytest.raises(SpecificationError):
        L1Factor(const(1.0), 1.5)
    with pytest.raises(SpecificationError):
        L2Factor(const(0.0))
    L2Factor(const(0.0), const([1.0, 0.0]), allow_zero_b=True)
    with pytest.raises(SpecificationError):
        OperatorSystemSpec((L1Factor(const(1.0), 1),), (L2Factor(const(1.0)), L2Factor(const(1.0))))
    with pytest.raises(SpecificationError):
        OperatorSystemSpec(())
    with pytest.raises(SpecificationError):
        matern_spec(1.0, 2, phi=0.0)
    with pytest.raises(SpecificationError):
        ParamField.loglinear(ScalarHarmonicBasis(1), [0.0, 1.0])


def test_loglinear_node_values_positive():
    mesh = build_icosphere(2)
    f = ParamField.loglinear(ScalarHarmonicBasis(2), np.linspace(-3, 3, 9))
    assert np.all(f.node_values(mesh) > 0)


# ---------------------------------------------------------------------------
# K, Q and H
# ---------------------------------------------------------------------------

def test_build_K(small_plane):
    fem = fem_for(small_plane)
    K = build_K(small_plane, fem, const(1.0))
    np.testing.assert_allclose(K.toarray(), np.diag(fem.c_lumped) + fem.G.toarray(), rtol=1e-15, atol=1e-15)
    K3 = build_K(small_plane, fem, const(3.0)).toarray()
    np.testing.assert_allclose(K3, 3 * np.diag(fem.c_lumped) + fem.G.toarray(), rtol=1e-15, atol=1e-15)
    np.testing.assert_array_equal(K3, K3.T)
    assert np.linalg.eigvalsh(K3).min() > 0
    with pytest.raises(SpecificationError):
        build_K(small_plane, fem, const(0.0))
    with pytest.raises(SpecificationError):
        build_K(small_plane, fem, const(-1.0))


@pytest.mark.parametrize("alphas,kappa2", [([1], [2.0]), ([2], [2.0]), ([3], [1.5]), ([4], [2.0]),
                                           ([2, 1], [1.0, 5.0]), ([2, 2], [1.0, 5.0])])
def test_Q_matches_dense_product(small_plane, alphas, kappa2):
    fem = fem_for(small_plane)
    factors = [L1Factor(const(k), a) for k, a in zip(kappa2, alphas)]
    Q = build_Q_x0(small_plane, fem, factors, phi=1.3).toarray()
    expected = dense_Q(fem, kappa2, alphas, 1.3)
    scale = np.abs(expected).max()
    np.testing.assert_allclose(Q, expected, rtol=1e-10, atol=1e-12 * scale)
    np.testing.assert_allclose(Q, Q.T, rtol=1e-12, atol=1e-14 * scale)


def test_Q_alpha1_and_alpha2_fundamental_cases(small_plane):
    fem = fem_for(small_plane)
    K = build_K(small_plane, fem, const(2.0))
    np.testing.assert_allclose(build_Q_x0(small_plane, fem, [L1Factor(const(2.0), 1)], 2.0).toarray(),
                               K.toarray() / 4, rtol=1e-15)
    Q2 = build_Q_x0(small_plane, fem, [L1Factor(const(2.0), 2)]).toarray()
    Kd = K.toarray()
    np.testing.assert_allclose(Q2, Kd @ np.diag(1 / fem.c_lumped) @ Kd, rtol=1e-12, atol=1e-12 * np.abs(Q2).max())


def test_alpha4_monte_carlo():
    mesh = build_planar_mesh((0, 1), (0, 1), 8, 8)
    fem = fem_for(mesh)
    k2 = 4.0
    Q4 = build_Q_x0(mesh, fem, [L1Factor(const(k2), 4)]).toarray()
    K = build_K(mesh, fem, const(k2)).toarray()
    c = fem.c_lumped
    rng = np.random.default_rng(0)
    z = rng.standard_normal((mesh.n_vertices, 200_000))
    # two sequential alpha = 2 stages: K w2 = C^{1/2} z, K w4 = C w2
    w2 = np.linalg.solve(K, np.sqrt(c)[:, None] * z)
    w4 = np.linalg.solve(K, c[:, None] * w2)
    S = np.cov(w4)
    Sigma = np.linalg.inv(Q4)
    assert np.linalg.norm(S - Sigma) / np.linalg.norm(Sigma) < 0.02


def test_H_identity_and_scaling(small_plane):
    fem = fem_for(small_plane)
    n = small_plane.n_vertices
    assert abs(build_H(small_plane, fem, ()) - sp.identity(n)).max() == 0
    H = build_H(small_plane, fem, [L2Factor(const(2.5))])
    np.testing.assert_allclose(H.toarray(), 2.5 * np.eye(n), rtol=1e-14, atol=1e-14)


def test_H_annihilates_constants(small_plane):
    fem = fem_for(small_plane)
    H = build_H(small_plane, fem, [L2Factor(const(0.0), const([0.7, -0.4]), True)])
    assert np.abs(H @ np.ones(small_plane.n_vertices)).max() < 1e-10


def test_H_chain_product(small_plane):
    fem = fem_for(small_plane)
    Ci = np.diag(1 / fem.c_lumped)
    C = np.diag(fem.c_lumped)
    D = [d.toarray() for d in fem.D]
    factors = [L2Factor(const(1.5), const([1.0, 0.0])), L2Factor(const(0.5), const([0.2, 0.9]))]
    expected = np.eye(small_plane.n_vertices)
    for f in factors:
        B = np.asarray(f.B.value)
        Hi = f.b.value * C + B[0] * D[0] + B[1] * D[1]
        expected = Ci @ Hi @ expected
    np.testing.assert_allclose(build_H(small_plane, fem, factors).toarray(), expected, rtol=1e-12, atol=1e-12)


def test_H_sparsity_within_rings():
    mesh = build_icosphere(2)
    fem = fem_for(mesh)
    vb = VectorHarmonicBasis(1)
    B = ParamField.vectorlinear(vb, np.linspace(0.2, 1.2, len(vb)))
    factors = [L2Factor(const(1.0), B)] * 2
    H = build_H(mesh, fem, factors)
    A = (mesh.adjacency + sp.identity(mesh.n_vertices)).astype(bool).astype(int)
    ring2 = (A @ A).astype(bool)
    assert (H.astype(bool).astype(int) - H.astype(bool).multiply(ring2).astype(int)).count_nonzero() == 0


def test_matern_Q_two_ring_sparsity():
    mesh = build_icosphere(2)
    model = discretize(mesh, matern_spec(4.0))
    A = (mesh.adjacency + sp.identity(mesh.n_vertices)).astype(bool).astype(int)
    ring2 = (A @ A).astype(bool)
    Qb = model.Q.astype(bool)
    assert (Qb.astype(int) - Qb.multiply(ring2).astype(int)).count_nonzero() == 0


def test_implied_covariance_psd(small_plane):
    spec = OperatorSystemSpec((L1Factor(const(3.0), 3),), (L2Factor(const(1.0), const([1.0, 0.5])),))
    S = discretize(small_plane, spec).covariance_dense()
    np.testing.assert_allclose(S, S.T, rtol=1e-10, atol=1e-14 * np.abs(S).max())
    assert np.linalg.eigvalsh(S).min() > -1e-10 * np.abs(S).max()


def test_phi_scaling(small_plane):
    a = discretize(small_plane, matern_spec(2.0, 2, phi=1.0)).covariance_dense()
    b = discretize(small_plane, matern_spec(2.0, 2, phi=2.0)).covariance_dense()
    np.testing.assert_allclose(b, 4 * a, rtol=1e-12)


def test_loglinear_zero_coefficients_bitwise():
    mesh = build_icosphere(2)
    fem = fem_for(mesh)
    c00 = np.log(5.0) * np.sqrt(4 * np.pi)
    low = ParamField.loglinear(ScalarHarmonicBasis(0), [c00])
    high = ParamField.loglinear(ScalarHarmonicBasis(3), [c00] + [0.0] * 15)
    values = high.node_values(mesh)
    assert np.all(values == values[0])
    flat = ParamField.constant(float(values[0]))
    Qs = [build_Q_x0(mesh, fem, [L1Factor(f, 2)]) for f in (low, high, flat)]
    for Q in Qs[1:]:
        np.testing.assert_array_equal(Q.indices, Qs[0].indices)
        np.testing.assert_array_equal(Q.data, Qs[0].data)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def test_simulate_deterministic(small_plane):
    model = discretize(small_plane, matern_spec(4.0))
    a = simulate(model, 1.0, seed=7)
    np.testing.assert_array_equal(a, simulate(model, 1.0, seed=7))
    assert not np.array_equal(a, simulate(model, 1.0, seed=8))
    assert simulate(model, 0.0, seed=1, n_samples=3).shape == (small_plane.n_vertices, 3)


def test_simulate_mean(small_plane):
    model = discretize(small_plane, matern_spec(4.0))
    x = simulate(model, 2.0, seed=3, n_samples=10_000)
    se = np.sqrt(np.diag(model.covariance_dense()) / x.shape[1])
    assert np.all(np.abs(x.mean(axis=1) - 2.0) < 4 * se)


def test_simulate_covariance(small_plane):
    spec = OperatorSystemSpec((L1Factor(const(9.0), 3),), (L2Factor(const(1.0), const([0.3, 0.2])),))
    model = discretize(small_plane, spec)
    x = simulate(model, 0.0, seed=4, n_samples=200_000)
    Sigma = model.covariance_dense()
    S = np.cov(x)
    assert np.linalg.norm(S - Sigma) / np.linalg.norm(Sigma) < 0.03


def test_fem_matches_matern_in_plane():
    # spacing 0.1 / kappa and domain half-width 6 / kappa
    kappa = 1.0
    mesh = build_planar_mesh((-6, 6), (-6, 6), 121, 121)
    model = discretize(mesh, matern_spec(kappa ** 2, 2))
    center = int(np.argmin(np.linalg.norm(mesh.vertices, axis=1)))
    e = np.zeros(mesh.n_vertices)
    e[center] = 1.0
    col = model.factor.solve(e)
    r = np.linalg.norm(mesh.vertices - mesh.vertices[center], axis=1)
    sel = (r >= 0.2 / kappa) & (r <= 2 / kappa)
    ref = matern_cov_dist(MaternParams(1.0, kappa), r[sel])
    assert np.max(np.abs(col[sel] - ref) / ref) < 0.05


def test_translation_invariance_interior():
    kappa = 2.0
    mesh = build_planar_mesh((-4, 4), (-4, 4), 81, 81)
    model = discretize(mesh, matern_spec(kappa ** 2, 2))
    v = mesh.vertices
    cols = []
    for center in ([0.0, 0.0], [0.5, -0.5]):
        i = int(np.argmin(np.linalg.norm(v - center, axis=1)))
        e = np.zeros(mesh.n_vertices)
        e[i] = 1.0
        cols.append((i, model.factor.solve(e)))
    (i, a), (j, b) = cols
    shift = v[j] - v[i]
    for lag in ([0.1, 0.0], [0.3, 0.4], [-0.5, 0.2], [0.0, -1.0]):
        p = int(np.argmin(np.linalg.norm(v - (v[i] + lag), axis=1)))
        q = int(np.argmin(np.linalg.norm(v - (v[p] + shift), axis=1)))
        assert abs(a[p] - b[q]) / a[p] < 0.05
