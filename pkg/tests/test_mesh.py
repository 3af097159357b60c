import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from nestedspde.mesh import (MeshError, TriangularMesh, assemble, build_icosphere, build_planar_mesh,
                             evaluate_basis, load_mesh, lonlat_to_xyz, nudge_poles, save_mesh,
                             xyz_to_lonlat)


def _quadrature_mass(p):
    """Element mass matrix of a flat triangle by a degree-5 (7-point) rule."""
    a = 0.059715871789770
    b = 0.470142064105115
    c = 0.797426985353087
    d = 0.101286507323456
    bary = np.array([[1 / 3, 1 / 3, 1 / 3], [a, b, b], [b, a, b], [b, b, a], [c, d, d], [d, c, d], [d, d, c]])
    w = np.array([0.225, *[0.132394152788506] * 3, *[0.125939180544827] * 3])
    e1, e2 = p[1] - p[0], p[2] - p[0]
    area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    return area * np.einsum("q,qi,qj->ij", w, bary, bary)


@pytest.mark.parametrize("n,nv,nt", [(0, 12, 20), (1, 42, 80), (3, 642, 1280)])
def test_icosphere_counts(n, nv, nt):
    m = build_icosphere(n)
    assert (m.n_vertices, m.n_triangles) == (nv, nt)
    assert m.n_vertices == 10 * 4 ** n + 2
    # Euler characteristic of the sphere
    assert m.n_vertices - len(m.edges) + m.n_triangles == 2
    np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)


def test_icosphere_limit():
    with pytest.raises(ValueError):
        build_icosphere(9)
    with pytest.raises(ValueError):
        build_icosphere(-1)


def test_icosphere_outward_orientation():
    m = build_icosphere(2)
    p = m.vertices[m.triangles]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    assert np.all(np.einsum("ij,ij->i", normals, p.mean(axis=1)) > 0)


@pytest.mark.parametrize("args,nv,nt", [(((0, 1), (0, 1), 2, 2), 4, 2), (((0, 1), (0, 1), 3, 3), 9, 8)])
def test_planar_counts(args, nv, nt):
    m = build_planar_mesh(*args)
    assert (m.n_vertices, m.n_triangles) == (nv, nt)


def test_planar_area():
    m = build_planar_mesh((0, 2), (0, 1), 5, 3)
    assert abs(m.areas.sum() - 2.0) < 1e-12
    assert abs(assemble(m).C.sum() - 2.0) < 1e-12


def test_planar_degenerate_range():
    with pytest.raises(ValueError):
        build_planar_mesh((0, 0), (0, 1), 3, 3)
    with pytest.raises(ValueError):
        build_planar_mesh((0, 1), (0, 1), 1, 3)


def test_element_mass_oracle():
    m = TriangularMesh(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]))
    C = assemble(m).C.toarray()
    expected = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24
    np.testing.assert_allclose(C, expected, atol=1e-15)
    np.testing.assert_allclose(C, _quadrature_mass(m.vertices), atol=1e-12)


def test_mass_matches_quadrature_per_element():
    m = build_planar_mesh((0, 1), (0, 1), 5, 4)
    C = np.zeros((m.n_vertices, m.n_vertices))
    for t in m.triangles:
        C[np.ix_(t, t)] += _quadrature_mass(m.vertices[t])
    np.testing.assert_allclose(assemble(m).C.toarray(), C, atol=1e-12)


def test_sphere_area_deficit():
    fem = assemble(build_icosphere(3))
    total = fem.C.sum()
    assert total < 4 * np.pi
    assert abs(total - 4 * np.pi) / (4 * np.pi) < 0.02


@pytest.mark.parametrize("mesh", [build_planar_mesh((0, 1), (0, 2), 6, 7), build_icosphere(2)],
                         ids=["plane", "sphere"])
def test_fem_invariants(mesh):
    fem = assemble(mesh)
    C, G = fem.C, fem.G
    assert abs(C - C.T).max() < 1e-15
    assert C.min() >= 0
    np.testing.assert_allclose(np.asarray(C.sum(axis=1)).ravel(), fem.c_lumped, rtol=1e-14)
    assert abs(C.sum() - mesh.areas.sum()) < 1e-12
    assert abs(G - G.T).max() < 1e-13
    assert np.abs(G @ np.ones(mesh.n_vertices)).max() < 1e-10
    for D in fem.D:
        assert np.abs(D @ np.ones(mesh.n_vertices)).max() < 1e-10
    pattern = (mesh.adjacency + sp.identity(mesh.n_vertices, format="csr")).astype(bool)
    for M in (C, G, *fem.D):
        outside = M.astype(bool).astype(int) - M.astype(bool).multiply(pattern).astype(int)
        assert outside.count_nonzero() == 0
    if mesh.n_vertices <= 200:
        assert np.linalg.eigvalsh(G.toarray()).min() > -1e-10


def test_gradient_matrices_on_sphere_sum_to_zero():
    mesh = build_icosphere(2)
    one = np.ones(mesh.n_vertices)
    for D in assemble(mesh).D:
        S = D + D.T
        assert abs(one @ (S @ one)) < 1e-10


def test_mass_refinement_second_order():
    # C applied to a smooth function converges to its weighted integral at O(h^2)
    errs = []
    for n in (5, 9, 17, 33):
        m = build_planar_mesh((0, 1), (0, 1), n, n)
        f = np.cos(m.vertices[:, 0]) * np.exp(m.vertices[:, 1])
        approx = np.ones(m.n_vertices) @ assemble(m).C @ f
        errs.append(abs(approx - np.sin(1) * (np.e - 1)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_degenerate_triangle_rejected():
    m = TriangularMesh(np.array([[0.0, 0], [1, 0], [2, 0], [0, 1]]), np.array([[0, 1, 2], [0, 1, 3]]),
                       validate=False)
    with pytest.raises(MeshError):
        assemble(m)


def test_evaluate_basis_at_vertices_is_identity():
    for m in (build_planar_mesh((0, 1), (0, 1), 4, 5), build_icosphere(1)):
        Phi = evaluate_basis(m, m.vertices)
        assert abs(Phi - sp.identity(m.n_vertices)).max() < 1e-12


def test_evaluate_basis_centroid():
    m = build_planar_mesh((0, 1), (0, 1), 3, 3)
    c = m.vertices[m.triangles[3]].mean(axis=0)
    row = evaluate_basis(m, c[None, :]).toarray()[0]
    np.testing.assert_allclose(np.sort(row[row > 0]), [1 / 3] * 3, atol=1e-12)
    assert set(np.nonzero(row)[0]) == set(m.triangles[3])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_partition_of_unity_plane(x, y):
    m = build_planar_mesh((0, 1), (0, 1), 6, 6)
    row = evaluate_basis(m, np.array([[x, y]])).toarray()[0]
    assert abs(row.sum() - 1) < 1e-12
    assert np.count_nonzero(row) <= 3
    assert row.min() >= 0 and row.max() <= 1


@settings(max_examples=50, deadline=None)
@given(st.floats(-180, 180), st.floats(-90, 90))
def test_partition_of_unity_sphere(lon, lat):
    m = build_icosphere(2)
    row = evaluate_basis(m, lonlat_to_xyz([lon], [lat])).toarray()[0]
    assert abs(row.sum() - 1) < 1e-12
    assert np.count_nonzero(row) <= 3
    assert row.min() >= 0


def test_point_outside_plane():
    m = build_planar_mesh((0, 1), (0, 1), 3, 3)
    with pytest.raises(MeshError):
        evaluate_basis(m, np.array([[1.5, 0.5]]))


def test_sphere_points_slightly_off_are_projected():
    m = build_icosphere(1)
    p = m.vertices[5] * (1 + 1e-8)
    row = evaluate_basis(m, p[None, :]).toarray()[0]
    assert abs(row[5] - 1) < 1e-6


def test_single_triangle_file(tmp_path):
    f = tmp_path / "tri.txt"
    f.write_text("# one triangle\nmanifold plane\n3 1\n0 0\n1 0\n0 1\n0 1 2\n")
    m = load_mesh(f)
    assert m.manifold == "plane" and m.n_triangles == 1


def test_non_manifold_edge_reported(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("manifold plane\n5 3\n0 0\n1 0\n0 1\n0 -1\n1 1\n0 1 2\n1 0 3\n0 1 4\n")
    with pytest.raises(MeshError, match="non-manifold edge"):
        load_mesh(f)


def test_parse_failure(tmp_path):
    f = tmp_path / "bad.txt"
    f.write_text("manifold plane\n3 1\n0 0\n1 zero\n0 1\n0 1 2\n")
    with pytest.raises(MeshError):
        load_mesh(f)


def test_round_trip(tmp_path):
    m = build_icosphere(1)
    save_mesh(m, tmp_path / "m.txt")
    m2 = load_mesh(tmp_path / "m.txt")
    assert np.array_equal(m.vertices, m2.vertices)
    assert np.array_equal(m.triangles, m2.triangles)
    assert m2.manifold == "sphere"


def test_lonlat_round_trip():
    lon = np.array([-170.0, 0.0, 45.0, 120.0])
    lat = np.array([-80.0, 0.0, 30.0, 89.0])
    lo, la = xyz_to_lonlat(lonlat_to_xyz(lon, lat))
    np.testing.assert_allclose(lo, lon, atol=1e-12)
    np.testing.assert_allclose(la, lat, atol=1e-12)


def test_nudge_poles_moves_only_polar_points():
    pts = np.array([[0, 0, 1.0], [1, 0, 0], [0, 0, -1.0]])
    out = nudge_poles(pts)
    assert np.array_equal(out[1], pts[1])
    assert np.all(np.abs(out[[0, 2], 2]) < 1 - 1e-9)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-14)
