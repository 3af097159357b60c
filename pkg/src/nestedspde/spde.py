"""Nested SPDE operator systems and their sparse finite element discretisation.

The system is

    prod_i (kappa_i^2(s) - Laplacian)^{alpha_i / 2} X0(s) = phi W(s)
    X(s) = prod_j (b_j(s) + B_j(s) . grad) X0(s)

and is approximated by node weights w = H w0 with w0 ~ N(0, Q^{-1}).
All products use the lumped (diagonal) mass matrix, which keeps Q and H
sparse.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .cholesky import CholeskyFactor, NotPositiveDefiniteError, cholesky
from .covariance import StationarySpec
from .mesh import FemMatrices, TriangularMesh, assemble, nudge_poles

CONSTANT = "constant"
LOGLINEAR = "loglinear"
VECTORLINEAR = "vectorlinear"

# angular offset used when a vector basis must be evaluated at a pole node
POLE_NUDGE = 1e-4


class SpecificationError(ValueError):
    """Invalid operator system."""


class OperatorError(np.linalg.LinAlgError):
    """Numerical failure while building or factorising the precision matrix."""


@dataclass(frozen=True)
class ParamField:
    """A spatially constant or basis-expanded operator parameter.

    Use the ``constant``, ``loglinear`` and ``vectorlinear`` constructors.
    ``free`` marks the parameter for estimation.
    """
    kind: str
    value: object = None
    basis: object = None
    coefficients: tuple = ()
    free: bool = False

    @classmethod
    def constant(cls, value, free: bool = False) -> "ParamField":
        v = np.ravel(np.asarray(value, dtype=float))
        value = float(v[0]) if v.size == 1 and np.ndim(value) == 0 else tuple(float(c) for c in v)
        return cls(CONSTANT, value=value, free=free)

    @classmethod
    def loglinear(cls, basis, coefficients=None, free: bool = True) -> "ParamField":
        """log p(s) = sum_j c_j f_j(s) for a scalar basis with ``evaluate(points)``."""
        coefs = np.zeros(len(basis)) if coefficients is None else np.asarray(coefficients, dtype=float)
        if coefs.shape != (len(basis),):
            raise SpecificationError(f"expected {len(basis)} coefficients, got {coefs.shape}")
        return cls(LOGLINEAR, basis=basis, coefficients=tuple(coefs.tolist()), free=free)

    @classmethod
    def vectorlinear(cls, basis, coefficients=None, free: bool = True) -> "ParamField":
        """B(s) = sum_j c_j V_j(s) for a vector basis returning per-component matrices."""
        coefs = np.zeros(len(basis)) if coefficients is None else np.asarray(coefficients, dtype=float)
        if coefs.shape != (len(basis),):
            raise SpecificationError(f"expected {len(basis)} coefficients, got {coefs.shape}")
        return cls(VECTORLINEAR, basis=basis, coefficients=tuple(coefs.tolist()), free=free)

    @property
    def is_constant(self) -> bool:
        return self.kind == CONSTANT

    @property
    def size(self) -> int:
        if self.kind == CONSTANT:
            return 1 if isinstance(self.value, float) else len(self.value)
        return len(self.coefficients)

    def with_coefficients(self, coefficients) -> "ParamField":
        coefs = tuple(float(c) for c in np.ravel(coefficients))
        if self.kind == CONSTANT:
            value = coefs[0] if isinstance(self.value, float) else coefs
            return replace(self, value=value)
        if len(coefs) != len(self.coefficients):
            raise SpecificationError("coefficient length does not match the basis")
        return replace(self, coefficients=coefs)

    def node_values(self, mesh: TriangularMesh) -> np.ndarray:
        """Values at mesh nodes: shape (n,) for scalars, (n, d) for vectors."""
        if self.kind == CONSTANT:
            if isinstance(self.value, float):
                return np.full(mesh.n_vertices, self.value)
            v = np.asarray(self.value)
            if v.size != mesh.dim:
                raise SpecificationError(f"constant vector has {v.size} components, mesh needs {mesh.dim}")
            return np.tile(v, (mesh.n_vertices, 1))
        coefs = np.asarray(self.coefficients)
        if self.kind == LOGLINEAR:
            return np.exp(_scalar_design(self.basis, mesh) @ coefs)
        comps = _vector_design(self.basis, mesh)
        return np.column_stack([Dk @ coefs for Dk in comps])


@lru_cache(maxsize=64)
def _scalar_design(basis, mesh):
    return np.asarray(basis.evaluate(mesh.vertices), dtype=float)


@lru_cache(maxsize=64)
def _vector_design(basis, mesh):
    pts = nudge_poles(mesh.vertices, POLE_NUDGE) if mesh.is_sphere else mesh.vertices
    return tuple(np.asarray(c, dtype=float) for c in basis.evaluate(pts))


@dataclass(frozen=True)
class L1Factor:
    """(kappa^2(s) - Laplacian)^{alpha / 2}."""
    kappa2: ParamField
    alpha: int = 2

    def __post_init__(self):
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise SpecificationError(f"alpha must be a positive integer, got {self.alpha}")
        object.__setattr__(self, "alpha", int(self.alpha))
        if self.kappa2.kind == VECTORLINEAR:
            raise SpecificationError("kappa^2 must be a scalar field")


@dataclass(frozen=True)
class L2Factor:
    """b(s) + B(s) . grad.  ``B=None`` means no derivative term."""
    b: ParamField
    B: Optional[ParamField] = None
    allow_zero_b: bool = False

    def __post_init__(self):
        if self.b.kind == VECTORLINEAR:
            raise SpecificationError("b must be a scalar field")
        if self.B is not None and self.B.kind == LOGLINEAR:
            raise SpecificationError("B must be a constant vector or a vector-basis field")
        if self.b.is_constant and not self.allow_zero_b and self.b.value == 0.0:
            raise SpecificationError("b = 0 requires allow_zero_b=True")


@dataclass(frozen=True)
class OperatorSystemSpec:
    """Nested operator system: L1 factors, L2 factors and noise scale phi."""
    l1: tuple
    l2: tuple = ()
    phi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "l1", tuple(self.l1))
        object.__setattr__(self, "l2", tuple(self.l2))
        if not self.l1:
            raise SpecificationError("at least one L1 factor is required")
        if not self.phi > 0:
            raise SpecificationError("phi must be positive")
        if self.alpha_total < self.n2:
            raise SpecificationError(
                f"sum of alpha ({self.alpha_total}) must be at least the number of L2 factors ({self.n2})"
            )

    @property
    def n1(self) -> int:
        return len(self.l1)

    @property
    def n2(self) -> int:
        return len(self.l2)

    @property
    def alpha_total(self) -> int:
        return sum(f.alpha for f in self.l1)

    @property
    def is_stationary(self) -> bool:
        return all(f.kappa2.is_constant for f in self.l1) and all(
            f.b.is_constant and (f.B is None or f.B.is_constant) for f in self.l2
        )

    def stationary(self, d: Optional[int] = None) -> StationarySpec:
        """Constant-parameter view used by the closed-form covariances."""
        if not self.is_stationary:
            raise SpecificationError("operator system has spatially varying parameters")
        l2 = []
        for f in self.l2:
            if f.B is None:
                if d is None:
                    raise SpecificationError("dimension needed for an L2 factor without B")
                B = (0.0,) * d
            else:
                B = f.B.value if isinstance(f.B.value, tuple) else (f.B.value,)
            l2.append((f.b.value, B))
        if d is None:
            d = len(l2[0][1]) if l2 else 2
        return StationarySpec(tuple((f.kappa2.value, f.alpha) for f in self.l1), tuple(l2), self.phi ** 2, d)


def matern_spec(kappa2: float, alpha: int = 2, phi: float = 1.0) -> OperatorSystemSpec:
    """Single-factor Matern operator system."""
    return OperatorSystemSpec((L1Factor(ParamField.constant(kappa2), alpha),), (), phi)


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Smoothness:
    continuous: bool
    max_continuous_derivative: int


def smoothness_from_orders(alphas: Sequence[int], n2: int, d: int) -> Smoothness:
    """Sample continuity iff 2 sum(alpha) - 2 n2 > d; the m-th derivative is
    continuous iff 2 sum(alpha) - 2 n2 - d > m."""
    excess = 2 * sum(alphas) - 2 * n2 - d
    if excess <= 0:
        return Smoothness(False, -1)
    # largest integer m with m < excess
    return Smoothness(True, int(excess - 1))


def smoothness_check(spec: OperatorSystemSpec, d: int) -> Smoothness:
    """Smoothness of a specification; L2 factors without a derivative term
    (``B`` is None) do not reduce regularity."""
    n2 = sum(f.B is not None for f in spec.l2)
    return smoothness_from_orders([f.alpha for f in spec.l1], n2, d)


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def fem_for(mesh: TriangularMesh) -> FemMatrices:
    """Cached finite element matrices of ``mesh``."""
    return assemble(mesh)


def build_K(mesh: TriangularMesh, fem: FemMatrices, kappa2: ParamField) -> sp.csr_matrix:
    """K = diag(kappa^2 at nodes) C_lumped + G."""
    k2 = kappa2.node_values(mesh)
    if not np.all(np.isfinite(k2)) or np.any(k2 <= 0):
        raise SpecificationError("kappa^2 must be positive at every node")
    return (fem.G + sp.diags(k2 * fem.c_lumped)).tocsr()


def _interleave(mats, cinv):
    out = mats[0]
    for M in mats[1:]:
        out = out @ cinv @ M
    return out


def build_Q_x0(mesh: TriangularMesh, fem: FemMatrices, l1_factors, phi: float = 1.0,
               check: bool = False) -> sp.csr_matrix:
    """Precision of the weights w0 of the L1 solution.

    A single factor with alpha = 1 gives K, alpha = 2 gives K C^{-1} K, and
    higher alpha wraps as Q <- K C^{-1} Q C^{-1} K.  Several factors are
    composed by the same interleaving; when more than one factor has odd
    alpha their odd parts are combined in a symmetrised product.

    Parameters
    ----------
    check : bool
        Factorise the result and, on failure, name the offending factor.
    """
    cinv = sp.diags(1.0 / fem.c_lumped)
    Ks = [build_K(mesh, fem, f.kappa2) for f in l1_factors]
    odd = [K for K, f in zip(Ks, l1_factors) if f.alpha % 2]
    if not odd:
        Q = sp.diags(fem.c_lumped)
    elif len(odd) == 1:
        Q = odd[0]
    else:
        P = _interleave(odd, cinv)
        Q = 0.5 * (P + P.T)
    for K, f in zip(Ks, l1_factors):
        for _ in range(f.alpha // 2):
            Q = K @ cinv @ Q @ cinv @ K
    Q = sp.csr_matrix(Q / phi ** 2)
    Q.sort_indices()
    if check:
        try:
            cholesky(Q)
        except NotPositiveDefiniteError as exc:
            for i, K in enumerate(Ks):
                try:
                    cholesky(K)
                except NotPositiveDefiniteError:
                    raise OperatorError(f"L1 factor {i} is not positive definite") from exc
            raise OperatorError("composed L1 precision is not positive definite") from exc
    return Q


def build_H(mesh: TriangularMesh, fem: FemMatrices, l2_factors) -> sp.csr_matrix:
    """Loading matrix H = C^{-1} H_n2 ... C^{-1} H_1 with
    H_i = diag(b) C_lumped + sum_k D_k diag(B_k)."""
    n = mesh.n_vertices
    H = sp.identity(n, format="csr")
    if not l2_factors:
        return H
    cinv = 1.0 / fem.c_lumped
    for f in l2_factors:
        Hi = sp.diags(f.b.node_values(mesh))
        if f.B is not None:
            Bv = f.B.node_values(mesh).reshape(n, -1)
            if Bv.shape[1] != len(fem.D):
                raise SpecificationError(f"B has {Bv.shape[1]} components, mesh needs {len(fem.D)}")
            grad = sum(Dk @ sp.diags(Bv[:, k]) for k, Dk in enumerate(fem.D))
            Hi = Hi + sp.diags(cinv) @ grad
        H = sp.csr_matrix(Hi @ H)
    H.sort_indices()
    return H


class DiscretizedModel:
    """Sparse representation w = H w0, w0 ~ N(0, Q^{-1}) of a nested field.

    Attributes
    ----------
    mesh, fem, spec
    Q : sparse precision of w0
    H : sparse loading matrix
    smoothness : Smoothness
    """

    def __init__(self, mesh, fem, spec, Q, H, smoothness):
        self.mesh = mesh
        self.fem = fem
        self.spec = spec
        self.Q = Q
        self.H = H
        self.smoothness = smoothness

    @cached_property
    def factor(self) -> CholeskyFactor:
        try:
            return cholesky(self.Q)
        except NotPositiveDefiniteError as exc:
            raise OperatorError(str(exc)) from exc

    def covariance_dense(self) -> np.ndarray:
        """H Q^{-1} H^T as a dense matrix (small meshes only)."""
        Hd = self.H.toarray()
        return Hd @ self.factor.solve(Hd.T)


def discretize(mesh: TriangularMesh, spec: OperatorSystemSpec, fem: Optional[FemMatrices] = None) -> DiscretizedModel:
    """Build the precision Q and loading matrix H of ``spec`` on ``mesh``."""
    fem = fem_for(mesh) if fem is None else fem
    Q = build_Q_x0(mesh, fem, spec.l1, spec.phi)
    H = build_H(mesh, fem, spec.l2)
    # planar domains and the sphere are both 2-manifolds
    return DiscretizedModel(mesh, fem, spec, Q, H, smoothness_check(spec, 2))


def simulate(model: DiscretizedModel, mean=0.0, seed=None, n_samples: int = 1) -> np.ndarray:
    """Draw node values mean + H w0 with w0 = P^T L^{-T} z, z standard normal.

    Returns shape (n,) for one sample and (n, n_samples) otherwise.
    """
    rng = np.random.default_rng(seed)
    n = model.Q.shape[0]
    z = rng.standard_normal((n, n_samples))
    w0 = model.factor.solve_Lt(z)
    x = model.H @ w0 + np.reshape(np.asarray(mean, dtype=float), (-1, 1))
    return x[:, 0] if n_samples == 1 else x
