"""Sparse Cholesky factorization for symmetric positive definite matrices.

A fill-reducing minimum-degree ordering is computed once per sparsity
pattern and cached, together with the elimination tree and column counts,
so repeated factorizations of matrices sharing a pattern (the usual case
inside an optimizer) only pay for the numeric phase.

Convention: with ``perm`` the ordering, ``Q[perm][:, perm] = L @ L.T``.
"""
from __future__ import annotations

import hashlib
import heapq
from collections import OrderedDict

import numpy as np
import scipy.sparse as sp
from numba import jit


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a pivot is not strictly positive.

    Attributes
    ----------
    pivot : int
        Index (in the original, unpermuted numbering) of the failing pivot.
    """

    def __init__(self, pivot: int, value: float):
        self.pivot = int(pivot)
        self.value = float(value)
        super().__init__(f"matrix is not positive definite (pivot {self.pivot}, value {self.value:.3e})")


# ---------------------------------------------------------------------------
# ordering
# ---------------------------------------------------------------------------

def minimum_degree(indptr, indices, n: int) -> np.ndarray:
    """Minimum-degree ordering of a symmetric sparsity pattern.

    Works on the quotient graph: eliminated vertices become elements, and
    elements adjacent to the pivot are absorbed into the new one.  Degrees of
    the affected variables are recomputed exactly from the quotient graph.
    Ties are broken by the smallest vertex index, so the result is
    deterministic.
    """
    adj = [set() for _ in range(n)]
    for i in range(n):
        for j in indices[indptr[i]:indptr[i + 1]]:
            j = int(j)
            if j != i:
                adj[i].add(j)
                adj[j].add(i)
    elems = [set() for _ in range(n)]
    elem_vars: dict[int, set] = {}
    degree = [len(a) for a in adj]
    heap = [(degree[i], i) for i in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, p = heapq.heappop(heap)
        if done[p] or deg != degree[p]:
            continue
        done[p] = True
        order.append(p)
        Lp = set(adj[p])
        for e in elems[p]:
            Lp |= elem_vars.pop(e)
        Lp.discard(p)
        absorbed = elems[p]
        elem_vars[p] = Lp
        for v in Lp:
            adj[v] -= Lp
            adj[v].discard(p)
            elems[v] -= absorbed
            elems[v].add(p)
        for v in Lp:
            reach = set(adj[v])
            for e in elems[v]:
                reach |= elem_vars[e]
            reach.discard(v)
            d = len(reach)
            if d != degree[v]:
                degree[v] = d
                heapq.heappush(heap, (d, v))
        adj[p] = set()
        elems[p] = set()
    return np.asarray(order, dtype=np.int64)


# ---------------------------------------------------------------------------
# numba kernels (CSC, upper triangle of the permuted matrix as input)
# ---------------------------------------------------------------------------

@jit(nopython=True, cache=True)
def _etree(n, Cp, Ci):
    parent = -np.ones(n, dtype=np.int64)
    ancestor = -np.ones(n, dtype=np.int64)
    for k in range(n):
        for p in range(Cp[k], Cp[k + 1]):
            i = Ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@jit(nopython=True, cache=True)
def _ereach(k, Cp, Ci, parent, s, mark):
    """Nonzero pattern of row k of L, topologically ordered in s[top:n]."""
    n = parent.shape[0]
    top = n
    mark[k] = k
    for p in range(Cp[k], Cp[k + 1]):
        i = Ci[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            s[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@jit(nopython=True, cache=True)
def _column_counts(n, Cp, Ci, parent):
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    mark = -np.ones(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, s, mark)
        for t in range(top, n):
            counts[s[t]] += 1
    return counts


@jit(nopython=True, cache=True)
def _numeric(n, Cp, Ci, Cx, parent, Lp):
    """Up-looking Cholesky.  Returns (Li, Lx, failed_column, pivot_value)."""
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    nxt = Lp[:-1].copy()
    x = np.zeros(n, dtype=np.float64)
    s = np.empty(n, dtype=np.int64)
    mark = -np.ones(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(k, Cp, Ci, parent, s, mark)
        x[k] = 0.0
        for p in range(Cp[k], Cp[k + 1]):
            if Ci[p] <= k:
                x[Ci[p]] += Cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, nxt[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = nxt[i]
            nxt[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > 0.0:
            return Li, Lx, k, d
        p = nxt[k]
        nxt[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return Li, Lx, -1, 0.0


@jit(nopython=True, cache=True)
def _lsolve(n, Lp, Li, Lx, X):
    for c in range(X.shape[1]):
        for j in range(n):
            xj = X[j, c] / Lx[Lp[j]]
            X[j, c] = xj
            if xj != 0.0:
                for p in range(Lp[j] + 1, Lp[j + 1]):
                    X[Li[p], c] -= Lx[p] * xj
    return X


@jit(nopython=True, cache=True)
def _ltsolve(n, Lp, Li, Lx, X):
    for c in range(X.shape[1]):
        for j in range(n - 1, -1, -1):
            acc = X[j, c]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                acc -= Lx[p] * X[Li[p], c]
            X[j, c] = acc / Lx[Lp[j]]
    return X


# ---------------------------------------------------------------------------
# symbolic analysis cache
# ---------------------------------------------------------------------------

class _Symbolic:
    __slots__ = ("n", "perm", "Cp", "Ci", "src", "parent", "Lp")


_SYMBOLIC_CACHE: "OrderedDict[tuple, _Symbolic]" = OrderedDict()
_CACHE_SIZE = 32


def _canonical(Q) -> sp.csr_matrix:
    Q = sp.csr_matrix(Q)
    if Q.shape[0] != Q.shape[1]:
        raise ValueError(f"matrix must be square, got shape {Q.shape}")
    if not Q.has_canonical_format:
        Q = Q.copy()
        Q.sum_duplicates()
    return Q


def _pattern_key(Q: sp.csr_matrix, ordering: str) -> tuple:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(Q.indptr, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(Q.indices, dtype=np.int64).tobytes())
    return (Q.shape[0], Q.nnz, ordering, h.hexdigest())


def _analyze(Q: sp.csr_matrix, ordering: str) -> _Symbolic:
    key = _pattern_key(Q, ordering)
    sym = _SYMBOLIC_CACHE.get(key)
    if sym is not None:
        _SYMBOLIC_CACHE.move_to_end(key)
        return sym
    n = Q.shape[0]
    if ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    elif ordering in ("amd", "mindegree"):
        perm = minimum_degree(Q.indptr, Q.indices, n)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    pinv = np.empty(n, dtype=np.int64)
    pinv[perm] = np.arange(n)
    rows = np.repeat(np.arange(n), np.diff(Q.indptr))
    r, c = pinv[rows], pinv[Q.indices]
    keep = np.flatnonzero(r <= c)
    r, c = r[keep], c[keep]
    order = np.lexsort((r, c))
    sym = _Symbolic()
    sym.n = n
    sym.perm = perm
    sym.src = keep[order]
    sym.Ci = np.ascontiguousarray(r[order], dtype=np.int64)
    sym.Cp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(c, minlength=n), out=sym.Cp[1:])
    sym.parent = _etree(n, sym.Cp, sym.Ci)
    counts = _column_counts(n, sym.Cp, sym.Ci, sym.parent)
    sym.Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=sym.Lp[1:])
    _SYMBOLIC_CACHE[key] = sym
    if len(_SYMBOLIC_CACHE) > _CACHE_SIZE:
        _SYMBOLIC_CACHE.popitem(last=False)
    return sym


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

class CholeskyFactor:
    """Sparse Cholesky factor ``Q[perm][:, perm] = L L^T``.

    Instances are immutable; solves allocate their own work arrays and may
    run concurrently against one factor.
    """

    def __init__(self, perm, Lp, Li, Lx):
        self.perm = perm
        self._Lp, self._Li, self._Lx = Lp, Li, Lx
        self.logdiag = np.log(Lx[Lp[:-1]])
        self.n = len(perm)

    @property
    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self._Lx, self._Li, self._Lp), shape=(self.n, self.n))

    @property
    def nnz(self) -> int:
        return int(self._Lp[-1])

    def _as2d(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: factor is {self.n}, right-hand side has {b.shape[0]} rows")
        return b.reshape(self.n, -1), b.ndim == 1

    def solve(self, b) -> np.ndarray:
        """Solve ``Q y = b`` for a vector or a matrix of right-hand sides."""
        B, vec = self._as2d(b)
        X = np.ascontiguousarray(B[self.perm])
        _lsolve(self.n, self._Lp, self._Li, self._Lx, X)
        _ltsolve(self.n, self._Lp, self._Li, self._Lx, X)
        out = np.empty_like(X)
        out[self.perm] = X
        return out[:, 0] if vec else out

    def solve_L(self, b) -> np.ndarray:
        """Return ``L^{-1} P b``; ``||solve_L(b)||^2 = b^T Q^{-1} b``."""
        B, vec = self._as2d(b)
        X = np.ascontiguousarray(B[self.perm])
        _lsolve(self.n, self._Lp, self._Li, self._Lx, X)
        return X[:, 0] if vec else X

    def solve_Lt(self, u) -> np.ndarray:
        """Return ``P^T L^{-T} u``; for standard normal u the result has precision Q."""
        U, vec = self._as2d(u)
        X = np.ascontiguousarray(U.copy())
        _ltsolve(self.n, self._Lp, self._Li, self._Lx, X)
        out = np.empty_like(X)
        out[self.perm] = X
        return out[:, 0] if vec else out

    def logdet(self) -> float:
        """log |Q| = 2 sum log L_ii."""
        return 2.0 * float(np.sum(self.logdiag))


def cholesky(Q, ordering: str = "amd") -> CholeskyFactor:
    """Factor the sparse SPD matrix ``Q``.

    Parameters
    ----------
    Q : sparse or dense (n, n) array
        Symmetric; only the upper triangle of the permuted matrix is read.
    ordering : {"amd", "natural"}
        Fill-reducing minimum-degree ordering or the identity.

    Raises
    ------
    NotPositiveDefiniteError
        With the index of the failing pivot.
    """
    Q = _canonical(Q)
    sym = _analyze(Q, ordering)
    Cx = np.ascontiguousarray(Q.data[sym.src], dtype=np.float64)
    if not np.all(np.isfinite(Cx)):
        raise ValueError("matrix has non-finite entries")
    Li, Lx, fail, val = _numeric(sym.n, sym.Cp, sym.Ci, Cx, sym.parent, sym.Lp)
    if fail >= 0:
        raise NotPositiveDefiniteError(sym.perm[fail], val)
    return CholeskyFactor(sym.perm, sym.Lp, Li, Lx)


def solve(factor: CholeskyFactor, b) -> np.ndarray:
    return factor.solve(b)


def logdet(factor: CholeskyFactor) -> float:
    return factor.logdet()


def logdet_diff(factor_a: CholeskyFactor, factor_b: CholeskyFactor) -> float:
    """log|A| - log|B| from two factors, robust to widely spread diagonals.

    Both log-diagonals are sorted ascending, paired, and the pairwise
    differences are accumulated in increasing absolute value.
    """
    if factor_a.n != factor_b.n:
        raise ValueError(f"dimension mismatch: {factor_a.n} vs {factor_b.n}")
    diff = np.sort(factor_a.logdiag) - np.sort(factor_b.logdiag)
    diff = diff[np.argsort(np.abs(diff), kind="stable")]
    total = 0.0
    for v in diff.tolist():
        total += v
    return 2.0 * total


def fill_in(factor: CholeskyFactor, Q) -> int:
    """Number of entries of L beyond the lower triangle of Q."""
    return factor.nnz - (sp.tril(sp.csr_matrix(Q)).nnz)
