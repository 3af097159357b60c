"""scikit-learn compatible regressor wrapping :func:`nestedspde.inference.fit`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import build_spec
from .harmonics import ScalarHarmonicBasis
from .inference import FitOptions, ObservationSet, TrendModel, fit, kriging
from .mesh import build_icosphere, build_planar_mesh, lonlat_to_xyz


class NestedSPDERegressor(RegressorMixin, BaseEstimator):
    """Kriging with a nested SPDE field model.

    Parameters
    ----------
    domain : {"sphere", "plane"}
        On the sphere ``X`` holds (longitude, latitude) in degrees or unit
        vectors; in the plane it holds (x, y).
    subdivisions : int
        Icosphere refinement level for the sphere mesh.
    plane_nx : int
        Nodes per side of the planar mesh, which covers the bounding box of
        the training inputs widened by ``plane_margin`` times its extent.
    alpha : int
        Order of the single L1 factor.
    kappa2_init, b_init : float
        Starting values of kappa^2 and b.
    kappa2_order, b_order : int or None
        Harmonic order of the log-linear kappa^2 and b fields (sphere only);
        None keeps the parameter constant.
    B_order : int or None
        Vector harmonic order of the drift field B (sphere only, >= 1).
    axially_symmetric : bool
        Keep only m = 0 terms in all bases.
    trend_order : int or None
        Harmonic order of the mean; None fits a constant.
    max_iter, gtol, staged
        Optimiser settings, see :class:`FitOptions`.

    Attributes
    ----------
    fitted_ : FittedModel
    mesh_ : TriangularMesh
    params_ : dict
        Packed parameter estimates by name.
    sigma2_ : float
    log_likelihood_, aic_, bic_ : float
    """

    def __init__(self, domain="sphere", subdivisions=3, plane_nx=41, plane_margin=0.1, alpha=2,
                 kappa2_init=4.0, b_init=1.0, kappa2_order=None, b_order=None, B_order=None,
                 axially_symmetric=False, trend_order=None, max_iter=2000, gtol=1e-5, staged=True):
        self.domain = domain
        self.subdivisions = subdivisions
        self.plane_nx = plane_nx
        self.plane_margin = plane_margin
        self.alpha = alpha
        self.kappa2_init = kappa2_init
        self.b_init = b_init
        self.kappa2_order = kappa2_order
        self.b_order = b_order
        self.B_order = B_order
        self.axially_symmetric = axially_symmetric
        self.trend_order = trend_order
        self.max_iter = max_iter
        self.gtol = gtol
        self.staged = staged

    def _points(self, X):
        if self.domain == "sphere":
            if X.shape[1] == 2:
                if np.any(np.abs(X[:, 0]) > 360) or np.any(np.abs(X[:, 1]) > 90):
                    raise ValueError("longitude/latitude out of range")
                return lonlat_to_xyz(X[:, 0], X[:, 1])
            if X.shape[1] == 3:
                norms = np.linalg.norm(X, axis=1)
                if np.any(norms == 0):
                    raise ValueError("zero vector cannot be projected to the sphere")
                return X / norms[:, None]
            raise ValueError(f"sphere inputs need 2 or 3 columns, got {X.shape[1]}")
        if X.shape[1] != 2:
            raise ValueError(f"plane inputs need 2 columns, got {X.shape[1]}")
        return X

    def _mesh(self, pts):
        if self.domain == "sphere":
            return build_icosphere(self.subdivisions)
        lo, hi = pts.min(0), pts.max(0)
        pad = self.plane_margin * np.maximum(hi - lo, 1e-6)
        return build_planar_mesh((lo[0] - pad[0], hi[0] + pad[0]), (lo[1] - pad[1], hi[1] + pad[1]),
                                 self.plane_nx, self.plane_nx)

    def _template(self, manifold):
        l1 = {"alpha": self.alpha, "kappa2": self.kappa2_init}
        if self.kappa2_order is not None:
            l1["order"] = self.kappa2_order
        l2 = {"b": self.b_init}
        if self.b_order is not None:
            l2["b_order"] = self.b_order
        if self.B_order is not None:
            l2["B_order"] = self.B_order
        return build_spec({"l1": [l1], "l2": [l2], "axially_symmetric": self.axially_symmetric}, manifold)

    def fit(self, X, y):
        if self.domain not in ("sphere", "plane"):
            raise ValueError(f"domain must be 'sphere' or 'plane', got {self.domain!r}")
        X, y = check_X_y(X, y, y_numeric=True)
        if len(y) < 2:
            raise ValueError("at least two observations are needed")
        self.n_features_in_ = X.shape[1]
        pts = self._points(X)
        mesh = self._mesh(pts)
        template = self._template(mesh.manifold)
        basis = None
        if self.trend_order is not None:
            if self.domain != "sphere":
                raise ValueError("trend_order requires domain='sphere'")
            basis = ScalarHarmonicBasis(self.trend_order, self.axially_symmetric)
        options = FitOptions(max_iter=self.max_iter, gtol=self.gtol, staged=self.staged)
        fitted = fit(mesh, template, TrendModel(basis), ObservationSet(pts, y), options)
        self.mesh_ = mesh
        self.fitted_ = fitted
        self.params_ = fitted.params
        self.sigma2_ = fitted.sigma2
        self.mu_ = fitted.mu
        self.log_likelihood_ = fitted.log_likelihood
        self.aic_ = fitted.aic
        self.bic_ = fitted.bic
        return self

    def predict(self, X, return_std=False):
        """Kriging mean (and standard deviation) of the latent field at ``X``."""
        check_is_fitted(self, "fitted_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        mean, sd = kriging(self.fitted_, self._points(X))
        return (mean, sd) if return_std else mean
