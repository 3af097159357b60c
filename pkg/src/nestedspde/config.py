"""Run configuration files (TOML) for the command-line interface.

Every section has a fixed key set; unknown keys are rejected with their
location so typos never silently fall back to defaults.
"""
from __future__ import annotations

import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .harmonics import ScalarHarmonicBasis, VectorHarmonicBasis
from .inference import FitOptions, TrendModel
from .mesh import TriangularMesh, build_icosphere, build_planar_mesh, load_mesh
from .spde import L1Factor, L2Factor, OperatorSystemSpec, ParamField

Y00 = 1.0 / math.sqrt(4.0 * math.pi)


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``location`` point at the problem."""

    def __init__(self, message: str, key: Optional[str] = None, location: Optional[str] = None):
        self.key = key
        self.location = location
        super().__init__(message)


# allowed keys per section: name -> accepted python types
_SCHEMA = {
    "": {"seed": (int,), "mesh": (dict,), "model": (dict,), "trend": (dict,), "data": (dict,),
         "fit": (dict,), "simulate": (dict,), "predict": (dict,), "diagnose": (dict,), "output": (dict,)},
    "mesh": {"kind": (str,), "subdivisions": (int,), "x_range": (list,), "y_range": (list,),
             "nx": (int,), "ny": (int,), "path": (str,)},
    "model": {"name": (str,), "phi": (int, float), "axially_symmetric": (bool,), "l1": (list,), "l2": (list,)},
    "model.l1": {"alpha": (int,), "kappa2": (int, float), "order": (int,), "free": (bool,)},
    "model.l2": {"b": (int, float), "b_order": (int,), "b_free": (bool,), "B": (list,),
                 "B_order": (int,), "B_free": (bool,), "allow_zero_b": (bool,)},
    "trend": {"order": (int,), "axially_symmetric": (bool,), "prior_mean": (int, float, list),
              "prior_precision": (int, float, list)},
    "data": {"observations": (str,)},
    "fit": {"max_iter": (int,), "gtol": (int, float), "ftol": (int, float), "fd_step": (int, float),
            "staged": (bool,), "sigma2_init": (int, float), "auto_scale": (bool,)},
    "simulate": {"mean": (int, float), "n_samples": (int,), "n_obs": (int,), "sigma2": (int, float)},
    "predict": {"query": (str,), "grid_step": (int, float)},
    "diagnose": {"n_bins": (int,), "max_distance": (int, float)},
    "output": {"dir": (str,)},
}


def _check_section(table: dict, section: str, where: str):
    allowed = _SCHEMA[section]
    for key, value in table.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{where or 'top level'}]", key, where or "top level")
        types = allowed[key]
        if isinstance(value, bool) and bool not in types:
            raise ConfigError(f"key '{key}' in [{where or 'top level'}] has the wrong type", key, where)
        if not isinstance(value, types):
            raise ConfigError(
                f"key '{key}' in [{where or 'top level'}] must be {' or '.join(t.__name__ for t in types)}",
                key, where or "top level",
            )


@dataclass
class MeshConfig:
    kind: str = "icosphere"
    subdivisions: int = 3
    x_range: tuple = (0.0, 1.0)
    y_range: tuple = (0.0, 1.0)
    nx: int = 11
    ny: int = 11
    path: Optional[Path] = None

    @property
    def manifold(self) -> str:
        if self.kind == "icosphere":
            return "sphere"
        if self.kind == "planar":
            return "plane"
        return "unknown"

    def build(self) -> TriangularMesh:
        if self.kind == "icosphere":
            return build_icosphere(self.subdivisions)
        if self.kind == "planar":
            return build_planar_mesh(self.x_range, self.y_range, self.nx, self.ny)
        return load_mesh(self.path)


@dataclass
class RunConfig:
    """Parsed configuration plus the raw text hash used in output headers."""
    mesh: MeshConfig
    model: dict
    trend: dict
    data_path: Optional[Path]
    fit: dict
    simulate: dict
    predict: dict
    diagnose: dict
    output_dir: Optional[Path]
    seed: Optional[int]
    sha256: str
    source: Optional[Path] = None
    model_name: str = "model"
    raw: dict = field(default_factory=dict)

    # -- builders -------------------------------------------------------
    def build_mesh(self) -> TriangularMesh:
        return self.mesh.build()

    def build_spec(self, manifold: str) -> OperatorSystemSpec:
        return build_spec(self.model, manifold)

    def build_trend(self, manifold: str) -> TrendModel:
        t = self.trend
        order = t.get("order")
        basis = None
        if order is not None:
            if manifold != "sphere":
                raise ConfigError("trend order requires a sphere mesh", "order", "trend")
            basis = ScalarHarmonicBasis(order, t.get("axially_symmetric", False))
        try:
            return TrendModel(basis, t.get("prior_mean"), t.get("prior_precision"))
        except ValueError as exc:
            raise ConfigError(str(exc), None, "trend") from exc

    def fit_options(self) -> FitOptions:
        f = self.fit
        return FitOptions(
            max_iter=f.get("max_iter", 2000), gtol=float(f.get("gtol", 1e-5)), ftol=float(f.get("ftol", 1e-9)),
            fd_step=float(f.get("fd_step", 1e-4)), staged=f.get("staged", True),
            sigma2_init=f.get("sigma2_init"), auto_scale=f.get("auto_scale", True),
        )


def _positive(value, key, where):
    if not value > 0:
        raise ConfigError(f"'{key}' in [{where}] must be positive", key, where)
    return float(value)


def _order(value, key, where, minimum=0):
    if value < minimum:
        raise ConfigError(f"'{key}' in [{where}] must be at least {minimum}", key, where)
    return int(value)


def build_spec(model: dict, manifold: str) -> OperatorSystemSpec:
    """Operator template from the ``[model]`` table."""
    sym = model.get("axially_symmetric", False)
    l1 = []
    for i, f in enumerate(model.get("l1", [])):
        where = f"model.l1[{i}]"
        kappa2 = _positive(f.get("kappa2", 1.0), "kappa2", where)
        free = f.get("free", True)
        if "order" in f:
            if manifold != "sphere":
                raise ConfigError(f"'order' in [{where}] requires a sphere mesh", "order", where)
            basis = ScalarHarmonicBasis(_order(f["order"], "order", where), sym)
            coefs = [0.0] * len(basis)
            coefs[0] = math.log(kappa2) / Y00
            field_ = ParamField.loglinear(basis, coefs, free)
        else:
            field_ = ParamField.constant(kappa2, free)
        l1.append(L1Factor(field_, _order(f.get("alpha", 2), "alpha", where, 1)))
    if not l1:
        raise ConfigError("[model] needs at least one [[model.l1]] factor", "l1", "model")
    l2 = []
    for i, f in enumerate(model.get("l2", [])):
        where = f"model.l2[{i}]"
        allow_zero = f.get("allow_zero_b", False)
        b = float(f.get("b", 1.0))
        b_free = f.get("b_free", True)
        if "b_order" in f:
            if manifold != "sphere":
                raise ConfigError(f"'b_order' in [{where}] requires a sphere mesh", "b_order", where)
            basis = ScalarHarmonicBasis(_order(f["b_order"], "b_order", where), sym)
            coefs = [0.0] * len(basis)
            coefs[0] = math.log(_positive(b, "b", where)) / Y00
            b_field = ParamField.loglinear(basis, coefs, b_free)
        else:
            if b_free or not allow_zero:
                _positive(b, "b", where)
            b_field = ParamField.constant(b, b_free)
        B_field = None
        if "B_order" in f and "B" in f:
            raise ConfigError(f"give either 'B' or 'B_order' in [{where}], not both", "B", where)
        if "B_order" in f:
            if manifold != "sphere":
                raise ConfigError(f"'B_order' in [{where}] requires a sphere mesh", "B_order", where)
            order = _order(f["B_order"], "B_order", where)
            if order >= 1:
                B_field = ParamField.vectorlinear(VectorHarmonicBasis(order, sym), None, f.get("B_free", True))
        elif "B" in f:
            B_field = ParamField.constant([float(c) for c in f["B"]], f.get("B_free", True))
        try:
            l2.append(L2Factor(b_field, B_field, allow_zero))
        except ValueError as exc:
            raise ConfigError(str(exc), "b", where) from exc
    phi = _positive(model.get("phi", 1.0), "phi", "model")
    try:
        return OperatorSystemSpec(tuple(l1), tuple(l2), phi)
    except ValueError as exc:
        raise ConfigError(str(exc), None, "model") from exc


def parse_config(text: str, base_dir: Optional[Path] = None, source: Optional[Path] = None) -> RunConfig:
    """Validate and parse configuration text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    _check_section(raw, "", "")
    for name in ("mesh", "model", "trend", "data", "fit", "simulate", "predict", "diagnose", "output"):
        _check_section(raw.get(name, {}), name, name)
    model = raw.get("model", {})
    for sub in ("l1", "l2"):
        for i, entry in enumerate(model.get(sub, [])):
            if not isinstance(entry, dict):
                raise ConfigError(f"[[model.{sub}]] entries must be tables", sub, "model")
            _check_section(entry, f"model.{sub}", f"model.{sub}[{i}]")

    m = raw.get("mesh", {})
    kinds = {"icosphere", "planar", "file"}
    kind = m.get("kind", "icosphere")
    if kind not in kinds:
        raise ConfigError(f"mesh kind must be one of {sorted(kinds)}", "kind", "mesh")
    sources = {"icosphere": {"subdivisions"}, "planar": {"x_range", "y_range", "nx", "ny"}, "file": {"path"}}
    for other, keys in sources.items():
        if other != kind and keys & set(m):
            bad = sorted(keys & set(m))[0]
            raise ConfigError(f"key '{bad}' does not apply to mesh kind '{kind}' (exactly one mesh source)", bad, "mesh")
    mesh = MeshConfig(kind=kind)
    if kind == "icosphere":
        mesh.subdivisions = _order(m.get("subdivisions", 3), "subdivisions", "mesh")
    elif kind == "planar":
        mesh.x_range = tuple(float(v) for v in m.get("x_range", (0.0, 1.0)))
        mesh.y_range = tuple(float(v) for v in m.get("y_range", (0.0, 1.0)))
        mesh.nx, mesh.ny = m.get("nx", 11), m.get("ny", 11)
    else:
        if not m.get("path"):
            raise ConfigError("mesh kind 'file' needs a non-empty 'path'", "path", "mesh")
        mesh.path = base_dir / m["path"]

    for i, f in enumerate(model.get("l1", [])):
        if "order" in f:
            _order(f["order"], "order", f"model.l1[{i}]")
    data = raw.get("data", {})
    if "observations" in data and not data["observations"]:
        raise ConfigError("'observations' in [data] must be a non-empty path", "observations", "data")
    data_path = base_dir / data["observations"] if data.get("observations") else None
    out = raw.get("output", {})
    if "dir" in out and not out["dir"]:
        raise ConfigError("'dir' in [output] must be non-empty", "dir", "output")
    output_dir = base_dir / out["dir"] if out.get("dir") else None
    return RunConfig(
        mesh=mesh, model=model, trend=raw.get("trend", {}), data_path=data_path, fit=raw.get("fit", {}),
        simulate=raw.get("simulate", {}), predict=raw.get("predict", {}), diagnose=raw.get("diagnose", {}),
        output_dir=output_dir, seed=raw.get("seed"), sha256=hashlib.sha256(text.encode()).hexdigest(),
        source=source, model_name=model.get("name", source.stem if source else "model"), raw=raw,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration file {path}: {exc.strerror}") from exc
    return parse_config(text, path.parent, path)
