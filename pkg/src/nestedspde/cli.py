"""Command-line interface: ``nestedspde {mesh,simulate,fit,predict,select,diagnose}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Failures also print a one-line JSON record on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .inference import (FittedModel, ObservationSet, ParameterMap, fit, fitted_at, kriging,
                        residual_diagnostics, select_models)
from .io import (DataError, atomic_write_text, header_block, location_columns, read_locations,
                 read_observations, read_table, write_observations, write_table)
from .mesh import MeshError, TriangularMesh, evaluate_basis, format_mesh, lonlat_to_xyz
from .spde import SpecificationError, discretize, simulate

log = logging.getLogger("nestedspde")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class NumericalError(RuntimeError):
    pass


def _meta(command: str, cfg, seed) -> dict:
    hashes = ",".join(c.sha256 for c in cfg) if isinstance(cfg, list) else cfg.sha256
    return {"software": "nestedspde", "version": __version__, "command": command,
            "config_sha256": hashes, "seed": seed}


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    return cfg.output_dir if cfg.output_dir is not None else Path.cwd()


def _seed(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.seed if cfg.seed is not None else 0


def _mesh(cfg: RunConfig) -> TriangularMesh:
    try:
        return cfg.build_mesh()
    except MeshError as exc:
        raise DataError(f"mesh: {exc}") from exc
    except (OSError, ValueError) as exc:
        raise ConfigError(f"mesh: {exc}", None, "mesh") from exc


def _spec(cfg: RunConfig, mesh):
    try:
        return cfg.build_spec(mesh.manifold)
    except SpecificationError as exc:
        raise ConfigError(str(exc), None, "model") from exc


def _observations(cfg: RunConfig, mesh) -> ObservationSet:
    if cfg.data_path is None:
        raise ConfigError("this command needs [data] observations", "observations", "data")
    obs = read_observations(cfg.data_path, mesh.manifold)
    try:
        obs.basis_matrix(mesh)
    except MeshError as exc:
        raise DataError(f"observations cannot be located on the mesh: {exc}") from exc
    return obs


def _fit_with(fn):
    try:
        return fn()
    except (np.linalg.LinAlgError, ValueError) as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise NumericalError(str(exc)) from exc


def _params_rows(fitted: FittedModel):
    rows = [(n, "psi", float(v)) for n, v in zip(fitted.names, fitted.psi)]
    rows += [(n, "mu", float(v)) for n, v in zip(fitted.mu_names, fitted.mu)]
    rows += [
        ("log_marginal_posterior", "summary", float(fitted.log_likelihood)),
        ("aic", "summary", float(fitted.aic)),
        ("bic", "summary", float(fitted.bic)),
        ("n_params", "summary", int(fitted.n_params)),
        ("n_obs", "summary", int(fitted.n_obs)),
        ("converged", "summary", bool(fitted.converged)),
    ]
    return rows


def _write_params(path, fitted: FittedModel, meta: dict):
    write_table(path, ["name", "kind", "value"], _params_rows(fitted), meta)


def _load_fitted(cfg: RunConfig, mesh, params_path) -> FittedModel:
    table = read_table(params_path)
    if table.columns[:3] != ["name", "kind", "value"]:
        raise DataError(f"{params_path}: not a parameter file")
    spec = _spec(cfg, mesh)
    names = ParameterMap(spec).names
    stored = [r for r in table.rows if r[1] == "psi"]
    stored_names = [r[0] for r in stored]
    if stored_names != list(names):
        raise ConfigError(
            f"parameter file does not match the model shape: expected {list(names)}, found {stored_names}",
            None, "model",
        )
    psi = np.array([float(r[2]) for r in stored])
    summary = {r[0]: r[2] for r in table.rows if r[1] == "summary"}
    trend = cfg.build_trend(mesh.manifold)
    obs = _observations(cfg, mesh)
    return _fit_with(lambda: fitted_at(mesh, spec, trend, obs, psi,
                                       converged=summary.get("converged", "true") == "true"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_mesh(args) -> int:
    cfg = load_config(args.config[0])
    mesh = _mesh(cfg)
    out = _out_dir(args, cfg)
    atomic_write_text(out / "mesh.txt", header_block(_meta("mesh", cfg, _seed(args, cfg))) + format_mesh(mesh))
    log.info("mesh: %d vertices, %d triangles", mesh.n_vertices, mesh.n_triangles)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config[0])
    mesh = _mesh(cfg)
    spec = _spec(cfg, mesh)
    free = [n for n in ParameterMap(spec).names if n != "log_sigma2"]
    if free:
        raise ConfigError(f"simulate needs fully specified parameters; free: {', '.join(free)}", None, "model")
    sim = cfg.simulate
    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    n_samples = int(sim.get("n_samples", 1))
    if n_samples < 1:
        raise ConfigError("'n_samples' in [simulate] must be at least 1", "n_samples", "simulate")
    model = _fit_with(lambda: discretize(mesh, spec))
    x = _fit_with(lambda: simulate(model, float(sim.get("mean", 0.0)), rng, n_samples))
    x = x.reshape(mesh.n_vertices, n_samples)
    out = _out_dir(args, cfg)
    meta = _meta("simulate", cfg, seed)
    names, coords = location_columns(mesh.points3d if mesh.is_sphere else mesh.vertices, mesh.manifold)
    cols = ["node", *names, *[f"sample_{j}" for j in range(n_samples)]]
    rows = [[i, *coords[i], *x[i]] for i in range(mesh.n_vertices)]
    write_table(out / "samples.csv", cols, rows, meta)
    n_obs = int(sim.get("n_obs", 0))
    if n_obs > 0:
        if mesh.is_sphere:
            pts = rng.normal(size=(n_obs, 3))
            pts /= np.linalg.norm(pts, axis=1)[:, None]
        else:
            lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
            pts = lo + (hi - lo) * rng.random((n_obs, 2))
        sigma2 = float(sim.get("sigma2", 0.0))
        if sigma2 < 0:
            raise ConfigError("'sigma2' in [simulate] must be non-negative", "sigma2", "simulate")
        y = evaluate_basis(mesh, pts) @ x[:, 0] + math.sqrt(sigma2) * rng.standard_normal(n_obs)
        write_observations(out / "observations.csv", pts, y, mesh.manifold, meta)
    return EXIT_OK


def _fit_config(cfg: RunConfig, mesh, warm=None) -> FittedModel:
    spec = _spec(cfg, mesh)
    trend = cfg.build_trend(mesh.manifold)
    obs = _observations(cfg, mesh)
    return _fit_with(lambda: fit(mesh, spec, trend, obs, cfg.fit_options(), warm_start=warm))


def _write_fit(out: Path, fitted: FittedModel, meta: dict, stem="params"):
    _write_params(out / f"{stem}.csv", fitted, meta)
    rows = [(s.stage, len(s.names), s.log_posterior, s.n_iter, bool(s.converged)) for s in fitted.stages]
    write_table(out / f"{stem.replace('params', 'fit_log')}.csv",
                ["stage", "n_packed", "log_marginal_posterior", "n_iter", "converged"], rows, meta)


def cmd_fit(args) -> int:
    cfg = load_config(args.config[0])
    mesh = _mesh(cfg)
    fitted = _fit_config(cfg, mesh)
    _write_fit(_out_dir(args, cfg), fitted, _meta("fit", cfg, _seed(args, cfg)))
    log.info("fit: log marginal posterior %.6f, converged %s", fitted.log_likelihood, fitted.converged)
    return EXIT_OK


def _query_points(cfg: RunConfig, mesh):
    q = cfg.predict.get("query", "nodes")
    if q == "nodes":
        return mesh.points3d if mesh.is_sphere else mesh.vertices
    if q == "grid":
        step = float(cfg.predict.get("grid_step", 5.0 if mesh.is_sphere else 0.1))
        if not step > 0:
            raise ConfigError("'grid_step' in [predict] must be positive", "grid_step", "predict")
        if mesh.is_sphere:
            lon = np.arange(-180.0 + step / 2, 180.0, step)
            lat = np.arange(-90.0 + step / 2, 90.0, step)
            LO, LA = np.meshgrid(lon, lat)
            return lonlat_to_xyz(LO.ravel(), LA.ravel())
        lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
        gx = np.arange(lo[0], hi[0] + 1e-12, step)
        gy = np.arange(lo[1], hi[1] + 1e-12, step)
        GX, GY = np.meshgrid(gx, gy)
        return np.column_stack([GX.ravel(), GY.ravel()])
    base = cfg.source.parent if cfg.source is not None else Path.cwd()
    return read_locations(base / q, mesh.manifold)


def cmd_predict(args) -> int:
    cfg = load_config(args.config[0])
    if not args.params:
        raise ConfigError("predict needs --params PATH", "params", "command line")
    mesh = _mesh(cfg)
    fitted = _load_fitted(cfg, mesh, args.params)
    pts = _query_points(cfg, mesh)
    mean, sd = _fit_with(lambda: kriging(fitted, pts))
    names, coords = location_columns(pts, mesh.manifold)
    rows = np.column_stack([coords, mean, sd]).tolist()
    write_table(_out_dir(args, cfg) / "predictions.csv", [*names, "mean", "sd"], rows,
                _meta("predict", cfg, _seed(args, cfg)))
    return EXIT_OK


def cmd_select(args) -> int:
    cfgs = [load_config(p) for p in args.config]
    first = cfgs[0]
    for c in cfgs[1:]:
        if c.mesh != first.mesh or c.data_path != first.data_path:
            raise ConfigError(f"configuration {c.source} does not share the mesh and data of {first.source}",
                              None, "mesh")
    names = [c.model_name for c in cfgs]
    if len(set(names)) != len(names):
        raise ConfigError("model names in [model] name must be distinct for select", "name", "model")
    mesh = _mesh(first)
    obs = _observations(first, mesh)
    trend = first.build_trend(mesh.manifold)
    templates = {c.model_name: _spec(c, mesh) for c in cfgs}
    rows = select_models(mesh, templates, trend, obs, first.fit_options())
    out = _out_dir(args, first)
    meta = _meta("select", cfgs, _seed(args, first))
    table = []
    for r in rows:
        table.append((r.name, r.n_params, r.log_likelihood, r.aic, r.bic, bool(r.converged), r.error or ""))
        if r.fitted is not None:
            _write_fit(out, r.fitted, meta, f"params_{r.name}")
    write_table(out / "selection.csv",
                ["model", "n_params", "log_marginal_posterior", "aic", "bic", "converged", "error"], table, meta)
    if all(r.fitted is None for r in rows):
        raise NumericalError("every model fit failed: " + "; ".join(f"{r.name}: {r.error}" for r in rows))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config[0])
    if not args.params:
        raise ConfigError("diagnose needs --params PATH", "params", "command line")
    mesh = _mesh(cfg)
    fitted = _load_fitted(cfg, mesh, args.params)
    d = cfg.diagnose
    n_bins = int(d.get("n_bins", 15))
    if n_bins < 1:
        raise ConfigError("'n_bins' in [diagnose] must be at least 1", "n_bins", "diagnose")
    rep = _fit_with(lambda: residual_diagnostics(fitted, None, n_bins, d.get("max_distance")))
    out = _out_dir(args, cfg)
    meta = _meta("diagnose", cfg, _seed(args, cfg))
    lower = np.concatenate([[0.0], rep.bin_edges[:-1]])
    upper = np.concatenate([[0.0], rep.bin_edges[1:]])
    rows = [(i, lower[i], upper[i], rep.bin_centers[i], rep.covariance[i], int(rep.counts[i]), rep.std_error[i])
            for i in range(len(rep.counts))]
    write_table(out / "residual_covariance.csv",
                ["bin", "lower", "upper", "center", "covariance", "count", "std_error"], rows, meta)
    names, coords = location_columns(mesh.points3d if mesh.is_sphere else mesh.vertices, mesh.manifold)
    rows = [(i, *coords[i], int(rep.node_counts[i]), rep.local_mean[i], rep.local_sd[i])
            for i in range(mesh.n_vertices)]
    write_table(out / "local_stats.csv", ["node", *names, "count", "mean", "sd"], rows, meta)
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "select": cmd_select, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nestedspde", description="Nested SPDE Gaussian random field models")
    parser.add_argument("--version", action="version", version=f"nestedspde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", required=True, metavar="PATH",
                       help="TOML run configuration (repeat for select)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, metavar="DIR")
        p.add_argument("--threads", type=int, default=None, metavar="N")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("predict", "diagnose"):
            p.add_argument("--params", metavar="PATH", help="parameter file written by fit")
    return parser


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1", "threads", "command line")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _error(args, exc, code) -> int:
    record = {"status": "error", "exit_code": code, "command": getattr(args, "command", None),
              "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        record["key"] = exc.key
        record["location"] = exc.location
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "select" and len(args.config) > 1:
        return _error(args, ConfigError("--config may be given once for this command", "config",
                                        "command line"), EXIT_CONFIG)
    try:
        _set_threads(args.threads)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _error(args, exc, EXIT_CONFIG)
    except (DataError, MeshError) as exc:
        return _error(args, exc, EXIT_DATA)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _error(args, exc, EXIT_NUMERIC)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
