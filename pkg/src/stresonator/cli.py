"""Command-line front end: simulate, fit, smooth, predict, spectrum, basis-check.

Every command reads one config document (YAML or JSON), resolves it
against the defaults below plus command-line overrides, and writes its
outputs together with ``manifest.json``.  The manifest can be passed back
as ``--config`` to reproduce the run.

Exit codes: 0 success, 2 usage, 3 config error, 4 data error, 5 numerical
failure (including fits where no restart converged).
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .basis import DomainError, fd_convergence_order, fd_eigen_residual, gram_deviation
from .estimation import FitError, Objective, ParamVector, fit
from .inference import (
    NumericalError,
    amplitude_map,
    filter_pass,
    posterior_at,
    smooth_pass,
    stationary_prior,
)
from .io import (
    PLOT_SCRIPT,
    ConfigError,
    DataError,
    dump_config,
    load_config,
    model_from_config,
    read_observations,
    read_points,
    regular_grid,
    time_grid,
    write_design_csv,
    write_grid_csv,
    write_manifest,
    write_ndjson,
    write_observations,
    write_rows,
    coord_names,
)
from .model import assemble_system, model_spectral_density
from .simulator import SimulationPlan, field_values, sample_observations, sample_trajectory

logger = logging.getLogger("stresonator")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "t0": None,
    "components": "all",
    "data": None,
    "model": None,
    "simulate": {"times": None, "per_step": 25, "locations": None, "initial": "stationary"},
    "fit": {
        "restarts": 10,
        "active": None,
        "log_range": 2.0,
        "scales": None,
        "gtol": 1e-2,
        "maxiter": 200,
        "explore_iter": 10,
        "polish": 1,
        "fd_step": 1e-4,
        "method": "covariance",
    },
    "grid": {"resolution": 101, "times": None, "amplitude": True},
    "predict": {"points": None},
    "spectrum": {"nu_x": None, "nu_t": None},
    "basis_check": {"resolution": 256, "spacings": None, "tolerance": 1e-6},
}


def demo_config() -> dict:
    """The bundled one-dimensional demonstration config."""
    text = resources.files("stresonator").joinpath("data/demo_1d.yaml").read_text(encoding="utf-8")
    import yaml

    return yaml.safe_load(text)


def _merge(defaults: dict, given: dict, where: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise ConfigError("unknown entry", path)
        if isinstance(defaults[key], dict) and key != "model":
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", path)
            out[key] = _merge(defaults[key], value, path)
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults ← config document ← command-line flags."""
    given = load_config(args.config) if args.config else demo_config()
    cfg = _merge(DEFAULTS, given)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "restarts", None) is not None:
        cfg["fit"]["restarts"] = args.restarts
    if args.grid is not None:
        cfg["grid"]["resolution"] = args.grid
    if args.components is not None:
        cfg["components"] = args.components
    if getattr(args, "data", None) is not None:
        cfg["data"] = args.data
    if getattr(args, "points", None) is not None:
        cfg["predict"]["points"] = args.points
    if cfg["model"] is None:
        raise ConfigError("missing entry", "model")
    _int(cfg, "seed", minimum=0)
    _int(cfg["grid"], "resolution", "grid", minimum=2)
    return cfg


def _int(section: dict, key: str, where: str = "", minimum: int | None = None) -> int:
    value = section[key]
    path = f"{where}.{key}" if where else key
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"expected an integer, got {value!r}", path)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be at least {minimum}", path)
    return int(value)


def _float(section: dict, key: str, where: str, positive: bool = True) -> float:
    value = section[key]
    path = f"{where}.{key}"
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", path) from None
    if positive and not out > 0:
        raise ConfigError("must be positive", path)
    return out


def _selector(cfg: dict, model):
    """``'all'`` or a list of component names."""
    sel = cfg["components"]
    if sel in (None, "all"):
        return "all", list(model.component_names)
    names = [s.strip() for s in sel.split(",")] if isinstance(sel, str) else list(sel)
    unknown = [n for n in names if n not in model.component_names]
    if unknown or not names:
        raise ConfigError(f"unknown component(s) {unknown}; model has {model.component_names}", "components")
    return names, names


def _data(cfg: dict, model):
    if not cfg["data"]:
        raise ConfigError("no observation file given (--data)", "data")
    return read_observations(cfg["data"], model.domain)


def _t0(cfg: dict, first_time: float) -> float:
    if cfg["t0"] is None:
        return float(first_time)
    t0 = float(cfg["t0"])
    if t0 > first_time:
        raise ConfigError(f"prior time {t0} is after the first step {first_time}", "t0")
    return t0


def _finish(out: Path, command: str, cfg: dict, outputs: list, plot: bool = False) -> None:
    if plot:
        (out / "plot_grid.py").write_text(PLOT_SCRIPT, encoding="utf-8")
        outputs = outputs + ["plot_grid.py"]
    write_manifest(out, command, cfg, outputs + ["manifest.json"])
    logger.info("wrote %s", ", ".join(sorted(outputs)))


def cmd_simulate(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    sim = cfg["simulate"]
    if sim["times"] is None:
        raise ConfigError("missing entry", "simulate.times")
    times = time_grid(sim["times"], "simulate.times")
    if sim["locations"]:
        _, pts = read_points(sim["locations"], with_time=False)
        locations = [pts] * times.size
    else:
        locations = _int(sim, "per_step", "simulate", minimum=0)
    if cfg["t0"] is not None and float(cfg["t0"]) > times[0]:
        raise ConfigError("prior time is after the first step", "t0")
    try:
        plan = SimulationPlan(model, times, locations, seed=cfg["seed"], t0=cfg["t0"], initial=sim["initial"])
    except ValueError as exc:
        raise ConfigError(str(exc), "simulate") from None
    system = plan.system()
    traj = sample_trajectory(plan, system)
    batch = sample_observations(traj, plan, system)
    write_observations(out / "observations.csv", batch)

    pts = regular_grid(model.domain, cfg["grid"]["resolution"])
    keep = _grid_steps(cfg, times)
    selector, names = _selector(cfg, model)
    cols = {"truth": field_values(traj[keep], model, plan.basis, pts, selector)}
    for name in names:
        cols[f"truth_{name}"] = field_values(traj[keep], model, plan.basis, pts, name)
    write_grid_csv(out / "truth.csv", times[keep], pts, cols)
    logger.info("simulated %d observations over %d steps", batch.n_obs, times.size)
    _finish(out, "simulate", cfg, ["observations.csv", "truth.csv"], plot=True)
    return EXIT_OK


def _grid_steps(cfg: dict, times: np.ndarray) -> np.ndarray:
    """Indices of the steps written to grid files (all by default)."""
    req = cfg["grid"]["times"]
    if req is None:
        return np.arange(times.size)
    want = time_grid(req, "grid.times")
    idx = []
    for t in want:
        hit = np.flatnonzero(np.isclose(times, t, rtol=0, atol=1e-9 * max(1.0, abs(t))))
        if hit.size == 0:
            raise ConfigError(f"time {t} is not a step of this run", "grid.times")
        idx.append(hit[0])
    return np.asarray(idx)


def _active(cfg: dict, model) -> ParamVector:
    active = cfg["fit"]["active"]
    if active is not None and not isinstance(active, list):
        raise ConfigError("expected a list of parameter names", "fit.active")
    try:
        params = ParamVector.from_model(model, active)
    except ValueError as exc:
        raise ConfigError(str(exc), "fit.active") from None
    if active is not None:
        known = set(params.names) | {n.split(".")[-1] for n in params.names}
        unknown = [a for a in active if a not in known]
        if unknown:
            raise ConfigError(f"unknown parameter(s) {unknown}", "fit.active")
    return params


def cmd_fit(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    data = _data(cfg, model)
    t0 = _t0(cfg, data.times[0])
    params = _active(cfg, model)
    fc = cfg["fit"]

    if params.n_active == 0:
        value = Objective(model, data, params, t0=t0, method=fc["method"]).negloglik(params)
        records = [{"type": "summary", "loglik": -value, "params": params.as_dict(), "n_active": 0,
                    "converged": bool(np.isfinite(value)), "n_obs": data.n_obs, "n_steps": data.n_steps}]
        write_ndjson(out / "fit_report.ndjson", records)
        _finish(out, "fit", cfg, ["fit_report.ndjson"])
        return EXIT_OK if np.isfinite(value) else EXIT_NUMERICAL

    restarts = _int(fc, "restarts", "fit", minimum=1)
    explore = fc["explore_iter"]
    if explore is not None:
        explore = _int(fc, "explore_iter", "fit", minimum=1)
    if fc["method"] not in ("covariance", "sqrt"):
        raise ConfigError("expected 'covariance' or 'sqrt'", "fit.method")
    scales = fc["scales"]
    if scales is not None and not isinstance(scales, dict):
        raise ConfigError("expected a mapping of parameter names to scales", "fit.scales")
    res = fit(
        data,
        model,
        restarts=restarts,
        seed=cfg["seed"],
        params=params,
        log_range=_float(fc, "log_range", "fit"),
        scales=scales,
        gtol=_float(fc, "gtol", "fit"),
        maxiter=_int(fc, "maxiter", "fit", minimum=1),
        explore_iter=explore,
        polish=_int(fc, "polish", "fit", minimum=0),
        fd_step=_float(fc, "fd_step", "fit"),
        t0=t0,
        method=fc["method"],
    )
    records = [dict(type="restart", **t.to_record()) for t in res.traces]
    converged = res.any_converged
    records.append({
        "type": "summary",
        "best_restart": res.best_index,
        "loglik": res.loglik,
        "params": res.params.as_dict(),
        "active": res.params.active_names,
        "converged": converged,
        "n_restarts": len(res.traces),
        "n_converged": sum(t.converged for t in res.traces),
        "n_obs": data.n_obs,
        "n_steps": data.n_steps,
    })
    write_ndjson(out / "fit_report.ndjson", records)
    fitted = copy.deepcopy(cfg)
    fitted["model"] = res.model(model).to_config()
    dump_config(out / "fitted.yaml", fitted)
    _finish(out, "fit", cfg, ["fit_report.ndjson", "fitted.yaml"])
    for name, value in res.params.as_dict().items():
        logger.info("%s = %.6g", name, value)
    if not converged:
        logger.error("no restart met the gradient tolerance; best loglik %.6g", res.loglik)
        return EXIT_NUMERICAL
    return EXIT_OK


def _posterior(cfg: dict, model, data, extra_times=()):
    """Filter and smooth ``data`` with prediction-only steps at ``extra_times``."""
    batch = data.with_times(extra_times) if len(extra_times) else data
    t0 = _t0(cfg, batch.times[0])
    basis = model.basis()
    system = assemble_system(model, batch.times, batch.locations, basis, t0=t0)
    prior = stationary_prior(model, basis, t0)
    result = filter_pass(system, batch, prior, noise_var=model.noise_var)
    return batch, basis, result, smooth_pass(system, result)


def _moment_columns(post, names, steps=slice(None)):
    cols = {"mean": post.total[0][steps], "std": np.sqrt(np.clip(post.total[1][steps], 0, None))}
    for name in names:
        mean, var = post.components[name]
        cols[f"mean_{name}"] = mean[steps]
        cols[f"std_{name}"] = np.sqrt(np.clip(var[steps], 0, None))
    return cols


def cmd_smooth(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    data = _data(cfg, model)
    extra = time_grid(cfg["grid"]["times"], "grid.times") if cfg["grid"]["times"] is not None else ()
    batch, basis, result, smoothed = _posterior(cfg, model, data, extra)
    keep = _grid_steps(cfg, batch.times)
    selector, names = _selector(cfg, model)
    pts = regular_grid(model.domain, cfg["grid"]["resolution"])
    post = posterior_at([smoothed[i] for i in keep], model, basis, pts, selector, batch.times[keep])
    write_grid_csv(out / "posterior.csv", batch.times[keep], pts, _moment_columns(post, names))

    records = []
    for row, k in enumerate(keep):
        comps = {n: {"mean": post.components[n][0][row], "var": post.components[n][1][row]} for n in names}
        records.append({"t": batch.times[k], "n_obs": int(batch.counts[k]),
                        "loglik_increment": result.increments[k], "components": comps})
    write_ndjson(out / "posterior.ndjson", records)
    outputs = ["posterior.csv", "posterior.ndjson"]

    if cfg["grid"]["amplitude"]:
        amp = {f"amplitude_{n}": amplitude_map(smoothed, model, basis, pts, n, batch.times) for n in names}
        write_grid_csv(out / "amplitude.csv", None, pts, amp)
        outputs.append("amplitude.csv")
    logger.info("smoothed %d steps, loglik %.6g", batch.n_steps, result.loglik)
    _finish(out, "smooth", cfg, outputs, plot=True)
    return EXIT_OK


def cmd_predict(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    data = _data(cfg, model)
    if not cfg["predict"]["points"]:
        raise ConfigError("no query file given (--points)", "predict.points")
    tq, Xq = read_points(cfg["predict"]["points"])
    if Xq.shape[1] != model.domain.coord_dim:
        raise DataError(f"{model.domain.kind} needs {model.domain.coord_dim} coordinate columns, got {Xq.shape[1]}")
    try:
        model.domain.check_points(Xq)
    except ValueError as exc:
        raise DataError(f"query points: {exc}") from None
    if tq.size == 0:
        raise DataError("no query points")
    batch, basis, result, smoothed = _posterior(cfg, model, data, np.unique(tq))
    selector, names = _selector(cfg, model)

    rows, records = [], []
    for t in np.unique(tq):
        k = int(np.flatnonzero(batch.times == t)[0])
        sel = tq == t
        post = posterior_at([smoothed[k]], model, basis, Xq[sel], selector, [t])
        cols = _moment_columns(post, names)
        rows.append((np.full(sel.sum(), t), Xq[sel], cols))
        records.append({"t": t, "points": Xq[sel],
                        "components": {n: {"mean": post.components[n][0][0], "var": post.components[n][1][0]}
                                       for n in names},
                        "mean": post.total[0][0], "var": post.total[1][0]})
    header = list(rows[0][2])
    t_all = np.concatenate([r[0] for r in rows])
    X_all = np.vstack([r[1] for r in rows])
    cols = {h: np.concatenate([r[2][h].ravel() for r in rows]) for h in header}
    # one "time" per query row keeps the long format without a product grid
    write_rows(out / "predictions.csv", ["t"] + coord_names(X_all.shape[1]) + header,
                np.column_stack([t_all, X_all] + [cols[h] for h in header]))
    write_ndjson(out / "predictions.ndjson", records)
    _finish(out, "predict", cfg, ["predictions.csv", "predictions.ndjson"])
    return EXIT_OK


def cmd_spectrum(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    res = cfg["grid"]["resolution"]
    basis = model.basis()
    sp = cfg["spectrum"]
    if sp["nu_x"] is None:
        nu_x = np.linspace(0.0, float(basis.sqrt_eigenvalues[-1]), res)
    else:
        nu_x = time_grid(sp["nu_x"], "spectrum.nu_x")
    if sp["nu_t"] is None:
        top = max(max(float(np.max(c.omega.values)) for c in model.components), 1.0)
        nu_t = np.linspace(0.0, 2.0 * top, 2 * res - 1)
    else:
        nu_t = time_grid(sp["nu_t"], "spectrum.nu_t")
    NX, NT = np.meshgrid(nu_x, nu_t, indexing="ij")
    _, names = _selector(cfg, model)
    cols = {}
    for comp, name in zip(model.components, model.component_names):
        if name in names:
            cols[f"S_{name}"] = model_spectral_density(comp, NX, NT, model.domain.spectral_dim)
    write_rows(out / "spectrum.csv", ["nu_x", "nu_t"] + list(cols),
                np.column_stack([NX.ravel(), NT.ravel()] + [c.ravel() for c in cols.values()]))
    _finish(out, "spectrum", cfg, ["spectrum.csv"])
    return EXIT_OK


def cmd_basis_check(cfg: dict, out: Path) -> int:
    model = model_from_config(cfg["model"])
    bc = cfg["basis_check"]
    basis = model.basis()
    tol = _float(bc, "tolerance", "basis_check")
    dev = gram_deviation(basis, _int(bc, "resolution", "basis_check", minimum=2))
    records = [{"check": "orthonormality", "domain": model.domain.to_config(), "n_basis": basis.size,
                "gram_deviation": dev, "tolerance": tol, "passed": dev < tol}]
    passed = dev < tol
    if model.domain.kind in ("interval", "rectangle"):
        if bc["spacings"] is None:
            # a few points per wavelength of the highest mode, then refine
            h0 = 0.5 / basis.sqrt_eigenvalues[-1]
            spacings = [h0, h0 / 2, h0 / 4]
        else:
            spacings = [float(s) for s in bc["spacings"]]
        resid = [float(fd_eigen_residual(basis, h).max()) for h in spacings]
        order = fd_convergence_order(basis, spacings)
        records.append({"check": "eigen_residual", "spacings": spacings, "max_residual": resid,
                        "order": order, "passed": order >= 1.9})
        passed = passed and order >= 1.9
    records.append({"check": "modes", "descriptors": list(basis.descriptors),
                    "eigenvalues": basis.eigenvalues})
    write_ndjson(out / "basis_check.ndjson", records)
    write_design_csv(out / "design.csv", basis, regular_grid(model.domain, cfg["grid"]["resolution"]))
    _finish(out, "basis-check", cfg, ["basis_check.ndjson", "design.csv"])
    if not passed:
        logger.error("basis check failed")
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "smooth": cmd_smooth,
    "predict": cmd_predict,
    "spectrum": cmd_spectrum,
    "basis-check": cmd_basis_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stresonator",
        description="Simulate, fit and smooth spatio-temporal stochastic resonator fields.",
        epilog="Without --config the bundled one-dimensional demo config is used.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "simulate": "draw a trajectory and noisy observations",
        "fit": "maximum marginal-likelihood hyperparameters",
        "smooth": "posterior field on a grid for every step",
        "predict": "posterior at query points and times",
        "spectrum": "space-time spectral density table",
        "basis-check": "orthonormality and eigen-residual checks",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="YAML/JSON config or a manifest.json from an earlier run")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--grid", type=int, help="evaluation grid resolution")
        p.add_argument("--components", help="comma-separated component names, or 'all'")
        p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
        if name in ("fit", "smooth", "predict"):
            p.add_argument("--data", help="observation CSV with columns t, x1[, x2[, x3]], y")
        if name == "fit":
            p.add_argument("--restarts", type=int, help="number of random restarts")
        if name == "predict":
            p.add_argument("--points", help="query CSV with columns t, x1[, x2[, x3]]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory: {exc}", "out") from None
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, DomainError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalError, FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("cannot write outputs: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
