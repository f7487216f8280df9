"""Command-line front end: ``python cli.py <command> [options]``."""

from __future__ import annotations

import contextlib
import functools
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import click
import numpy as np
import pandas as pd
from loguru import logger

from covariance import IncrementQuery, covariance_table, incremental_cov, lrd_asymptote
from errors import CcmfbmError, DomainError
from inference import DriftHypothesis, drift_log_likelihood, drift_mle, predict
from kernels import (
    ModelParams,
    SeriesSpec,
    c_of_h,
    gamma_k,
    gamma_k_bound,
    inverse_kernel_mass,
    l_inverse_kernel,
    l_kernel,
    mg_kernel,
)
from operators import (
    INVERSION_METHODS,
    TimeGrid,
    build_forward_operator,
    build_inverse_operator,
    identity_residual,
    kstar_norm_bound,
    kstar_norm_squared,
)
from settings import __version__, command_defaults, load_config, resolve_config_path
from simulation import (
    BASES,
    CHOLESKY_VARIANTS,
    DRIFT_MODELS,
    SCHEMES,
    SimConfig,
    holder_diagnostic,
    paths_frame,
    paths_from_frame,
    recover_bm,
    simulate,
)
from verification import LEVELS, run_suite

FORMATS = ("csv", "json")
CURVES = ("mg", "l", "l-inverse", "gamma", "bound", "c-of-h")
COV_KINDS = ("table", "increment", "holder")
LOG_LEVELS = ("WARNING", "INFO", "DEBUG")
# config-file keys whose click parameter is named differently
PARAM_ALIASES = {"format": "fmt", "t": "t_value", "k": "k_values", "input": "source"}

DEMO_PRESETS = ((0.4, 1.4, 0.6), (1.0, 3.0, 0.75), (4.0, 9.0, 0.9))
DEMO_HURSTS = (0.6, 0.75, 0.9)
DEMO_GAMMA_K = (1, 2, 3, 10, 15)


class CommandFailure(click.ClickException):
    """Library error surfaced with its own exit code (3 validation, 4 numerical)."""

    def __init__(self, exc: CcmfbmError) -> None:
        super().__init__(f"{type(exc).__name__}: {exc}")
        self.exit_code = exc.exit_code


@contextlib.contextmanager
def _translate_errors() -> Iterator[None]:
    try:
        yield
    except CcmfbmError as exc:
        raise CommandFailure(exc) from exc


def _guarded(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with _translate_errors():
            return fn(*args, **kwargs)

    return wrapper


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a command's output, embedded in JSON ``meta``."""

    command: str
    a: float | None = None
    b: float | None = None
    hurst: float | None = None
    grid_n: int | None = None
    horizon: float | None = None
    paths: int | None = None
    seed: int | None = None
    scheme: str | None = None
    series_terms: int | None = None
    tol: float | None = None
    max_terms: int | None = None
    output: str | None = None
    format: str = "csv"
    options: dict[str, Any] = field(default_factory=dict)

    def params(self) -> ModelParams:
        return ModelParams(self.a, self.b, self.hurst)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon, self.grid_n)

    def series(self) -> SeriesSpec:
        return SeriesSpec(tol=self.tol, max_terms=self.max_terms)

    def meta(self) -> dict[str, Any]:
        return {**asdict(self), "version": __version__}


def _configure_logging(verbose: int) -> None:
    logger.remove()
    logger.add(sys.stderr, level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)])


def _csv_text(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n", na_rep="")


def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    records = frame.to_dict(orient="records")
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()} for row in records]


def _write(text: str, target: str | None) -> None:
    if target in (None, "-"):
        click.echo(text, nl=False)
        return
    path = Path(target)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    logger.info("wrote {}", path)


def emit(run: RunConfig, tables: dict[str, pd.DataFrame], extra_meta: dict[str, Any] | None = None) -> None:
    """Write one or more named tables; the first goes to --output, the rest to <stem>_<name><suffix>."""
    meta = {**run.meta(), **(extra_meta or {})}
    names = list(tables)
    if run.format == "json":
        data: Any = _records(tables[names[0]]) if len(names) == 1 else {n: _records(tables[n]) for n in names}
        _write(json.dumps({"meta": meta, "data": data}, allow_nan=False, default=float) + "\n", run.output)
        return
    for position, name in enumerate(names):
        text = _csv_text(tables[name])
        if position == 0 or run.output in (None, "-"):
            if position > 0:
                click.echo("")
            _write(text, run.output)
        else:
            base = Path(run.output)
            _write(text, str(base.with_name(f"{base.stem}_{name}{base.suffix or '.csv'}")))


def model_options(fn: Callable) -> Callable:
    decorators = [
        click.option("--a", "a", type=float, default=1.0, show_default=True, help="Weight of the Brownian part."),
        click.option("--b", "b", type=float, default=1.0, show_default=True, help="Weight of the fractional part."),
        click.option("--hurst", type=float, default=0.75, show_default=True, help="Hurst index in (1/2, 1)."),
        click.option("--grid-n", type=int, default=256, show_default=True, help="Number of grid steps N."),
        click.option("--horizon", type=float, default=1.0, show_default=True, help="Time horizon T."),
        click.option("--tol", type=float, default=1e-10, show_default=True, help="L^-1 series truncation tolerance."),
        click.option("--max-terms", type=int, default=60, show_default=True, help="Cap on L^-1 series terms."),
        click.option("--output", type=click.Path(dir_okay=False), default=None, help="Output file (default stdout)."),
        click.option("--format", "fmt", type=click.Choice(FORMATS), default="csv", show_default=True),
    ]
    for decorator in reversed(decorators):
        fn = decorator(fn)
    return fn


def _run_config(command: str, a, b, hurst, grid_n, horizon, tol, max_terms, output, fmt, **rest) -> RunConfig:
    known = {k: rest.pop(k) for k in ("paths", "seed", "scheme", "series_terms") if k in rest}
    return RunConfig(command=command, a=a, b=b, hurst=hurst, grid_n=grid_n, horizon=horizon, tol=tol,
                     max_terms=max_terms, output=output, format=fmt, options=rest, **known)


def _read_paths(source: str) -> tuple[pd.DataFrame, TimeGrid]:
    frame = pd.read_csv(source)
    if frame.empty or "t" not in frame:
        raise DomainError(f"{source} holds no path samples")
    counts = frame.groupby("path_id").size() if "path_id" in frame else pd.Series([len(frame)])
    if counts.nunique() != 1:
        raise DomainError(f"paths in {source} have different lengths")
    if "path_id" not in frame:
        frame = frame.assign(path_id=0)
    grid = TimeGrid(float(frame["t"].max()), int(counts.iloc[0]) - 1)
    return frame, grid


def _source_paths(run: RunConfig, source: str | None, cfg: SimConfig | None = None):
    if source:
        frame, grid = _read_paths(source)
        return paths_from_frame(frame, grid)
    return simulate(cfg or SimConfig(run.params(), run.grid(), n_paths=run.paths or 1, seed=run.seed or 0))


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="TOML file with option defaults (top level or per-command tables).")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
@click.version_option(__version__, prog_name="ccmfbm")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, verbose: int) -> None:
    """Completely correlated mixed fractional Brownian motion toolkit."""
    _configure_logging(verbose)
    with _translate_errors():
        config = load_config(resolve_config_path(config_path))
        defaults = command_defaults(config, sorted(main.commands))
    ctx.default_map = {
        name: {PARAM_ALIASES.get(key, key): value for key, value in section.items()}
        for name, section in defaults.items()
    }


@main.command("simulate")
@model_options
@click.option("--paths", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scheme", type=click.Choice(SCHEMES), default="cholesky", show_default=True)
@click.option("--series-terms", type=int, default=128, show_default=True)
@click.option("--basis", type=click.Choice(BASES), default="trigonometric", show_default=True)
@click.option("--variant", type=click.Choice(CHOLESKY_VARIANTS), default="joint", show_default=True)
@click.option("--drift", type=float, default=0.0, show_default=True)
@click.option("--drift-model", type=click.Choice(DRIFT_MODELS), default="driving", show_default=True)
@_guarded
def simulate_command(basis, variant, drift, drift_model, **kwargs) -> None:
    """Simulate paths of X with their W and B^H components."""
    run = _run_config("simulate", basis=basis, variant=variant, drift=drift, drift_model=drift_model, **kwargs)
    cfg = SimConfig(run.params(), run.grid(), n_paths=run.paths, seed=run.seed, scheme=run.scheme,
                    series_terms=run.series_terms, basis=basis, cholesky_variant=variant,
                    drift=drift, drift_model=drift_model)
    emit(run, {"paths": paths_frame(simulate(cfg))})


@main.command("kernel")
@model_options
@click.option("--curve", type=click.Choice(CURVES), default="mg", show_default=True)
@click.option("--t", "t_value", type=float, default=1.0, show_default=True, help="Fixed first argument t.")
@click.option("--k", "k_values", type=int, multiple=True, help="Series indices for gamma/bound (repeatable).")
@_guarded
def kernel_command(curve, t_value, k_values, **kwargs) -> None:
    """Kernel curves s -> f(t, s) on s in (0, t], sampled at grid-n points."""
    run = _run_config("kernel", curve=curve, t=t_value, k=list(k_values), **kwargs)
    n = run.grid_n
    if curve == "c-of-h":
        hurst = 0.5 + 0.5 * np.arange(1, n) / n
        emit(run, {"curve": pd.DataFrame({"hurst": hurst, "c": [c_of_h(h) for h in hurst]})})
        return
    s = t_value * np.arange(1, n + 1) / n
    frame = pd.DataFrame({"s": s})
    if curve in ("gamma", "bound"):
        inner = s[s < t_value]
        for k in k_values or (1, 2, 3):
            if curve == "gamma":
                frame[f"gamma_{k}"] = gamma_k(run.hurst, k, t_value, s)
            else:
                values = np.full(s.shape, np.nan)
                values[: inner.size] = gamma_k_bound(run.hurst, k, t_value, inner, ratio=run.params().ratio)
                frame[f"bound_{k}"] = values
    elif curve == "mg":
        frame["value"] = mg_kernel(run.hurst, t_value, s)
    elif curve == "l":
        frame["value"] = l_kernel(run.params(), t_value, s)
    else:
        frame["value"] = l_inverse_kernel(run.params(), t_value, s, run.series())
    emit(run, {"curve": frame})


@main.command("cov")
@model_options
@click.option("--kind", type=click.Choice(COV_KINDS), default="table", show_default=True)
@click.option("--t0", type=float, default=1.0, show_default=True)
@click.option("--delta", type=float, default=0.05, show_default=True)
@click.option("--t", "t_value", type=float, default=8.0, show_default=True)
@_guarded
def cov_command(kind, t0, delta, t_value, **kwargs) -> None:
    """Covariance table on the grid, one increment covariance, or the Hölder ratios."""
    run = _run_config("cov", kind=kind, t0=t0, delta=delta, t=t_value, **kwargs)
    p = run.params()
    if kind == "table":
        nodes = run.grid().columns
        table = covariance_table(p, nodes)
        t, s = np.meshgrid(nodes, nodes, indexing="ij")
        frame = pd.DataFrame({"t": t.ravel(), "s": s.ravel(), "cov": table.ravel()})
    elif kind == "increment":
        iq = IncrementQuery(t0=t0, delta=delta, t=t_value)
        try:
            asymptote = lrd_asymptote(p, iq)
        except DomainError:
            asymptote = math.nan
        frame = pd.DataFrame([{"t0": t0, "delta": delta, "t": t_value, "cov": incremental_cov(p, iq),
                               "asymptote": asymptote}])
    else:
        frame = holder_diagnostic(p, [0.1, 0.01, 0.001], t=t0)
    emit(run, {"cov": frame})


@main.command("invert")
@model_options
@click.option("--method", type=click.Choice(INVERSION_METHODS), default="series", show_default=True)
@click.option("--input", "source", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Path table to recover W from; without it the operator itself is written.")
@_guarded
def invert_command(method, source, **kwargs) -> None:
    """Recover the driving Brownian motion, or write the discretized L^-1."""
    run = _run_config("invert", method=method, input=source, **kwargs)
    p = run.params()
    if source:
        frame, grid = _read_paths(source)
        rows = []
        for path_id, path in enumerate(paths_from_frame(frame, grid)):
            w = recover_bm(path, p, run.series(), method=method).w
            rows.append(pd.DataFrame({"path_id": path_id, "t": grid.nodes, "x": path.x, "w": w}))
        emit(run, {"recovered": pd.concat(rows, ignore_index=True)})
        return
    grid = run.grid()
    inverse = build_inverse_operator(p, grid, run.series(), method=method)
    residual = identity_residual(build_forward_operator(p, grid), inverse)
    norm, bound = kstar_norm_squared(p.hurst, grid), kstar_norm_bound(p.hurst, grid.horizon)
    logger.info("identity residual of forward o inverse: {:.3g}", residual)
    if norm > bound:
        logger.warning("discretized ||K*||^2 = {:.4g} exceeds its bound {:.4g}", norm, bound)
    emit(run, {"operator": inverse.to_frame()},
         {"identity_residual": residual, "kstar_norm_squared": norm, "kstar_norm_bound": bound})


@main.command("estimate-drift")
@model_options
@click.option("--input", "source", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Path table; without it paths are simulated with --drift.")
@click.option("--paths", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--drift", type=float, default=0.0, show_default=True, help="Drift of simulated paths.")
@click.option("--drift-model", type=click.Choice(DRIFT_MODELS), default="driving", show_default=True)
@click.option("--theta", type=float, default=1.0, show_default=True, help="Hypothesis for the log-likelihood.")
@click.option("--method", type=click.Choice(INVERSION_METHODS), default="series", show_default=True)
@_guarded
def estimate_drift_command(source, drift, drift_model, theta, method, **kwargs) -> None:
    """Drift MLE and log-likelihood per path."""
    run = _run_config("estimate-drift", input=source, drift=drift, drift_model=drift_model, theta=theta,
                      method=method, **kwargs)
    p, series = run.params(), run.series()
    cfg = None if source else SimConfig(p, run.grid(), n_paths=run.paths, seed=run.seed, drift=drift,
                                        drift_model=drift_model)
    paths = _source_paths(run, source, cfg)
    hyp = DriftHypothesis(theta)
    frame = pd.DataFrame({
        "path_id": np.arange(len(paths)),
        "theta_hat": [drift_mle(path, p, series, method=method) for path in paths],
        "log_likelihood": [drift_log_likelihood(path, hyp, p, series, method=method) for path in paths],
    })
    horizon = paths[0].grid.horizon
    mass = inverse_kernel_mass(p, horizon, series)
    click.echo(f"∫_0^T L^-1(T, s) ds = {mass:.10g}  (T/a = {horizon / p.a:.10g})", err=True)
    emit(run, {"estimates": frame}, {"inverse_kernel_mass": mass})


@main.command("predict")
@model_options
@click.option("--input", "source", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Path table; the path given by --path-id is used. Without it one path is simulated.")
@click.option("--path-id", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--u", "u", type=float, default=0.5, show_default=True, help="Observation horizon (grid node).")
@click.option("--targets", type=float, multiple=True, help="Target times > u (repeatable).")
@_guarded
def predict_command(source, path_id, u, targets, **kwargs) -> None:
    """Conditional mean and covariance of X at the targets given the path on [0, u]."""
    targets = targets or (0.6, 0.8, 1.0)
    run = _run_config("predict", input=source, path_id=path_id, u=u, targets=list(targets), **kwargs)
    paths = _source_paths(run, source)
    if not 0 <= path_id < len(paths):
        raise DomainError(f"path id {path_id} not among {len(paths)} paths")
    result = predict(paths[path_id], run.params(), u, targets, run.series())
    mean, cov = result.to_frames()
    emit(run, {"mean": mean, "cov": cov})


@main.command("verify")
@click.option("--level", type=click.Choice(LEVELS), default="desk", show_default=True)
@click.option("--only", type=int, multiple=True, help="Restrict to criterion numbers (repeatable).")
@click.option("--output", type=click.Path(dir_okay=False), default=None)
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="csv", show_default=True)
@click.pass_context
@_guarded
def verify_command(ctx: click.Context, level, only, output, fmt) -> None:
    """Run the acceptance suite; exits 1 when any check fails."""
    run = RunConfig(command="verify", output=output, format=fmt, options={"level": level, "only": list(only)})
    report = run_suite(level, tuple(only))
    if output not in (None, "-"):
        click.echo(report[["criterion", "check", "value", "passed"]].to_string(index=False), err=True)
    emit(run, {"report": report})
    if not report["passed"].all():
        ctx.exit(1)


@main.command("demo")
@click.option("--output-dir", type=click.Path(file_okay=False), default="demo_output", show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--grid-n", type=int, default=500, show_default=True)
@click.option("--max-terms", type=int, default=400, show_default=True)
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="csv", show_default=True)
@_guarded
def demo_command(output_dir, seed, grid_n, max_terms, fmt) -> None:
    """Sample paths for the three showcase presets plus the kernel curves at t = 1."""
    out = Path(output_dir)
    suffix = f".{fmt}"
    grid = TimeGrid(1.0, grid_n)
    for a, b, hurst in DEMO_PRESETS:
        target = out / f"paths_a{a:g}_b{b:g}_H{hurst:g}{suffix}"
        run = RunConfig(command="demo", a=a, b=b, hurst=hurst, grid_n=grid_n, horizon=1.0, paths=1, seed=seed,
                        scheme="cholesky", output=str(target), format=fmt)
        emit(run, {"paths": paths_frame(simulate(SimConfig(ModelParams(a, b, hurst), grid, seed=seed)))})

    s = np.arange(1, grid_n + 1) / grid_n
    series = SeriesSpec(max_terms=max_terms)
    gammas = pd.DataFrame({"s": s, **{f"gamma_{k}": gamma_k(0.75, k, 1.0, s) for k in DEMO_GAMMA_K}})
    transfer = pd.DataFrame({"s": s, **{f"H{h:g}": l_kernel(ModelParams(1.0, 1.0, h), 1.0, s) for h in DEMO_HURSTS}})
    inverse = pd.DataFrame({"s": s, **{f"H{h:g}": l_inverse_kernel(ModelParams(1.0, 1.0, h), 1.0, s, series)
                                       for h in DEMO_HURSTS}})
    for name, frame in (("gamma_k", gammas), ("kernel_l", transfer), ("kernel_l_inverse", inverse)):
        run = RunConfig(command="demo", a=1.0, b=1.0, grid_n=grid_n, horizon=1.0, max_terms=max_terms,
                        output=str(out / f"{name}{suffix}"), format=fmt, options={"curve": name})
        emit(run, {name: frame})
    click.echo(f"demo files written to {out}", err=True)


if __name__ == "__main__":
    main()
