"""
Command-line interface for shapeflow.

Every command prints one JSON document on stdout (human tables with
``--pretty``) and exits 0 when all audits pass, 2 when an audit fails,
3 on numerical failure and 4 on invalid input. Failures print a JSON error
object on stderr.
"""

import os
import sys
import json
import math
import functools
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd

from .errors import ConfigError, InvalidShape, ShapeflowError
from .run_config import RunConfig, load_config, to_ini
from .shape_utils import (
    Ball,
    DiscreteMeasure,
    Ellipsoid,
    GridDensity,
    create_directories,
    load_grid_density,
    load_measure_csv,
    print_validation_summary,
    rasterize,
    read_json,
    sample_uniform,
    save_grid_density,
    setup_paths,
    to_jsonable,
    validate_required_files,
    write_json,
)
from .engines.transport_engine import engine as transport
from .engines.interpolation_engine import engine as interpolation
from .engines.droplet_engine import engine as droplet
from .engines.spray_engine import engine as spray_engine
from .engines.weak_euler_engine import engine as weak_euler
from .engines.tlp_engine import engine as tlp
from .engines.relaxed_engine import engine as relaxed
from .engines.render_engine import engine as render

EXIT_OK = 0
EXIT_AUDIT_FAILED = 2


# =======================
# Input Parsing
# =======================

def parse_vector(text: str, name: str = "vector") -> np.ndarray:
    try:
        values = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise InvalidShape(f"Cannot parse {name} '{text}' as comma-separated numbers")
    if not values:
        raise InvalidShape(f"Empty {name}")
    return np.asarray(values)


def _shape_params(body: str) -> Dict[str, float]:
    params = {}
    for item in body.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise InvalidShape(f"Shape parameter '{item}' must look like key=value")
        key, value = item.split("=", 1)
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise InvalidShape(f"Shape parameter {key.strip()} has non-numeric value '{value}'")
    return params


def _rotation(angle_deg: float, d: int) -> np.ndarray:
    rot = np.eye(d)
    if d >= 2:
        c, s = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
        rot[:2, :2] = [[c, -s], [s, c]]
    return rot


def shape_from_spec(spec: str, dimension: int) -> Any:
    """
    Parse ``disk:r=1,cx=0,cy=0``, ``ellipse:a=2,b=0.5,angle=30`` or
    ``ellipsoid:a=2,b=1,c=0.5`` into a Ball or Ellipsoid.
    """
    kind, _, body = spec.partition(":")
    params = _shape_params(body)
    center = np.array([params.pop(k, 0.0) for k in ("cx", "cy", "cz")[:dimension]])
    angle = params.pop("angle", 0.0)
    if kind in ("disk", "ball", "interval"):
        shape = Ball(center, params.pop("r", 1.0))
    elif kind in ("ellipse", "ellipsoid"):
        axes = [params.pop(k) for k in ("a", "b", "c")[:dimension] if k in params]
        if len(axes) != dimension:
            raise InvalidShape(f"{kind} in dimension {dimension} needs {dimension} semi-axes")
        shape = Ellipsoid(center, axes, _rotation(angle, dimension))
    else:
        raise InvalidShape(f"Unknown shape kind '{kind}' (use disk, ball, interval, ellipse or ellipsoid)")
    if params:
        raise InvalidShape(f"Unknown shape parameters: {sorted(params)}")
    return shape


def load_shape(source: str, config: RunConfig) -> GridDensity:
    """Grid density from a saved header/data pair or a shape spec rasterized with the grid settings."""
    if os.path.exists(source) or os.path.exists(source + ".json"):
        rho = load_grid_density(source)
    elif ":" in source:
        rho = rasterize(
            shape_from_spec(source, config.run.dimension),
            config.grid.cell_size,
            padding=config.grid.padding,
            supersample=config.grid.supersample,
        )
    else:
        raise InvalidShape(f"Shape '{source}' is neither a file nor a shape spec")
    if int(np.prod(rho.dims)) > config.grid.max_cells:
        raise InvalidShape(f"Grid of {int(np.prod(rho.dims))} cells exceeds max_cells={config.grid.max_cells}")
    return rho


def load_measure(source: str, config: RunConfig, seed_offset: int = 0) -> DiscreteMeasure:
    if source.endswith(".csv"):
        return load_measure_csv(source)
    return sample_uniform(load_shape(source, config), config.transport.n_samples, config.run.seed + seed_offset)


def load_tlp_pair(spec: str) -> tlp.TLpPair:
    """``points.csv:values.csv``; the values CSV holds one row per point with numeric columns."""
    points_path, sep, values_path = spec.partition(":")
    if not sep:
        raise InvalidShape(f"TL^p input '{spec}' must be points.csv:values.csv")
    is_valid, errors = validate_required_files(points_path, values_path)
    if not is_valid:
        raise InvalidShape("; ".join(errors))
    try:
        values = pd.read_csv(values_path).to_numpy(dtype=float)
    except (OSError, ValueError) as e:
        raise InvalidShape(f"Cannot read values {values_path}: {e}")
    return tlp.TLpPair(load_measure_csv(points_path), values)


def _load(path: str, what: str) -> Dict[str, Any]:
    is_valid, errors = validate_required_files(path)
    if not is_valid:
        raise InvalidShape("; ".join(errors), {"what": what})
    try:
        return read_json(path)
    except ValueError as e:
        raise InvalidShape(f"Cannot parse {what} {path}: {e}")


# =======================
# Output
# =======================

def _settings(ctx: click.Context) -> Tuple[RunConfig, bool]:
    return ctx.obj["config"], ctx.obj["pretty"]


def emit(payload: Dict[str, Any], passed: bool = True, checks: Optional[List[Tuple[str, bool, List[str]]]] = None):
    """Print the payload and exit with 0 or the audit-failure code."""
    ctx = click.get_current_context()
    config, pretty = _settings(ctx)
    payload = dict(payload)
    payload["passed"] = bool(passed)
    if not config.run.reproducible:
        payload["created_at"] = datetime.now(timezone.utc).isoformat()
    if pretty:
        scalars = {k: v for k, v in to_jsonable(payload).items() if not isinstance(v, (dict, list))}
        click.echo(pd.DataFrame(sorted(scalars.items()), columns=["field", "value"]).to_string(index=False))
        for title, ok, errors in checks or []:
            print_validation_summary(title, ok, errors)
    else:
        click.echo(json.dumps(to_jsonable(payload), indent=2, ensure_ascii=False))
    ctx.exit(EXIT_OK if passed else EXIT_AUDIT_FAILED)


def handles_errors(func: Callable) -> Callable:
    """Turn shapeflow errors into a JSON object on stderr and their exit code."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ShapeflowError as e:
            click.echo(json.dumps(to_jsonable(e.to_dict()), ensure_ascii=False), err=True)
            click.get_current_context().exit(e.exit_code)
    return wrapper


def _report(model) -> Dict[str, Any]:
    return model.model_dump(mode="json")


# =======================
# Command Group
# =======================

@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="INI configuration file")
@click.option("--seed", type=int, default=None, help="Seed for all random choices")
@click.option("--reproducible", is_flag=True, default=False, help="Omit timestamps from outputs")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Directory for artifacts")
@click.option("--pretty", is_flag=True, default=False, help="Human-readable tables instead of JSON")
@click.pass_context
def cli(ctx, config_path, seed, reproducible, out_dir, pretty):
    """Optimal transport between shapes, Euler sprays and their certificates."""
    try:
        config = load_config(config_path, {
            "run": {"seed": seed, "out_dir": out_dir, "reproducible": True if reproducible else None},
        })
    except ConfigError as e:
        click.echo(json.dumps(to_jsonable(e.to_dict()), ensure_ascii=False), err=True)
        ctx.exit(e.exit_code)
    ctx.obj = {"config": config, "pretty": pretty}


# =======================
# shape
# =======================

@cli.group()
def shape():
    """Shape files."""


@shape.command("make")
@click.argument("spec")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Header path (.json)")
@click.pass_context
@handles_errors
def shape_make(ctx, spec, out_path):
    """Rasterize a disk, ellipse or ellipsoid spec into a grid density file."""
    config, _ = _settings(ctx)
    rho = load_shape(spec, config)
    header = save_grid_density(rho, out_path)
    emit({"path": header, "dims": list(rho.dims), "cell_size": rho.cell_size, "mass": rho.mass})


# =======================
# ot
# =======================

@cli.group()
def ot():
    """Optimal transport between measures."""


@ot.command("solve")
@click.option("--source", required=True, help="Shape file/spec or measure CSV")
@click.option("--target", required=True, help="Shape file/spec or measure CSV")
@click.option("--method", type=click.Choice(["auto", "exact", "entropic"]), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Write the plan JSON here")
@click.pass_context
@handles_errors
def ot_solve(ctx, source, target, method, out_path):
    """Optimal plan for the quadratic cost with a cyclical monotonicity audit."""
    config, _ = _settings(ctx)
    mu = load_measure(source, config)
    nu = load_measure(target, config, seed_offset=1)
    plan = transport.solve_transport(
        mu, nu, method or config.transport.method, config.transport.cross_validate, config.run.seed)
    audit = transport.cyclical_monotonicity_check(plan, seed=config.run.seed)
    if out_path:
        write_json(out_path, plan.to_dict())
    row_error, col_error = plan.marginal_errors()
    emit({
        "cost": plan.cost,
        "method": plan.method,
        "couplings": len(plan.rows),
        "is_permutation": plan.is_permutation(),
        "marginal_errors": [row_error, col_error],
        "monotonicity": _report(audit),
        "plan_file": out_path,
    }, audit.passed, [("Cyclical monotonicity", audit.passed, audit.violations)])


@ot.command("dist")
@click.option("--a", "source", required=True, help="Shape file/spec or measure CSV")
@click.option("--b", "target", required=True, help="Shape file/spec or measure CSV")
@click.option("--p", "p", type=click.Choice(["2", "inf"]), default="2")
@click.pass_context
@handles_errors
def ot_dist(ctx, source, target, p):
    """W₂ or W∞ distance."""
    config, _ = _settings(ctx)
    mu = load_measure(source, config)
    nu = load_measure(target, config, seed_offset=1)
    value = transport.wasserstein_distance(mu, nu) if p == "2" else transport.linf_distance(mu, nu)
    emit({"p": p, "distance": value})


# =======================
# interp
# =======================

@cli.command("interp")
@click.option("--source", required=True, help="Shape file or spec")
@click.option("--target", required=True, help="Shape file or spec")
@click.option("--times", default="0,0.25,0.5,0.75,1", help="Comma-separated times in [0, 1]")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Write the path JSON here")
@click.pass_context
@handles_errors
def interp(ctx, source, target, times, out_path):
    """Displacement interpolant with density-structure and geodesic audits."""
    config, _ = _settings(ctx)
    rho0 = load_shape(source, config)
    mu = sample_uniform(rho0, config.transport.n_samples, config.run.seed)
    nu = sample_uniform(load_shape(target, config), config.transport.n_samples, config.run.seed + 1)
    field_ = transport.estimate_brenier_field(
        mu, nu, k_neighbors=config.transport.k_neighbors, plan=transport.solve_transport(
            mu, nu, config.transport.method, config.transport.cross_validate, config.run.seed))
    t = parse_vector(times, "times")
    path = interpolation.displacement_interpolant(field_, rho0, t, supersample=config.grid.supersample)
    geodesic = interpolation.geodesic_property_check(field_, t, seed=config.run.seed)
    convexity = [interpolation.convexity_check(field_.eigvals[i]) for i in range(field_.size)]
    violations = sum(not r.passed for r in convexity)
    if out_path:
        write_json(out_path, path.to_dict())
    passed = geodesic.passed and violations == 0
    emit({
        "times": t,
        "action": path.action,
        "wasserstein_sq": float(np.sum(field_.weights * np.sum((field_.images - field_.points) ** 2, axis=1))),
        "geodesic": _report(geodesic),
        "density_structure_violations": violations,
        "path_file": out_path,
    }, passed, [
        ("Geodesic property", geodesic.passed, [] if geodesic.passed else ["distance identity violated"]),
        ("Density structure", violations == 0, [f"{violations} convexity violations"] if violations else []),
    ])


# =======================
# droplet
# =======================

@cli.group("droplet")
def droplet_group():
    """Ellipsoidal Euler droplets."""


def _droplet_payload(g: droplet.DropletGeodesic, out_path: Optional[str]) -> Tuple[Dict[str, Any], bool, list]:
    invariants = droplet.invariant_report(g)
    nesting = droplet.nesting_check(g)
    payload = {
        "r": g.r,
        "start": g.start,
        "end": g.end,
        "action": droplet.droplet_action(g),
        "invariants": _report(invariants),
        "nesting": _report(nesting),
        "geodesic_file": out_path,
    }
    if g.dimension == 2:
        speed_gap, beta_gap = droplet.planar_residuals(g)
        payload["planar_residuals"] = {"axis_rate": speed_gap, "rotation_rate": beta_gap}
    if out_path:
        write_json(out_path, g.to_dict())
    passed = invariants.passed and nesting.passed
    checks = [
        ("Droplet invariants", invariants.passed, [] if invariants.passed else ["volume or speed drift"]),
        ("Nesting", nesting.passed, [] if nesting.passed else [f"max excess {nesting.max_excess:.3e}"]),
    ]
    return payload, passed, checks


@droplet_group.command("bvp")
@click.option("--r", "radius", type=float, default=1.0)
@click.option("--start", "a_start", default=None, help="Initial semi-axes; defaults to the ball of radius r")
@click.option("--end", "a_end", required=True, help="Final semi-axes with product r^d")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@handles_errors
def droplet_bvp(ctx, radius, a_start, a_end, out_path):
    """Droplet geodesic between two ellipsoids of equal volume."""
    config, _ = _settings(ctx)
    end = parse_vector(a_end, "end axes")
    start = np.full(end.size, radius) if a_start is None else parse_vector(a_start, "start axes")
    g = droplet.geodesic_bvp(
        radius, start, end, tol=config.droplet.tol,
        times=np.linspace(0.0, 1.0, config.droplet.n_times), cache_dir=config.cache_dir)
    emit(*_droplet_payload(g, out_path))


@droplet_group.command("ivp")
@click.option("--r", "radius", type=float, default=1.0)
@click.option("--a0", required=True, help="Initial semi-axes")
@click.option("--adot0", required=True, help="Initial axis velocities, tangent to the volume constraint")
@click.option("--t-end", type=float, default=1.0)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
@handles_errors
def droplet_ivp(ctx, radius, a0, adot0, t_end, out_path):
    """Droplet geodesic from initial axes and axis velocities."""
    config, _ = _settings(ctx)
    g = droplet.geodesic_ivp(
        radius, parse_vector(a0, "a0"), parse_vector(adot0, "adot0"), t_end=t_end,
        times=np.linspace(0.0, t_end, config.droplet.n_times))
    emit(*_droplet_payload(g, out_path))


# =======================
# spray
# =======================

@cli.group("spray")
def spray_group():
    """Euler sprays."""


def build_field(rho0: GridDensity, rho1: GridDensity, config: RunConfig) -> transport.BrenierField:
    mu = sample_uniform(rho0, config.transport.n_samples, config.run.seed)
    nu = sample_uniform(rho1, config.transport.n_samples, config.run.seed + 1)
    plan = transport.solve_transport(mu, nu, config.transport.method, config.transport.cross_validate, config.run.seed)
    return transport.estimate_brenier_field(mu, nu, k_neighbors=config.transport.k_neighbors, plan=plan)


def build_centered_spray(rho0: GridDensity, field_: transport.BrenierField, config: RunConfig, epsilon: float):
    """Recenter the target, pack the source and assemble the droplets."""
    shift = spray_engine.recenter_target(field_)
    centered = field_.translated(shift)
    plan = spray_engine.vitali_cover(
        spray_engine.translate_density(rho0, shift), centered, epsilon, config.spray.delta,
        safety_factor=config.spray.safety_factor, max_balls=config.spray.max_balls)
    return spray_engine.build_spray(plan, config.cache_dir), centered


def audit_spray(spray: spray_engine.EulerSpray, field_: transport.BrenierField, config: RunConfig):
    """Plan, injectivity and action audits with their console checks."""
    plan_report = spray_engine.audit_plan(spray.plan, field_)
    injectivity = spray_engine.certify_injectivity(spray, config.verify.time_samples)
    action = spray_engine.spray_action_audit(spray, field_, config.verify.subsample, config.run.seed)
    coverage_ok = spray.plan.coverage_fraction >= 1.0 - config.spray.delta - 1e-12
    has_droplets = len(spray.droplets) > 0
    reports = {
        "coverage_fraction": spray.plan.coverage_fraction,
        "coverage_ok": coverage_ok,
        "plan": _report(plan_report),
        "injectivity": _report(injectivity),
        "action": _report(action),
    }
    checks = [
        ("Droplets", has_droplets, [] if has_droplets else ["no droplets were placed"]),
        ("Coverage", coverage_ok, [] if coverage_ok else [f"coverage {spray.plan.coverage_fraction:.4f} below {1 - config.spray.delta:.4f}"]),
        ("Ball admissibility", plan_report.passed, [f"{len(plan_report.inadmissible_balls)} inadmissible balls"] if not plan_report.passed else []),
        ("Injectivity", injectivity.passed, [f"({i}, {j}) at t={t:.3f}" for i, j, t, _ in injectivity.geometric_violations]),
        ("Action and distance bounds", action.passed, [] if action.passed else [f"action {action.total_action:.6g} > {action.action_bound:.6g}" if not action.action_ok else f"L∞ {action.linf_distance:.4g} ≥ {action.linf_bound:.4g}"]),
    ]
    passed = has_droplets and coverage_ok and plan_report.passed and injectivity.passed and action.passed
    return reports, passed, checks


@spray_group.command("build")
@click.option("--source", required=True, help="Shape file or spec")
@click.option("--target", required=True, help="Shape file or spec")
@click.option("--epsilon", type=float, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="spray.json path")
@click.pass_context
@handles_errors
def spray_build(ctx, source, target, epsilon, out_path):
    """Build an Euler spray; the centered Brenier field is written next to it."""
    config, _ = _settings(ctx)
    epsilon = config.spray.epsilon if epsilon is None else epsilon
    field_ = build_field(load_shape(source, config), load_shape(target, config), config)
    spray, centered = build_centered_spray(load_shape(source, config), field_, config, epsilon)
    field_path = os.path.join(os.path.dirname(os.path.abspath(out_path)), "field.json")
    write_json(out_path, spray.to_dict())
    write_json(field_path, centered.to_dict())
    emit({
        "droplets": len(spray.droplets),
        "dropped": list(spray.dropped),
        "coverage_fraction": spray.plan.coverage_fraction,
        "total_action": spray.total_action,
        "spray_file": out_path,
        "field_file": field_path,
    })


@spray_group.command("audit")
@click.option("--spray", "spray_path", required=True, type=click.Path(dir_okay=False))
@click.option("--field", "field_path", default=None, type=click.Path(dir_okay=False), help="Defaults to field.json beside the spray")
@click.pass_context
@handles_errors
def spray_audit(ctx, spray_path, field_path):
    """Coverage, admissibility, injectivity and action audits of a stored spray."""
    config, _ = _settings(ctx)
    field_path = field_path or os.path.join(os.path.dirname(os.path.abspath(spray_path)), "field.json")
    spray = spray_engine.EulerSpray.from_dict(_load(spray_path, "spray"))
    field_ = transport.BrenierField.from_dict(_load(field_path, "field"))
    reports, passed, checks = audit_spray(spray, field_, config)
    emit(reports, passed, checks)


# =======================
# verify
# =======================

@cli.group()
def verify():
    """Weak-form verification."""


def _load_flow(spray_path: Optional[str], geodesic_path: Optional[str], boost: Optional[str]):
    if bool(spray_path) == bool(geodesic_path):
        raise InvalidShape("Give exactly one of --spray or --geodesic")
    if spray_path:
        return spray_engine.EulerSpray.from_dict(_load(spray_path, "spray"))
    g = droplet.DropletGeodesic.from_dict(_load(geodesic_path, "geodesic"))
    b = np.zeros(g.dimension) if boost is None else parse_vector(boost, "boost")
    return droplet.BoostedDroplet(g, b, np.zeros(g.dimension), np.eye(g.dimension))


@verify.command("weak-euler")
@click.option("--spray", "spray_path", default=None, type=click.Path(dir_okay=False))
@click.option("--geodesic", "geodesic_path", default=None, type=click.Path(dir_okay=False))
@click.option("--boost", default=None, help="Boost velocity for a single droplet")
@click.option("--frames", type=int, default=9, help="Time samples at the coarse level")
@click.pass_context
@handles_errors
def verify_weak_euler(ctx, spray_path, geodesic_path, boost, frames):
    """Weak Euler residuals under (h, Δt) halving and the mean-velocity decomposition."""
    config, _ = _settings(ctx)
    flow = _load_flow(spray_path, geodesic_path, boost)
    n_radial = max(2, config.droplet.n_radial // 2)

    def make_path(level: int) -> interpolation.DensityPath:
        times = np.linspace(0.0, 1.0, (frames - 1) * 2**level + 1)
        return weak_euler.as_path(flow, times, n_radial * 2**level)

    bank = weak_euler.TestFunctionBank.for_path(make_path(0), config.verify.bank_size, config.run.seed)
    residuals = weak_euler.refinement_study(make_path, bank)
    mean = weak_euler.mean_velocity_check(flow)
    needed = math.ceil(0.9 * bank.size)
    ratios_ok = (residuals.ratios_in_range or 0) >= needed
    emit({"residuals": _report(residuals), "mean_velocity": _report(mean)}, ratios_ok and mean.passed, [
        ("Second-order residual decay", ratios_ok, [] if ratios_ok else [f"{residuals.ratios_in_range}/{bank.size} in range, need {needed}"]),
        ("Mean velocity", mean.passed, [] if mean.passed else [f"drift {mean.max_drift:.3e}"]),
    ])


# =======================
# tlp
# =======================

@cli.group("tlp")
def tlp_group():
    """TL^p distances."""


@tlp_group.command("dist")
@click.option("--a", "a_spec", required=True, help="points.csv:values.csv")
@click.option("--b", "b_spec", required=True, help="points.csv:values.csv")
@click.option("--p", "p", type=click.Choice(["1", "2", "inf"]), default="2")
@click.pass_context
@handles_errors
def tlp_dist(ctx, a_spec, b_spec, p):
    """TL^p distance between two (measure, function) pairs."""
    p_value = math.inf if p == "inf" else int(p)
    emit({"p": p, "distance": tlp.tlp_distance(load_tlp_pair(a_spec), load_tlp_pair(b_spec), p_value)})


# =======================
# relaxed
# =======================

@cli.group("relaxed")
def relaxed_group():
    """Relaxed two-fluid least action."""


@relaxed_group.command("audit")
@click.option("--state", "state_path", default=None, type=click.Path(dir_okay=False), help="RelaxedState JSON")
@click.option("--source", default=None, help="Shape file or spec (builds the interpolant state)")
@click.option("--target", default=None, help="Shape file or spec (builds the interpolant state)")
@click.option("--probes", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Write the state JSON here")
@click.pass_context
@handles_errors
def relaxed_audit(ctx, state_path, source, target, probes, out_path):
    """Relaxed action, weak constraints and sampled minimality of a state."""
    config, _ = _settings(ctx)
    identity = None
    if state_path:
        state = relaxed.RelaxedState.from_dict(_load(state_path, "state"))
    elif source and target:
        rho0 = load_shape(source, config)
        field_ = build_field(rho0, load_shape(target, config), config)
        points = np.vstack([field_.points, field_.images])
        grid = interpolation.covering_grid(points, rho0.cell_size, padding=config.grid.padding + 1)
        state = relaxed.interpolant_state(field_, rho0, grid, supersample=config.grid.supersample)
        identity = relaxed.action_identity_check(
            state, field_, rho0, supersample=config.grid.supersample, rtol=config.verify.action_rtol)
    else:
        raise InvalidShape("Give --state or both --source and --target")
    if out_path:
        write_json(out_path, state.to_dict())
    action = relaxed.relaxed_action(state)
    bank = weak_euler.TestFunctionBank.random(
        state.grid.origin, state.grid.origin + state.grid.cell_size * np.asarray(state.grid.dims),
        count=config.verify.bank_size, seed=config.run.seed)
    constraints = relaxed.constraint_residual(state, bank)
    minimality = relaxed.minimality_probe(
        state, config.verify.probes if probes is None else probes, config.verify.amplitude, config.run.seed)
    identity_ok = identity is None or identity.passed
    passed = not action.infinite and action.structure_ok and minimality.passed and identity_ok
    checks = [
        ("Finite relaxed action", not action.infinite, [f"{action.infinite_cells} infeasible cells"] if action.infinite else []),
        ("Sampled minimality", minimality.passed, [] if minimality.passed else [f"min gap {minimality.min_gap:.3e}"]),
    ]
    if identity is not None:
        checks.append(("Action equals half the transport cost", identity.passed,
                       [] if identity.passed else [f"relative gap {identity.relative_gap:.3e} above {identity.tolerance:.1e}"]))
    emit({
        "action": _report(action),
        "identity": None if identity is None else _report(identity),
        "constraints": _report(constraints),
        "minimality": _report(minimality),
        "state_file": out_path,
    }, passed, checks)


# =======================
# render
# =======================

@cli.group("render")
def render_group():
    """SVG figures."""


@render_group.command("spray")
@click.option("--spray", "spray_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_context
@handles_errors
def render_spray(ctx, spray_path, out_path):
    """Source balls, intermediate droplets and expanded targets with nested outlines."""
    config, _ = _settings(ctx)
    spray = spray_engine.EulerSpray.from_dict(_load(spray_path, "spray"))
    render.write_svg(out_path, render.render_spray_figure(spray, config.render.times))
    emit({"figure": out_path, "droplets": len(spray.droplets)})


@render_group.command("droplet")
@click.option("--geodesic", "geodesic_path", required=True, type=click.Path(dir_okay=False))
@click.option("--boost", default=None, help="Boost velocity; defaults to a horizontal offset")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.pass_context
@handles_errors
def render_droplet(ctx, geodesic_path, boost, out_path):
    """Droplet nested in its Wasserstein ellipsoid at offsets 0, b/2 and b."""
    config, _ = _settings(ctx)
    g = droplet.DropletGeodesic.from_dict(_load(geodesic_path, "geodesic"))
    b = None if boost is None else parse_vector(boost, "boost")
    render.write_svg(out_path, render.render_droplet_figure(g, b, config.render.times))
    emit({"figure": out_path})


# =======================
# pipeline
# =======================

def run_pipeline(rho0: GridDensity, rho1: GridDensity, config: RunConfig, epsilon: float,
                 run_name: str = "run") -> Tuple[Dict[str, Any], bool, list]:
    """
    Transport, field, cover, spray and audits, written as a bundle under
    ``<out_dir>/<run_name>``: spray.json, field.json, reports/*.json,
    figures/spray.svg and the effective config.ini.
    """
    paths = setup_paths(config.run.out_dir, run_name)
    paths["cache_dir"] = config.cache_dir
    create_directories(paths)
    field_ = build_field(rho0, rho1, config)
    spray, centered = build_centered_spray(rho0, field_, config, epsilon)
    reports, passed, checks = audit_spray(spray, centered, config)

    write_json(paths["spray_file"], spray.to_dict())
    write_json(paths["field_file"], centered.to_dict())
    report_files = {}
    for name in ("plan", "injectivity", "action"):
        report_files[name] = os.path.join(paths["base_path_reports"], f"{name}.json")
        write_json(report_files[name], reports[name])
    figure = render.write_svg(
        os.path.join(paths["base_path_figures"], "spray.svg"),
        render.render_spray_figure(spray, config.render.times))
    with open(os.path.join(paths["base_path"], "config.ini"), "w", encoding="utf-8") as f:
        f.write(to_ini(config))

    payload = {
        "epsilon": epsilon,
        "droplets": len(spray.droplets),
        "coverage_fraction": spray.plan.coverage_fraction,
        "total_action": spray.total_action,
        "wasserstein_sq": reports["action"]["wasserstein_sq"],
        "audits": {name: reports[name]["passed"] for name in report_files} | {"coverage": reports["coverage_ok"]},
        "files": {"spray": paths["spray_file"], "field": paths["field_file"], "figure": figure, **report_files},
    }
    return payload, passed, checks


@cli.command("pipeline")
@click.option("--source", required=True, help="Shape file or spec")
@click.option("--target", required=True, help="Shape file or spec")
@click.option("--epsilon", type=float, default=None)
@click.option("--name", "run_name", default="run", help="Bundle directory below --out-dir")
@click.pass_context
@handles_errors
def pipeline(ctx, source, target, epsilon, run_name):
    """End-to-end Euler spray between two shapes with every audit."""
    config, _ = _settings(ctx)
    epsilon = config.spray.epsilon if epsilon is None else epsilon
    emit(*run_pipeline(load_shape(source, config), load_shape(target, config), config, epsilon, run_name))


def main(argv: Optional[Sequence[str]] = None):
    cli.main(args=argv, prog_name="shapeflow")


if __name__ == "__main__":
    main(sys.argv[1:])
