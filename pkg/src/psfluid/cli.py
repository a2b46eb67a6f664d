"""Command-line entry point: ``psfluid <command> --config FILE [options]``.

Every command writes its CSV outputs and a ``report.json`` into ``--out``.
Exit codes: 0 success, 1 configuration error, 2 model assumption violated
(e.g. no overload), 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import fluid, integral, lyapunov, metrics, sim
from .core import (
    ConfigError,
    ModelError,
    NumericalFailure,
    ScenarioConfig,
    Trajectory,
    fmt,
    load_config,
    time_grid,
)

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_NUMERICAL = 0, 1, 2, 3


def _plain(x):
    """Convert numpy containers and scalars to JSON-ready Python objects."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)) and not isinstance(x, bool):
        return int(x)
    return x


def scenario_echo(config: ScenarioConfig) -> dict:
    out = {"lambda": config.params.lam, "mu": list(config.params.mu), "nu": config.params.nu}
    for f in fields(config):
        if f.name != "params":
            out[f.name] = getattr(config, f.name)
    return _plain(out)


class Run:
    """Collects output files and summary values for one command."""

    def __init__(self, command: str, config: ScenarioConfig, out_dir: Path):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.outputs: list[str] = []
        self.summary: dict = {}

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def report(self) -> dict:
        return {
            "command": self.command,
            "scenario": scenario_echo(self.config),
            "outputs": list(self.outputs),
            "summary": _plain(self.summary),
        }

    def write(self) -> Path:
        path = self.out_dir / "report.json"
        path.write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def cmd_invariant(run: Run, args) -> None:
    params = run.config.params
    point = fluid.invariant_point(params)
    fp = fluid.fixed_point_norm(params)
    with open(run.path("invariant.csv"), "w", encoding="utf-8") as fh:
        fh.write("stage,z_star\n")
        for i, v in enumerate(point.z_star, 1):
            fh.write(f"{i},{fmt(v)}\n")
    run.summary = {
        "z_star": point.z_star,
        "invariant_norm": point.norm,
        "f_residual": point.residual,
        "fixed_point_norm": fp,
        "fixed_point_gap": abs(fp - point.norm),
        "load": params.load,
    }


def cmd_fluid(run: Run, args) -> None:
    cfg = run.config
    params = cfg.params
    traj = fluid.integrate(params, cfg.initial_state, cfg.horizon, cfg.grid_step)
    halved = fluid.integrate(params, cfg.initial_state, cfg.horizon, cfg.grid_step, substeps=20)
    traj.write_csv(run.path("trajectory.csv"))
    z_star = fluid.invariant_point(params).z_star
    dist = fluid.distance_to(traj, z_star)
    run.summary = {
        "invariant_norm": float(z_star.sum()),
        "final_distance": dist[-1],
        "final_state": traj.states[-1],
        "max_clamp": traj.clamped,
        "richardson_difference": float(np.abs(traj.states - halved.states).max()),
    }


def cmd_verify_integral(run: Run, args) -> None:
    cfg = run.config
    params = cfg.params
    steps = [cfg.grid_step, cfg.grid_step / 2, cfg.grid_step / 4]
    residuals = []
    for k, h in enumerate(steps):
        traj = fluid.integrate(params, cfg.initial_state, cfg.horizon, h)
        residuals.append(integral.representation_residual(params, traj))
        if k == 0:
            integral.write_residual_csv(run.path("residual.csv"), integral.residual_rows(params, traj))
    z_star = fluid.invariant_point(params).z_star
    grid = time_grid(cfg.horizon, cfg.grid_step)
    const = Trajectory(grid, np.tile(z_star, (len(grid), 1)))
    picard = integral.norm_fixed_point_iteration(params, cfg.horizon, cfg.grid_step)
    ode = fluid.integrate(params, np.zeros(params.stages), cfg.horizon, cfg.grid_step)
    with open(run.path("picard.csv"), "w", encoding="utf-8") as fh:
        fh.write("t,norm_picard,norm_ode\n")
        for t, x, y in zip(picard.trajectory.times, picard.trajectory.states[:, 0], ode.norms()):
            fh.write(f"{fmt(t)},{fmt(x)},{fmt(y)}\n")
    run.summary = {
        "grid_steps": steps,
        "residuals": residuals,
        "observed_orders": integral.convergence_order(residuals, steps),
        "constant_invariant_residual": integral.representation_residual(params, const),
        "picard_iterations": picard.iterations,
        "picard_differences": picard.differences,
        "picard_vs_ode": float(np.abs(picard.trajectory.states[:, 0] - ode.norms()).max()),
    }


def cmd_simulate(run: Run, args) -> None:
    cfg = run.config
    r = cfg.scale_r
    results = sim.run_replicas(cfg, args.mode, r=r)
    ref = None
    if cfg.params.overloaded:
        ref = fluid.integrate(cfg.params, cfg.initial_state, cfg.horizon, cfg.grid_step)
    distances = []
    for k, res in enumerate(results):
        res.trajectory.write_csv(run.path(f"trajectory_{k}.csv"))
        if res.jobs is not None:
            sim.write_jobs_csv(run.path(f"jobs_{k}.csv"), res.jobs)
        if ref is not None:
            distances.append(sim.sup_distance(res.trajectory, ref))
    averages = np.array([res.time_average for res in results])
    summary: dict = {
        "mode": args.mode,
        "scale_r": r,
        "replicas": len(results),
        "seeds": [res.seed for res in results],
        "time_average_mean": averages.mean(axis=0),
        "time_average_se": (averages.std(axis=0, ddof=1) / np.sqrt(len(results)))
        if len(results) > 1 else None,
        "sup_distance_mean": float(np.mean(distances)) if distances else None,
        "sup_distances": distances,
        "event_counts": [res.event_counts for res in results],
    }
    if args.mode == "freelance":
        stats = [sim.job_outcome_stats(res) for res in results]
        per_job = np.array([s["per_job"] for s in stats])
        summary["job_stats"] = stats
        summary["per_job_mean"] = float(per_job.mean())
        summary["per_job_se"] = float(per_job.std(ddof=1) / np.sqrt(len(per_job))) if len(per_job) > 1 else None
        fp = metrics.FreelanceParams.from_model_params(cfg.params)
        summary["p_I"] = metrics.p_I(fp) if fp.overloaded else None
    run.summary = summary


_CANDIDATES = {"entropy": "entropy", "quadratic": "quadratic", "two-class": "two_class"}


def cmd_lyapunov(run: Run, args) -> None:
    cfg = run.config
    params = lyapunov.RoutedModelParams.from_config(cfg)
    q = None if cfg.weights is None else tuple(cfg.weights)
    candidate = lyapunov.make_candidate(
        _CANDIDATES[args.candidate], params, config=lyapunov.LyapunovConfig(q)
    )
    norm = float(candidate.z_star.sum())
    box = cfg.scan_box if cfg.scan_box is not None else (0.0, 5.0 * norm)
    report = lyapunov.sign_scan(
        candidate, params, box, cfg.scan_samples, cfg.seed, min_norm=cfg.scan_min_norm
    )
    report.write_csv(run.path("scan.csv"))
    run.summary = dict(report.summary(), candidate=args.candidate, z_star=candidate.z_star, box=box)


def cmd_job_prob(run: Run, args) -> None:
    fp = metrics.FreelanceParams.from_model_params(run.config.params)
    fractions = metrics.exit_fractions(fp)
    with open(run.path("exit_fractions.csv"), "w", encoding="utf-8") as fh:
        fh.write("applications,fraction\n")
        for i, v in enumerate(fractions):
            fh.write(f"{i},{fmt(v)}\n")
    run.summary = {
        "u": metrics.solve_u(fp),
        "p_I": metrics.p_I(fp),
        "p_infinity": metrics.p_infinity(fp),
        "exit_fractions": fractions,
        "invariant": metrics.geometric_invariant(fp),
    }


COMMANDS = {
    "invariant": cmd_invariant,
    "fluid": cmd_fluid,
    "verify-integral": cmd_verify_integral,
    "simulate": cmd_simulate,
    "lyapunov": cmd_lyapunov,
    "job-prob": cmd_job_prob,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psfluid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario file (key = value lines)")
        p.add_argument("--seed", type=lambda s: int(s, 0), help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--replicas", type=int, help="override the replica count")
        p.add_argument("--scale-r", type=float, help="override the fluid scaling factor r")
        p.add_argument("--mode", choices=["ps", "freelance"], default="ps")
        p.add_argument("--candidate", choices=sorted(_CANDIDATES), default="entropy")
    return parser


def _resolve(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.replicas is not None:
        changes["replicas"] = args.replicas
    if args.scale_r is not None:
        changes["scale_r"] = args.scale_r
    return cfg.with_(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        config = _resolve(args)
    except (ConfigError, ModelError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = Run(args.command, config, out_dir)
    try:
        COMMANDS[args.command](run, args)
    except (ConfigError, lyapunov.MissingWeights, lyapunov.WrongDimension) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    run.write()
    for key, value in sorted(run.report()["summary"].items()):
        if not isinstance(value, (list, dict)):
            print(f"{key}: {value}")
    print(f"report: {out_dir / 'report.json'}")
    print(f"wall_time {time.perf_counter() - started:.3f}s", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
