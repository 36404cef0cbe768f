"""Command-line orchestration of the scenario pipeline.

Subcommands run the stages in dependency order; all randomness flows from
the config's master seed (overridable with --seed) so reruns are
reproducible.  Exit codes: 1 config error, 2 solver non-convergence,
3 validation failure.

A scenario is one JSON document with sections ``model`` (constants plus
catalogue-named coefficient and cost functions; see
:mod:`debtceiling.config` and README for the full schema), ``grid``
(resolution and solver tolerances), ``mc`` (paths, horizon, step, master
seed, initial state), and ``outputs`` (directory and artifact list).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, control, filtering, model, stopping, validation
from .config import ScenarioConfig, load_config
from .errors import DebtCeilingError, ModelValidationError, NoConvergence

EXIT_CONFIG = 1
EXIT_SOLVER = 2
EXIT_VALIDATION = 3


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, mc=dataclasses.replace(cfg.mc, seed=args.seed))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, outputs_dir=args.out)
    return cfg


def _outdir(cfg: ScenarioConfig) -> Path:
    out = Path(cfg.outputs_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    def __init__(self, cfg: ScenarioConfig):
        import scipy

        self.doc = {
            "config_hash": cfg.config_hash(),
            "seed": cfg.mc.seed,
            "versions": {
                "debtceiling": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": sys.version.split()[0],
            },
            "timings_s": {},
        }

    def time(self, stage: str):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.doc["timings_s"][stage] = round(time.perf_counter() - self.t0, 3)

        return _Timer()

    def write(self, out: Path):
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _simulate_paths(cfg: ScenarioConfig, out: Path, n_paths: int = 1) -> list:
    paths = []
    for idx in range(n_paths):
        rng = model.path_rng(cfg.mc.seed, idx)
        regime = model.simulate_regime(
            cfg.params.generator, np.asarray(cfg.mc.y0), cfg.mc.horizon, cfg.mc.dt, rng
        )
        path = model.simulate_uncontrolled(
            cfg.params, regime, cfg.mc.x0, cfg.mc.eta0, rng,
            seed_record=(cfg.mc.seed, idx),
        )
        paths.append(path)
        with open(out / f"path_{idx:04d}.csv", "w", newline="") as fh:
            model.path_to_csv(path, fh)
    return paths


def cmd_simulate(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("simulate"):
        n = int(cfg.raw.get("outputs", {}).get("n_path_files", 1))
        _simulate_paths(cfg, out, n)
    manifest.write(out)
    return 0


def cmd_filter(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("filter"):
        if args.observations:
            with open(args.observations) as fh:
                obs = filtering.Observations.from_csv(fh)
        else:
            path = _simulate_paths(cfg, out, 1)[0]
            obs = filtering.Observations.from_sample_path(path)
        fp = filtering.run_filter(cfg.params, obs, np.asarray(cfg.mc.y0))
        with open(out / "filter_path.csv", "w", newline="") as fh:
            filtering.filter_path_to_csv(fp, fh)
    manifest.write(out)
    return 0


def _solve_stopping(cfg: ScenarioConfig):
    bounds = stopping.one_dim_bounds(cfg.params, n_nodes=cfg.grid.one_dim_nodes)
    grid = stopping.build_grid(cfg.params, bounds, cfg.grid.n_u, cfg.grid.n_y,
                               cfg.grid.y_lo, cfg.grid.y_hi)
    surface = stopping.solve_variational_inequality(
        cfg.params, grid, omega=cfg.grid.omega, tol_psor=cfg.grid.tol_psor,
        tol_comp=cfg.grid.tol_comp, max_sweeps=cfg.grid.max_sweeps,
    )
    boundary = stopping.extract_boundary(cfg.params, surface, bounds)
    return bounds, surface, boundary


def cmd_solve_stopping(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("solve_stopping"):
        bounds, surface, boundary = _solve_stopping(cfg)
        with open(out / "surface.csv", "w", newline="") as fh:
            stopping.surface_to_csv(surface, fh)
        with open(out / "boundary.csv", "w", newline="") as fh:
            stopping.boundary_to_csv(boundary, fh)
        fit = stopping.smooth_fit_report(surface)
        stats = dict(surface.stats)
        stats.pop("elapsed_s", None)
        stats.update({
            "x_star_lower": bounds.x_star_lower,
            "x_star_upper": bounds.x_star_upper,
            "smooth_fit_max_vx_err": fit.max_err_vx,
            "smooth_fit_max_vy_err": fit.max_err_vy,
        })
        with open(out / "stopping_stats.json", "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
    manifest.write(out)
    return 0


def cmd_solve_control(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("solve_control"):
        _, surface, boundary = _solve_stopping(cfg)
        V = control.value_from_stopping(surface)
        _, report = control.hjb_residual(cfg.params, surface, boundary, V)
        grid = surface.grid
        with open(out / "control_value.csv", "w", newline="") as fh:
            import csv as _csv

            w = _csv.writer(fh)
            w.writerow(["x", "y", "V", "Vx"])
            for i in range(len(grid.x)):
                for j in range(len(grid.y)):
                    w.writerow([repr(float(grid.x[i])), repr(float(grid.y[j])),
                                repr(float(V.V[i, j])), repr(float(V.Vx[i, j]))])
        with open(out / "hjb_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    manifest.write(out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("evaluate"):
        _, surface, boundary = _solve_stopping(cfg)
        V = control.value_from_stopping(surface)
        mc = cfg.mc
        d_med = float(np.median(boundary.d))
        policies = [control.ReflectAtBoundary(boundary), control.DoNothing(), control.full_reduction()]
        policies += [control.ConstantCeiling(f * d_med) for f in (0.5, 0.75, 1.0, 1.25, 1.5)]
        estimates = [
            control.evaluate_cost(cfg.params, pol, mc.x0, mc.y0[0], mc.horizon, mc.dt,
                                  mc.n_paths, mc.seed + 17 * k)
            for k, pol in enumerate(policies)
        ]
        with open(out / "policy_comparison.csv", "w", newline="") as fh:
            control.policy_comparison_to_csv(estimates, mc.x0, mc.y0[0], fh)
        points = [(0.5 * d_med, 0.3), (0.7 * d_med, 0.5), (0.9 * d_med, 0.7)]
        rows = control.value_consistency_check(
            cfg.params, V, boundary, points, mc.n_paths, mc.horizon, mc.dt, mc.seed
        )
        with open(out / "consistency.csv", "w", newline="") as fh:
            control.consistency_to_csv(rows, fh)
    manifest.write(out)
    return 0


def run_scenario(cfg: ScenarioConfig) -> Path:
    """Execute the stages requested by the config's artifact list, in
    dependency order, writing every corresponding report."""
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    artifacts = set(cfg.artifacts)
    paths = []
    if artifacts & {"paths", "filter"}:
        with manifest.time("simulate"):
            n = int(cfg.raw.get("outputs", {}).get("n_path_files", 1))
            paths = _simulate_paths(cfg, out, n)
    if "filter" in artifacts:
        with manifest.time("filter"):
            obs = filtering.Observations.from_sample_path(paths[0])
            fp = filtering.run_filter(cfg.params, obs, np.asarray(cfg.mc.y0))
            with open(out / "filter_path.csv", "w", newline="") as fh:
                filtering.filter_path_to_csv(fp, fh)
    needs_solve = artifacts & {"surface", "boundary", "policy", "consistency"}
    if needs_solve:
        with manifest.time("solve_stopping"):
            bounds, surface, boundary = _solve_stopping(cfg)
        if "surface" in artifacts:
            with open(out / "surface.csv", "w", newline="") as fh:
                stopping.surface_to_csv(surface, fh)
        if "boundary" in artifacts:
            with open(out / "boundary.csv", "w", newline="") as fh:
                stopping.boundary_to_csv(boundary, fh)
    if artifacts & {"policy", "consistency"}:
        with manifest.time("evaluate"):
            V = control.value_from_stopping(surface)
            mc = cfg.mc
            d_med = float(np.median(boundary.d))
            if "policy" in artifacts:
                policies = [control.ReflectAtBoundary(boundary), control.DoNothing(),
                            control.full_reduction()]
                policies += [control.ConstantCeiling(f * d_med) for f in (0.5, 0.75, 1.0, 1.25, 1.5)]
                estimates = [
                    control.evaluate_cost(cfg.params, pol, mc.x0, mc.y0[0], mc.horizon, mc.dt,
                                          mc.n_paths, mc.seed + 17 * k)
                    for k, pol in enumerate(policies)
                ]
                with open(out / "policy_comparison.csv", "w", newline="") as fh:
                    control.policy_comparison_to_csv(estimates, mc.x0, mc.y0[0], fh)
            if "consistency" in artifacts:
                points = [(0.5 * d_med, 0.3), (0.7 * d_med, 0.5), (0.9 * d_med, 0.7)]
                rows = control.value_consistency_check(
                    cfg.params, V, boundary, points, mc.n_paths, mc.horizon, mc.dt, mc.seed
                )
                with open(out / "consistency.csv", "w", newline="") as fh:
                    control.consistency_to_csv(rows, fh)
    manifest.write(out)
    return out


def cmd_run(args) -> int:
    run_scenario(_load(args))
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    out = _outdir(cfg)
    manifest = Manifest(cfg)
    with manifest.time("validate"):
        results = validation.run_validation(cfg)
        with open(out / "validation_report.json", "w") as fh:
            validation.write_report(cfg, results, fh)
    manifest.write(out)
    if not all(r.passed for r in results):
        return EXIT_VALIDATION
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debtceiling",
        description="Hidden-regime debt-ratio toolkit: simulate, filter, solve, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": cmd_simulate,
        "filter": cmd_filter,
        "solve-stopping": cmd_solve_stopping,
        "solve-control": cmd_solve_control,
        "evaluate": cmd_evaluate,
        "validate": cmd_validate,
        "run": cmd_run,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "filter":
            p.add_argument("--observations", default=None,
                           help="observation CSV to filter instead of simulating")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelValidationError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoConvergence as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DebtCeilingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
