"""Reproducible experiment runner.

One JSON config file describes an experiment; ``kk <task> --config cfg.json
[--seed n] [--out dir]`` executes it and writes a manifest (config echo,
version, wall time, summary metrics) next to the task artifacts.  CSV output
is RFC 4180 with "." decimals and 17 significant digits; sample batches go to
the flat binary format of :mod:`kolmokit.montecarlo`.  Exit codes: 0 success,
2 config validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, _kernels, closedform, geometry
from .coefficients import SamplingPlan, audit_assumptions, make_model
from .control import energy_equivalence, solve_control
from .errors import DomainError, ModelError, NumericError, ValidationError
from .flow import tilde_flow
from .montecarlo import SimConfig, bound_audit, rate_fit, save_samples, simulate
from .parametrix import QuadratureSpec, density_series

TASKS = ("simulate", "density", "parametrix", "control",
         "audit-bounds", "audit-rates", "audit-assumptions")
STOCHASTIC_TASKS = ("simulate", "audit-bounds")


class ExperimentConfig:
    """Validated experiment description; raises ValidationError naming the field."""

    def __init__(self, raw: dict, task: str, out_dir=None, seed=None):
        if task not in TASKS:
            raise ValidationError(f"unknown task {task!r}", field="task")
        self.task = task
        self.raw = dict(raw)
        if seed is not None:
            self.raw["seed"] = seed
        if out_dir is not None:
            self.raw["out"] = str(out_dir)

        model_cfg = self.raw.get("model")
        if not isinstance(model_cfg, dict) or "id" not in model_cfg:
            raise ValidationError("config needs model.id", field="model.id")
        try:
            self.model = make_model(model_cfg["id"], d=int(model_cfg.get("d", 1)),
                                    **model_cfg.get("params", {}))
        except (DomainError, TypeError) as exc:
            raise ValidationError(f"bad model section: {exc}", field="model") from exc

        self.out = self.raw.get("out", "kk-out")
        self.seed = self.raw.get("seed")
        if task in STOCHASTIC_TASKS and self.seed is None:
            raise ValidationError(f"task {task} requires a seed", field="seed")

        if task in STOCHASTIC_TASKS:
            sim = self.raw.get("sim")
            if not isinstance(sim, dict):
                raise ValidationError("stochastic tasks need a sim section", field="sim")
            for key in ("nsteps", "npaths"):
                if int(sim.get(key, 0)) < 1:
                    raise ValidationError(f"sim.{key} must be >= 1", field=f"sim.{key}")
            self.sim = SimConfig(int(sim["nsteps"]), int(sim["npaths"]), int(self.seed),
                                 sim.get("scheme", "euler"), sim.get("workers"))
        else:
            self.sim = None

        series = self.raw.get("series", {})
        self.N = int(series.get("N", 3))
        quad_keys = {k: series[k] for k in
                     ("time_nodes", "space_nodes", "halfwidth") if k in series}
        self.quad = QuadratureSpec(**quad_keys)

    def queries(self, field_name="queries"):
        qs = self.raw.get(field_name)
        if not isinstance(qs, list) or not qs:
            raise ValidationError(f"task {self.task} needs a non-empty {field_name} list",
                                  field=field_name)
        out = []
        for i, q in enumerate(qs):
            try:
                out.append((float(q["s"]), geometry.as_vec(q["x"]),
                            float(q["t"]), geometry.as_vec(q["y"])))
            except (KeyError, TypeError, DomainError) as exc:
                raise ValidationError(f"{field_name}[{i}] malformed: {exc}",
                                      field=f"{field_name}[{i}]") from exc
        return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])


def _vec_cols(prefix, d):
    return [f"{prefix}1_{i}" for i in range(d)] + [f"{prefix}2_{i}" for i in range(d)]


def run_experiment(config: dict, task: str, out_dir=None, seed=None) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        cfg = ExperimentConfig(config, task, out_dir, seed)
        os.makedirs(cfg.out, exist_ok=True)
        probe = os.path.join(cfg.out, ".writable")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except ValidationError as exc:
        print(f"config error ({exc.field}): {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error (out): output dir not writable: {exc}", file=sys.stderr)
        return 2

    started = time.perf_counter()
    try:
        summary, artifacts = _TASKS[cfg.task](cfg)
    except ValidationError as exc:
        print(f"config error ({exc.field}): {exc}", file=sys.stderr)
        return 2
    except (NumericError, ModelError, DomainError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3

    manifest = {
        "task": cfg.task,
        "config": cfg.raw,
        "version": __version__,
        "backend": _kernels.backend(),
        "wall_time_s": time.perf_counter() - started,
        "summary": summary,
        "artifacts": artifacts,
    }
    with open(os.path.join(cfg.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return 0


def _task_simulate(cfg: ExperimentConfig):
    q = cfg.raw.get("start", {})
    s, t = float(q.get("s", 0.0)), float(q.get("t", 1.0))
    x = geometry.as_vec(q.get("x", [0.0] * (2 * cfg.model.d)))
    batch = simulate(cfg.model, s, x, t, cfg.sim)
    path = os.path.join(cfg.out, "samples.bin")
    save_samples(path, batch)
    summary = {
        "npaths": int(batch.samples.shape[0]),
        "excluded": batch.excluded,
        "mean": batch.samples.mean(axis=0).tolist(),
    }
    return summary, ["samples.bin"]


def _density_value(cfg: ExperimentConfig, s, x, t, y):
    if cfg.model.closed_form == "kolmogorov":
        return closedform.kolmogorov_density(s, x, t, y), "closed-form", 0.0
    res = density_series(cfg.model, s, x, t, y, cfg.N, cfg.quad)
    return res.value, "parametrix", res.remainder


def _task_density(cfg: ExperimentConfig):
    d = cfg.model.d
    rows = []
    for (s, x, t, y) in cfg.queries():
        value, provenance, err = _density_value(cfg, s, x, t, y)
        rows.append([s] + x.tolist() + [t] + y.tolist() + [value, provenance, err])
    header = ["s"] + _vec_cols("x", d) + ["t"] + _vec_cols("y", d) + \
        ["value", "provenance", "error_indicator"]
    _write_csv(os.path.join(cfg.out, "density.csv"), header, rows)
    return {"queries": len(rows)}, ["density.csv"]


def _task_parametrix(cfg: ExperimentConfig):
    d = cfg.model.d
    records, rows = [], []
    for (s, x, t, y) in cfg.queries():
        res = density_series(cfg.model, s, x, t, y, cfg.N, cfg.quad)
        records.append({
            "query": {"s": s, "x": x.tolist(), "t": t, "y": y.tolist()},
            "value": res.value,
            "terms": res.terms,
            "remainder": res.remainder,
            "meta": {"orders": res.orders, "time_nodes": cfg.quad.time_nodes,
                     "space_nodes": cfg.quad.space_nodes},
        })
        rows.append([s] + x.tolist() + [t] + y.tolist()
                    + [res.value, res.remainder] + res.terms)
    with open(os.path.join(cfg.out, "parametrix.json"), "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
    header = ["s"] + _vec_cols("x", d) + ["t"] + _vec_cols("y", d) + \
        ["value", "remainder"] + [f"term_{j}" for j in range(cfg.N)]
    _write_csv(os.path.join(cfg.out, "parametrix.csv"), header, rows)
    return {"queries": len(rows)}, ["parametrix.json", "parametrix.csv"]


def _task_control(cfg: ExperimentConfig):
    d = cfg.model.d
    tol = float(cfg.raw.get("control", {}).get("tol", 1e-9))
    rows, artifacts = [], []
    for i, (s, x, t, y) in enumerate(cfg.queries("cases" if "cases" in cfg.raw else "queries")):
        sol = solve_control(cfg.model, s, x, t, y, tol=tol)
        energy, D, ratio = energy_equivalence(cfg.model, s, x, t, y, tol=tol)
        name = f"control_{i:02d}.csv"
        sol.to_csv(os.path.join(cfg.out, name))
        artifacts.append(name)
        rows.append([s] + x.tolist() + [t] + y.tolist()
                    + [sol.energy, sol.terminal_error, float(sol.iterations),
                       float(sol.segments), D, ratio])
    header = ["s"] + _vec_cols("x", d) + ["t"] + _vec_cols("y", d) + \
        ["energy", "terminal_error", "iterations", "segments", "scaled_distance", "ratio"]
    _write_csv(os.path.join(cfg.out, "control.csv"), header, rows)
    return {"cases": len(rows)}, ["control.csv"] + artifacts


def _bounds_grid(cfg: ExperimentConfig):
    section = cfg.raw.get("bounds")
    if not isinstance(section, dict):
        raise ValidationError("audit-bounds needs a bounds section", field="bounds")
    if "grid" in section:
        return [(float(g["s"]), geometry.as_vec(g["x"]), float(g["t"]),
                 geometry.as_vec(g["y"])) for g in section["grid"]], section
    for key in ("starts", "spans", "offsets"):
        if key not in section:
            raise ValidationError(f"bounds.{key} missing", field=f"bounds.{key}")
    s0 = float(section.get("s", 0.0))
    grid = []
    for x in section["starts"]:
        xv = geometry.as_vec(x)
        for span in section["spans"]:
            t = s0 + float(span)
            center = tilde_flow(cfg.model, s0, t, xv).end
            diag = geometry.scale_vector(float(span), cfg.model.d)
            for off in section["offsets"]:
                grid.append((s0, xv, t, center + diag * np.asarray(off, dtype=float)))
    return grid, section


def _task_audit_bounds(cfg: ExperimentConfig):
    grid, section = _bounds_grid(cfg)
    report = bound_audit(cfg.model, grid, cfg.sim,
                         flow_choice=section.get("flow", "tilde"),
                         h=section.get("h"))
    d = cfg.model.d
    rows = [[p.s] + p.x + [p.t] + p.y
            + [p.q, p.value, p.stderr, p.ess, p.needed_c,
               int(p.violation), int(p.low_ess)] for p in report.points]
    header = ["s"] + _vec_cols("x", d) + ["t"] + _vec_cols("y", d) + \
        ["q", "value", "stderr", "ess", "needed_c", "violation", "low_ess"]
    _write_csv(os.path.join(cfg.out, "bounds.csv"), header, rows)
    summary = {"C0": report.c0, "lambda0": report.lam0,
               "violations": report.n_violations, "flagged": len(report.flagged)}
    return summary, ["bounds.csv"]


def _task_audit_rates(cfg: ExperimentConfig):
    if cfg.model.closed_form != "kolmogorov":
        raise ValidationError("audit-rates needs the closed-form model", field="model.id")
    section = cfg.raw.get("rates", {})
    times = [float(v) for v in section.get("times", [2.0**-k for k in range(1, 7)])]
    derivs = section.get("derivs", ["x1", "x1x1", "x2"])
    sup_rows, fit_rows = [], []
    summary = {}
    for deriv in derivs:
        pairs = [(t, closedform.kolmogorov_sup_gradient(t, cfg.model.d, deriv))
                 for t in times]
        fit = rate_fit(pairs)
        sup_rows += [[deriv, t, v] for t, v in pairs]
        fit_rows.append([deriv, fit.slope, fit.intercept, fit.r2])
        summary[deriv] = fit.slope
    _write_csv(os.path.join(cfg.out, "rates_sup.csv"), ["deriv", "t", "sup_value"], sup_rows)
    _write_csv(os.path.join(cfg.out, "rates_fit.csv"),
               ["deriv", "slope", "intercept", "r2"], fit_rows)
    return summary, ["rates_sup.csv", "rates_fit.csv"]


def _task_audit_assumptions(cfg: ExperimentConfig):
    section = cfg.raw.get("assumptions", {})
    plan = SamplingPlan(
        n_pairs=int(section.get("n_pairs", 10_000)),
        box=float(section.get("box", 3.0)),
        times=tuple(section.get("times", (0.0, 0.5, 1.0))),
        seed=int(section.get("seed", cfg.seed or 0)),
    )
    report = audit_assumptions(cfg.model, plan)
    _write_csv(
        os.path.join(cfg.out, "assumptions.csv"),
        ["sigma_holder", "f2_taylor_quotient", "f1_oscillation",
         "eig_min", "eig_max", "grad_f2_sv_min", "passed"],
        [[report.sigma_holder, report.f2_taylor_quotient, report.f1_oscillation,
          report.eig_min, report.eig_max, report.grad_f2_sv_min, int(report.passed)]],
    )
    return {"passed": report.passed}, ["assumptions.csv"]


_TASKS = {
    "simulate": _task_simulate,
    "density": _task_density,
    "parametrix": _task_parametrix,
    "control": _task_control,
    "audit-bounds": _task_audit_bounds,
    "audit-rates": _task_audit_rates,
    "audit-assumptions": _task_audit_assumptions,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kk", description=__doc__)
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error (config): cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    return run_experiment(config, args.task, out_dir=args.out, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
