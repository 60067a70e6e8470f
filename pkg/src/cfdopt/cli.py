"""Command-line entry point: ``cfdopt <subcommand>``.

Exit codes: 0 ok, 1 I/O or configuration, 2 estimation, 3 optimization,
4 simulation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .cfd import DischargeFit, PhasePerformance, curve_csv
from .config import ConfigError, RunConfig
from .core_io import TrajectoryFormatError, read_trajectories, summarize, write_trajectories
from .demand import (
    DegenerateDischarge,
    EstimationImpossible,
    InsufficientData,
    NoQueuedCV,
    estimate_demand,
    initial_plan,
    red_start_shifts,
)
from .optimizer import CandidateModel, CycleInfeasible, DualRingPlan, NoFeasibleCycle, PhaseModel, optimize
from .pipeline import run_pipeline, simulate_plan, within_frame
from .scenarios import SCENARIOS, Scenario
from .sim_harness import SampleSpec, SimulationError, evaluate_metrics, generate_arrivals, manifest, sample_cvs

logger = logging.getLogger("cfdopt")

EXIT_IO, EXIT_ESTIMATION, EXIT_OPTIMIZATION, EXIT_SIMULATION = 1, 2, 3, 4

_ERRORS = (
    ((OSError, TrajectoryFormatError, ConfigError, json.JSONDecodeError, KeyError), EXIT_IO),
    ((EstimationImpossible, NoQueuedCV, InsufficientData, DegenerateDischarge), EXIT_ESTIMATION),
    ((NoFeasibleCycle, CycleInfeasible), EXIT_OPTIMIZATION),
    ((SimulationError,), EXIT_SIMULATION),
)


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _dump(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _config(path) -> RunConfig:
    return RunConfig.from_json(path) if path else RunConfig()


def _scenario(name_or_path) -> Scenario:
    if name_or_path in SCENARIOS:
        return SCENARIOS[name_or_path]()
    return Scenario.from_dict(_load_json(name_or_path))


def threads_from(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("CFDOPT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@contextmanager
def _executor(n):
    if n <= 1:
        yield None
        return
    with ProcessPoolExecutor(max_workers=n) as ex:
        yield ex


def _params(args):
    return {k: v for k, v in vars(args).items() if k != "func"}


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.stem + ".manifest.json")


def _write_trace(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["C", "dphi", "f_hybrid"])
        for C, dphi, f in trace:
            w.writerow([f"{C:g}", f"{dphi:g}", repr(float(f))])


def _write_plot_data(models, plan: DualRingPlan, cfg: RunConfig, out_dir):
    """One ``S_a``/``S_d`` CSV per phase under ``plan``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cand = CandidateModel(models, plan.C, plan.dphi, cfg)
    perf = cand.performance(plan)
    for k, p in cand.phases.items():
        t_egs = plan.g_s[k - 1] + cfg.lost_time.startup
        text = curve_csv(cand.waves[k], PhasePerformance(**perf[k]), t_egs, p.fit)
        (out_dir / f"cfd_phase{k}.csv").write_text(text)


def phase_models_from(estimates: dict, trajectories, cfg: RunConfig):
    """Rebuild optimizer inputs from an estimate document and the CVs."""
    qr = cfg.queue_rule
    by_phase = {}
    for tr in trajectories:
        by_phase.setdefault(tr.phase_id, []).append(tr)
    pen = estimates.get("penetration")
    models = []
    for key, ph in sorted(estimates["phases"].items(), key=lambda kv: int(kv[0])):
        k = int(key)
        fit = DischargeFit(w_m=ph["w_m"], v=ph["v"], v_l=ph["v_l"], d0=cfg.d0, xi0=ph.get("xi0", 0.0))
        recs = [summarize(tr, fit.v, qr.stop_speed, qr.min_stop_duration) for tr in by_phase.get(k, [])]
        t_e = np.array([r.t_e for r in recs if r.t_e is not None])
        models.append(PhaseModel(k, int(ph["z"]), float(ph["lambda0"]), fit, arrival_times=t_e, penetration=pen))
    return models


def cmd_estimate(args):
    cfg = _config(args.config)
    trajs, report = read_trajectories(args.trajectories)
    if report.malformed:
        logger.warning("%d malformed rows skipped", report.malformed)
    est = estimate_demand(trajs, cfg, penetration=args.penetration)
    doc = est.to_dict()
    doc["initial_plan"] = initial_plan(cfg).to_dict()
    doc["red_start_shift"] = {str(k): v for k, v in red_start_shifts(initial_plan(cfg), cfg).items()}
    _dump(doc, args.out)
    if args.out not in (None, "-"):
        inputs = [args.trajectories] + ([args.config] if args.config else [])
        _dump(manifest("estimate", {}, cfg.digest(), inputs, _params(args)), _manifest_path(args.out))
    return 0


def cmd_optimize(args):
    cfg = _config(args.config)
    estimates = _load_json(args.estimates)
    trajs, _ = read_trajectories(args.trajectories)
    models = phase_models_from(estimates, trajs, cfg)
    with _executor(threads_from(args)) as ex:
        result = optimize(models, cfg, optimize_ref_point=args.ref_point, seed=args.seed, executor=ex)
    _dump(result.to_dict(), args.out)
    if args.out not in (None, "-"):
        out = Path(args.out)
        _write_trace(result.trace, args.trace or out.with_name(out.stem + "_trace.csv"))
        if args.plot_dir:
            _write_plot_data(models, result.plan, cfg, args.plot_dir)
        inputs = [args.estimates, args.trajectories] + ([args.config] if args.config else [])
        _dump(manifest("optimize", {"seed": args.seed}, cfg.digest(), inputs, _params(args)), _manifest_path(out))
    return 0


def cmd_simulate(args):
    sc = _scenario(args.scenario)
    if args.config:
        sc.config = _config(args.config)
    plan = DualRingPlan.from_dict(_load_json(args.plan)) if args.plan else initial_plan(sc.config)
    arrivals = generate_arrivals(sc.demand, args.seed)
    res = simulate_plan(sc, plan, arrivals)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trajs = within_frame(res.trajectories, sc.frame)
    if args.penetration is not None:
        trajs = sample_cvs(trajs, SampleSpec(args.penetration, args.seed))
    with open(out / "trajectories.csv", "w", newline="") as fh:
        write_trajectories(trajs, fh)
    truth = res.truth.to_dict()
    truth["overall"] = res.truth.overall(sc.demand.lanes)
    _dump(truth, out / "truth.json")
    _dump(plan.to_dict(), out / "plan.json")
    # estimation needs the plan in force during collection
    _dump(sc.config.to_dict(), out / "config.json")
    params = _params(args) | {"scenario_doc": sc.to_dict()}
    _dump(manifest("simulate", {"seed": args.seed}, sc.config.digest(), [args.plan] if args.plan else [], params),
          out / "manifest.json")
    return 0


def cmd_evaluate(args):
    out = {}
    if args.estimates:
        est = _load_json(args.estimates)
        truth = _load_json(args.truth)
        lam = {k: v["lambda0"] for k, v in est["phases"].items()}
        rate = truth.get("rate", truth)
        out.update(evaluate_metrics(lam, {k: rate[k] for k in lam}))
    if args.initial:
        ini = _load_json(args.initial)["overall"]
        opt = _load_json(args.optimized)["overall"]
        out["IMP"] = {m: evaluate_metrics(x_ini=ini[m], x_opt=opt[m])["IMP"] if ini[m] else None for m in ini}
    if not out:
        raise CliError("nothing to evaluate: pass --estimates/--truth or --initial/--optimized", EXIT_IO)
    _dump(out, args.out)
    return 0


def cmd_pipeline(args):
    sc = _scenario(args.scenario)
    if args.config:
        sc.config = _config(args.config)
    with _executor(threads_from(args)) as ex:
        report, art = run_pipeline(sc, args.penetration, args.seed, args.ref_point, ex)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cv_trajectories.csv", "w", newline="") as fh:
        write_trajectories(art["cvs"], fh)
    _dump(art["estimate"].to_dict(), out / "estimates.json")
    _dump(art["result"].to_dict(), out / "result.json")
    _write_trace(art["result"].trace, out / "trace.csv")
    for name in ("before", "after"):
        truth = art[name].truth.to_dict()
        truth["overall"] = art[name].truth.overall(sc.demand.lanes)
        _dump(truth, out / f"truth_{'initial' if name == 'before' else 'optimized'}.json")
    _write_plot_data(art["estimate"].phase_models(), art["result"].plan, sc.config, out / "plots")
    _dump(report, out / "report.json")
    params = _params(args) | {"scenario_doc": sc.to_dict()}
    _dump(manifest("pipeline", {"seed": args.seed}, sc.config.digest(), [], params), out / "manifest.json")
    _dump(report, None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfdopt", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker processes (env CFDOPT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="per-phase demand from CV trajectories")
    e.add_argument("--trajectories", required=True)
    e.add_argument("--config")
    e.add_argument("--penetration", type=float, help="known penetration; enables KDE at low rates")
    e.add_argument("--out", default="-")
    e.set_defaults(func=cmd_estimate)

    o = sub.add_parser("optimize", help="bi-level signal plan search")
    o.add_argument("--estimates", required=True)
    o.add_argument("--trajectories", required=True)
    o.add_argument("--config")
    o.add_argument("--ref-point", action="store_true", help="also optimize the reference shift")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default="-")
    o.add_argument("--trace", help="trace CSV path (default: <out>_trace.csv)")
    o.add_argument("--plot-dir", help="write S_a/S_d CSVs per phase here")
    o.set_defaults(func=cmd_optimize)

    s = sub.add_parser("simulate", help="simulate a plan on a scenario")
    s.add_argument("--scenario", default="demo", help="bundled name or scenario JSON")
    s.add_argument("--plan", help="plan JSON (default: the config's initial plan)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--penetration", type=float, help="write only sampled CVs")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("evaluate", help="MAPE of estimates and IMP between runs")
    v.add_argument("--estimates")
    v.add_argument("--truth")
    v.add_argument("--initial", help="truth.json of the initial plan")
    v.add_argument("--optimized", help="truth.json of the optimized plan")
    v.add_argument("--out", default="-")
    v.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("pipeline", help="simulate, estimate, optimize, re-simulate")
    pl.add_argument("--scenario", default="demo")
    pl.add_argument("--config")
    pl.add_argument("--penetration", type=float, default=0.1)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--ref-point", action="store_true")
    pl.add_argument("--out-dir", required=True)
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:
        for types, code in _ERRORS:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
