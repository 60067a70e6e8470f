"""Simulate, sample, estimate, optimize and re-simulate in one call."""

from __future__ import annotations

import logging

from .demand import estimate_demand, initial_plan
from .optimizer import optimize
from .sim_harness import SampleSpec, generate_arrivals, improvement, mape, run_simulation, sample_cvs

logger = logging.getLogger(__name__)

METRICS = ("delay", "queue", "stops", "throughput")


def within_frame(trajectories, frame):
    t0, t1 = frame
    return [tr for tr in trajectories if tr.t.size and tr.t[0] >= t0 and tr.t[-1] < t1]


def simulate_plan(scenario, plan, arrivals):
    cfg = scenario.config
    return run_simulation(plan, arrivals, scenario.geometry, scenario.demand.lanes, scenario.frame, cfg.lost_time)


def run_pipeline(scenario, penetration, seed=0, optimize_ref_point=False, executor=None, arrivals=None):
    """Return ``(report, artifacts)`` for one seeded replication."""
    cfg = scenario.config
    if arrivals is None:
        arrivals = generate_arrivals(scenario.demand, seed)
    plan0 = initial_plan(cfg)
    before = simulate_plan(scenario, plan0, arrivals)
    cvs = sample_cvs(before.trajectories, SampleSpec(penetration, seed))
    cvs = within_frame(cvs, scenario.frame)
    est = estimate_demand(cvs, cfg, penetration=penetration)
    result = optimize(est.phase_models(), cfg, optimize_ref_point, seed, executor)
    after = simulate_plan(scenario, result.plan, arrivals)

    lanes = scenario.demand.lanes
    ini, opt = before.truth.overall(lanes), after.truth.overall(lanes)
    imp = {}
    for m in METRICS:
        try:
            imp[m] = improvement(ini[m], opt[m])
        except ZeroDivisionError:
            imp[m] = None
    report = {
        "scenario": scenario.name,
        "seed": seed,
        "penetration": penetration,
        "n_cv": len(cvs),
        "mape_lambda0": mape(est.lambdas(), before.truth.rate),
        "ape_lambda0": {
            str(k): abs(lam - before.truth.rate[k]) / before.truth.rate[k] if before.truth.rate[k] else None
            for k, lam in sorted(est.lambdas().items())
        },
        "initial": ini,
        "optimized": opt,
        "IMP": imp,
        "plan": result.plan.to_dict(),
        "f_hybrid": result.objective.f_hybrid,
    }
    artifacts = {"estimate": est, "result": result, "before": before, "after": after, "cvs": cvs}
    return report, artifacts
