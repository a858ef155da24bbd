"""Command-line front end: run one experiment from a flat INI configuration.

Example configuration::

    [system]
    n = 100
    B = 0.0
    p = 0.0790085735592717
    mu1 = 0.2265409196609864
    mu2 = 1.4142135623730951
    theta = 0.2

    [experiment]
    name = gauss-sup
    seed = 7
    n_paths = 20000

Every run writes ``manifest.json`` (inputs, seeds, library versions),
``results.csv`` and ``summary.txt`` to the output directory.  Replication
``i`` always uses child ``i`` of ``SeedSequence(seed)``, so results do not
depend on the degree of parallelism.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import platform
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelError, SystemParams, counterexample_a, counterexample_b, exponents, service_moments

EXPERIMENTS = ("exponent", "counterexample", "simulate", "dominance", "skorokhod",
               "gauss-sup", "limit-sim", "report")
STOCHASTIC = {"simulate", "dominance", "skorokhod", "gauss-sup", "limit-sim", "report"}

# experiment options with their types and defaults
OPTIONS = {
    "seed": (int, 0),
    "reps": (int, 10),
    "horizon": (float, 50.0),
    "burn_in": (float, 0.0),
    "dt": (float, 0.01),
    "n_paths": (int, 20_000),
    "resolution_fraction": (float, 1 / 50),
    "x_lo": (float, 2.0),
    "x_hi": (float, 3.5),
    "x_grid": (str, "0,0.5,1,1.5,2"),
    "theta_points": (int, 40),
    "tolerance": (float, 0.15),
    "generator": (str, "Q"),
}


@dataclass
class RunConfig:
    params: SystemParams
    experiment: str
    options: dict
    parallel: int = 1
    out: Path = Path("hwqueue-out")
    source: str = ""

    @property
    def seed(self) -> int:
        return self.options["seed"]

    @property
    def reps(self) -> int:
        return self.options["reps"]


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse and validate an INI configuration; raises ``ModelError``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ModelError("bad-config", str(exc)) from exc
    if "system" not in parser:
        raise ModelError("bad-config", "missing [system] section")
    params = SystemParams.from_mapping(dict(parser["system"]))
    raw = dict(parser["experiment"]) if "experiment" in parser else {}
    overrides = overrides or {}
    name = overrides.get("experiment") or raw.pop("name", None)
    raw.pop("name", None)
    if name not in EXPERIMENTS:
        raise ModelError("bad-config", f"unknown experiment {name!r}")
    options = {}
    for key, (kind, default) in OPTIONS.items():
        value = raw.pop(key, default)
        try:
            options[key] = kind(value)
        except (TypeError, ValueError) as exc:
            raise ModelError("bad-config", f"{key}={value!r}") from exc
    if raw:
        raise ModelError("bad-config", f"unknown options: {', '.join(sorted(raw))}")
    for key in ("seed", "reps"):
        if overrides.get(key) is not None:
            options[key] = int(overrides[key])
    for key in ("horizon", "dt", "resolution_fraction", "tolerance"):
        if not options[key] > 0:
            raise ModelError("bad-config", f"{key} must be positive")
    if name in STOCHASTIC and options["reps"] < 1:
        raise ModelError("bad-config", "reps must be at least 1")
    if not options["x_hi"] > options["x_lo"]:
        raise ModelError("bad-config", "x_hi must exceed x_lo")
    try:
        options["x_grid"] = [float(v) for v in str(options["x_grid"]).split(",")]
    except ValueError as exc:
        raise ModelError("bad-config", "x_grid must be comma separated numbers") from exc
    parallel = overrides.get("parallel") or os.cpu_count() or 1
    out = Path(overrides.get("out") or "hwqueue-out")
    return RunConfig(params, name, options, int(parallel), out, text)


# ---------------------------------------------------------------------------
# Replication helpers


def child_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def _map(fn, items, parallel: int):
    items = list(items)
    if parallel <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=parallel) as ex:
        return list(ex.map(fn, items))


@dataclass
class Outcome:
    rows: list
    summary: dict
    extra: dict = field(default_factory=dict)  # file name -> text
    ok: bool = True


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# Experiments


def exp_exponent(cfg: RunConfig) -> Outcome:
    prm = cfg.params
    rep = exponents(prm.theta, prm.mu1, prm.mu2)
    rows = [{"theta": prm.theta, "mu1": prm.mu1, "mu2": prm.mu2, **rep.as_dict()}]
    top = min(prm.mu1, prm.mu2)
    thetas = np.linspace(top / cfg.options["theta_points"], top, cfg.options["theta_points"], endpoint=False)
    fig = io.StringIO()
    w = csv.writer(fig, lineterminator="\n")
    w.writerow(["theta", "true_exponent", "dai_he_exponent"])
    for th in thetas:
        r = exponents(float(th), prm.mu1, prm.mu2)
        w.writerow([repr(float(th)), repr(r.true_exponent), repr(r.dai_he_exponent)])
    return Outcome(rows, rep.as_dict(), {"figure.csv": fig.getvalue()})


def exp_counterexample(cfg: RunConfig) -> Outcome:
    theta = cfg.params.theta
    rows = []
    for label, d in (("S_a", counterexample_a()), ("S_b", counterexample_b())):
        m1, m2 = service_moments(d)
        rep = exponents(theta, d.mu1, d.mu2)
        rows.append({"distribution": label, "p": d.p, "mu1": d.mu1, "mu2": d.mu2, "mean": m1,
                     "second_moment": m2, "true_exponent": rep.true_exponent,
                     "dai_he_exponent": rep.dai_he_exponent})
    diff = rows[0]["true_exponent"] - rows[1]["true_exponent"]
    return Outcome(rows, {"theta": theta, "true_exponent_difference": diff,
                          "dai_he_difference": rows[0]["dai_he_exponent"] - rows[1]["dai_he_exponent"]})


def _simulate_one(args):
    from .ctmc import steady_tail_estimate
    params, generator, horizon, burn_in, xs, seed = args
    est = steady_tail_estimate(params, horizon, 1, xs, burn_in or None, seed, generator)
    return est.survival, est.stderr, est.n_events


def exp_simulate(cfg: RunConfig) -> Outcome:
    from .ctmc import birth_death_tail
    prm, o = cfg.params, cfg.options
    xs = o["x_grid"]
    jobs = [(prm, o["generator"], o["horizon"], o["burn_in"], xs, s) for s in child_seeds(cfg.seed, cfg.reps)]
    res = _map(_simulate_one, jobs, cfg.parallel)
    surv = np.array([r[0] for r in res])
    mean = surv.mean(axis=0)
    se = surv.std(axis=0, ddof=1) / math.sqrt(len(res)) if len(res) > 1 else np.array([r[1] for r in res])[0]
    oracle = None
    if prm.mu1 == prm.mu2 == 1.0:
        oracle = birth_death_tail(prm.n, prm.lambda_n, prm.theta, xs)
    rows = []
    for j, x in enumerate(xs):
        row = {"x": x, "survival": float(mean[j]), "stderr": float(se[j])}
        if oracle is not None:
            row["oracle"] = float(oracle[j])
        rows.append(row)
    summary = {"generator": o["generator"], "events": int(sum(r[2] for r in res))}
    if oracle is not None:
        z = np.abs(mean - oracle) / np.maximum(se, 1e-300)
        summary["max_z"] = float(z.max())
    return Outcome(rows, summary)


def _dominance_one(args):
    from .ctmc import dominance_audit, init_coupled, make_rng, simulate
    params, horizon, seed = args
    init_seq, run_seq = seed.spawn(2)
    log = simulate("QPRIME", init_coupled(params, make_rng(init_seq)), horizon, make_rng(run_seq), params)
    rep = dominance_audit(log)
    return rep.passed, rep.n_events, None if rep.passed else str(rep)


def exp_dominance(cfg: RunConfig) -> Outcome:
    cfg.params.check_assumption(strict=True)
    jobs = [(cfg.params, cfg.options["horizon"], s) for s in child_seeds(cfg.seed, cfg.reps)]
    res = _map(_dominance_one, jobs, cfg.parallel)
    rows = [{"rep": i, "passed": int(r[0]), "events": r[1], "violation": r[2] or ""} for i, r in enumerate(res)]
    fails = sum(1 for r in res if not r[0])
    return Outcome(rows, {"paths": len(res), "violations": fails}, ok=fails == 0)


def _skorokhod_one(args):
    from .ctmc import init_tracking, make_rng, simulate
    from .skorokhod import err_process, verify_skoro1
    params, horizon, seed = args
    init_seq, run_seq = seed.spawn(2)
    log = simulate("QTILDE", init_tracking(params, make_rng(init_seq)), horizon, make_rng(run_seq), params)
    return verify_skoro1(log), err_process(log), len(log)


def exp_skorokhod(cfg: RunConfig) -> Outcome:
    jobs = [(cfg.params, cfg.options["horizon"], s) for s in child_seeds(cfg.seed, cfg.reps)]
    res = _map(_skorokhod_one, jobs, cfg.parallel)
    rows = [{"rep": i, "discrepancy": r[0], "err_sup": r[1], "events": r[2]} for i, r in enumerate(res)]
    worst = max(r[0] for r in res)
    return Outcome(rows, {"max_discrepancy": worst, "median_err_sup": float(np.median([r[1] for r in res]))},
                   ok=worst <= 1e-9)


def _gauss_sup(cfg: RunConfig):
    from .gaussproc import Kernel, metric_and_bounds, sample_sup, tail_fit
    prm, o = cfg.params, cfg.options
    mb = metric_and_bounds(prm.theta, prm.mu1, prm.mu2, prm.p)
    kernel = Kernel("GBAR", prm.p, prm.mu1, prm.mu2, prm.theta, prm.B)
    rng = np.random.Generator(np.random.Philox(child_seeds(cfg.seed, 1)[0]))
    samples = sample_sup(kernel, mb.diameter * o["resolution_fraction"], o["n_paths"], rng)
    sigma = mb.diameter
    fit = tail_fit(samples, o["x_lo"] * sigma, o["x_hi"] * sigma, rng=rng, min_exceed=10)
    return samples, fit


def exp_gauss_sup(cfg: RunConfig) -> Outcome:
    prm = cfg.params
    samples, fit = _gauss_sup(cfg)
    target = exponents(prm.theta, prm.mu1, prm.mu2).true_exponent
    rows = [{"x": float(x), "log_survival": float(y)} for x, y in zip(fit.x, fit.log_survival)]
    rel = fit.relative_error(target)
    summary = {"slope": fit.slope, "band_low": fit.band[0], "band_high": fit.band[1], "target": target,
               "relative_error": rel, "grid_points": len(samples.grid), "T_star": samples.horizon}
    return Outcome(rows, summary, {"sups.csv": samples.to_csv()}, ok=rel <= cfg.options["tolerance"])


def _limit(cfg: RunConfig):
    from .diffusion import limit_tail_campaign
    o = cfg.options
    return limit_tail_campaign(cfg.params, o["dt"], o["horizon"], cfg.reps, seed=cfg.seed,
                               burn_in=o["burn_in"] or None, n_boot=500)


def exp_limit_sim(cfg: RunConfig) -> Outcome:
    res = _limit(cfg)
    rows = [{"x": float(x), "survival": float(s)} for x, s in zip(res.xs, res.survival)]
    summary = {"slope": res.slope, "band_low": res.band[0], "band_high": res.band[1],
               "magnitude_low": res.magnitude_low, "true_exponent": res.true_exponent,
               "dai_he_exponent": res.dai_he_exponent, "exceeds_dai_he": res.exceeds_dai_he}
    return Outcome(rows, summary)


def exp_report(cfg: RunConfig) -> Outcome:
    prm = cfg.params
    rep = exponents(prm.theta, prm.mu1, prm.mu2)
    _, fit = _gauss_sup(cfg)
    lim = _limit(cfg)
    rows = [
        {"source": "theory", "estimate": rep.true_exponent, "low": rep.true_exponent, "high": rep.true_exponent},
        {"source": "conjecture", "estimate": rep.dai_he_exponent, "low": rep.dai_he_exponent,
         "high": rep.dai_he_exponent},
        {"source": "gauss-sup", "estimate": fit.slope, "low": fit.band[0], "high": fit.band[1]},
        {"source": "limit-sim", "estimate": lim.slope, "low": lim.band[0], "high": lim.band[1]},
    ]
    summary = {"true_exponent": rep.true_exponent, "dai_he_exponent": rep.dai_he_exponent,
               "gauss_sup_slope": fit.slope, "limit_sim_slope": lim.slope,
               "limit_exceeds_dai_he": lim.exceeds_dai_he}
    return Outcome(rows, summary)


RUNNERS = {
    "exponent": exp_exponent, "counterexample": exp_counterexample, "simulate": exp_simulate,
    "dominance": exp_dominance, "skorokhod": exp_skorokhod, "gauss-sup": exp_gauss_sup,
    "limit-sim": exp_limit_sim, "report": exp_report,
}


# ---------------------------------------------------------------------------
# Output


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    fields = list(rows[0].keys())
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def manifest(cfg: RunConfig) -> dict:
    import numba
    import scipy
    return {
        "package": "hwqueue", "version": __version__, "experiment": cfg.experiment,
        "params": cfg.params.to_mapping(), "options": cfg.options,
        "seed_rule": "replication i uses SeedSequence(seed).spawn(reps)[i] with Philox",
        "config": cfg.source,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "numba": numba.__version__},
    }


def _write(out: Path, name: str, text: str) -> None:
    (out / name).write_text(text)


def run(cfg: RunConfig) -> int:
    """Execute one experiment and write its artifacts; returns the exit status."""
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "manifest.json", json.dumps(manifest(cfg), indent=2, default=str) + "\n")
    try:
        outcome = RUNNERS[cfg.experiment](cfg)
    except Exception as exc:  # keep whatever was produced and mark the run
        _write(out, "FAILED", f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        print(f"experiment {cfg.experiment} failed: {exc}", file=sys.stderr)
        return 1
    _write(out, "results.csv", rows_to_csv(outcome.rows))
    for name, text in outcome.extra.items():
        _write(out, name, text)
    lines = [f"experiment: {cfg.experiment}", f"status: {'ok' if outcome.ok else 'check-failed'}"]
    lines += [f"{k}: {_fmt(v)}" for k, v in outcome.summary.items()]
    _write(out, "summary.txt", "\n".join(lines) + "\n")
    if not outcome.ok:
        _write(out, "FAILED", "result check failed; see summary.txt\n")
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hwqueue", description=__doc__.split("\n")[0])
    ap.add_argument("--config", required=True, help="INI file with [system] and [experiment] sections")
    ap.add_argument("--experiment", choices=EXPERIMENTS, help="override the experiment name")
    ap.add_argument("--seed", type=int, help="master seed")
    ap.add_argument("--reps", type=int, help="number of replications")
    ap.add_argument("--out", help="output directory (default: hwqueue-out)")
    ap.add_argument("--parallel", type=int, help="worker processes (default: available cores)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text, {"experiment": args.experiment, "seed": args.seed, "reps": args.reps,
                                  "out": args.out, "parallel": args.parallel})
    except (OSError, ModelError) as exc:
        print(f"hwqueue: invalid configuration: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
