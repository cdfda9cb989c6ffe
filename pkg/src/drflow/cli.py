"""Batch front end: ``drflow {discrete,cdr,paths,scaling,phase,semigroup}``.

A run takes one JSON config (``--config``), lets flags override its fields,
and writes CSV tables, ``gates.csv``, a gnuplot script and ``manifest.json``
into the output directory.  Feeding the manifest back through ``--config``
reproduces the run bit for bit.

Exit codes: 0 all gates pass, 1 a gate failed, 2 bad configuration,
3 numerical abort (tail truncation).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import cdr_flow, dr_discrete, mc_sim, scaling, semigroup
from .measure import (
    InitialMeasureSpec,
    MeasureError,
    OffspringDistribution,
    TailTruncationError,
    check_step,
    moment,
    tv_distance,
)
from .wasserstein import exact_w, upper_w

EXIT_OK, EXIT_GATE, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
COMMANDS = ("discrete", "cdr", "paths", "scaling", "phase", "semigroup")
DEFAULT_TOL = {"mass": 1e-8, "moment_slack": 1e-8, "ck": 1e-8, "entrance": 1e-8, "bracket": 1e-6}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "discrete"
    a: float = 1.0
    alpha: float = 1.0
    q: list = field(default_factory=lambda: [1.0])
    initial: dict = field(default_factory=lambda: {"kind": "dirac", "p": 0.0, "x0": 2.0})
    h: float = None  # 1 for discrete recursions, 2^-6 otherwise
    x_max: float = None  # 2048 for discrete recursions, 64 otherwise
    T: float = 1.0
    n: int = 10
    k_list: list = field(default_factory=lambda: [16, 64, 256])
    t_list: list = None  # T/2 and T
    n_paths: int = 10000
    seed: int = 0
    workers: int = 1
    out: str = "drflow_out"
    picard_iter: int = 12
    p_min: float = 0.0
    p_max: float = 1.0
    p_count: int = 21
    bisect_steps: int = 30
    eps_F: float = dr_discrete.DEFAULT_EPS_F
    r: float = 0.0
    n_pairs: int = 32
    kind: str = "continuous"
    events: bool = False
    tol: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def tolerance(self, name):
        return float(self.tol.get(name, DEFAULT_TOL[name]))

    @property
    def offspring(self):
        return OffspringDistribution(np.asarray(self.q, float))

    @property
    def initial_spec(self):
        return InitialMeasureSpec.from_dict(self.initial)

    def discrete_model(self):
        return dr_discrete.DiscreteModel(self.alpha, self.offspring, self.initial_spec, h=self.h, x_max=self.x_max)

    def cdr_model(self):
        return cdr_flow.CdrModel(self.a, self.offspring, self.initial_spec, h=self.h, x_max=self.x_max, T=self.T)


def _on_lattice(t, h):
    return abs(t / h - round(t / h)) <= 1e-9


def validate(cfg):
    """Re-check every cross-module constraint; raises :class:`ConfigError`."""
    try:
        if cfg.command not in COMMANDS:
            raise ConfigError(f"unknown command {cfg.command!r}")
        lattice_only = cfg.command in ("discrete", "phase") or (cfg.command == "paths" and cfg.kind == "discrete")
        if cfg.h is None:
            cfg.h = 1.0 if lattice_only else 2.0**-6
        if cfg.x_max is None:
            cfg.x_max = 2048.0 if lattice_only else 64.0
        check_step(cfg.h)
        cfg.offspring
        cfg.initial_spec
        for name in cfg.tol:
            if name not in DEFAULT_TOL:
                raise ConfigError(f"unknown tolerance {name!r}; known: {sorted(DEFAULT_TOL)}")
        if not 0 <= cfg.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if cfg.workers < 1 or cfg.n_paths < 1 or cfg.n < 0:
            raise ConfigError("workers and n_paths must be >= 1, n >= 0")
        if lattice_only:
            cfg.discrete_model()
            if not (0 <= cfg.p_min <= cfg.p_max <= 1 and cfg.p_count >= 1):
                raise ConfigError("need 0 <= p_min <= p_max <= 1 and p_count >= 1")
        else:
            model = cfg.cdr_model()
            if cfg.t_list is None:
                cfg.t_list = [round(cfg.T / 2 / model.dt) * model.dt, cfg.T]
            for t in cfg.t_list:
                if not 0 <= t <= cfg.T or not _on_lattice(t, cfg.h):
                    raise ConfigError(f"t={t} must lie on the time lattice inside [0, T={cfg.T}]")
            if not 0 <= cfg.r <= cfg.T or not _on_lattice(cfg.r, cfg.h):
                raise ConfigError(f"r={cfg.r} must lie on the time lattice inside [0, T]")
        if cfg.command == "scaling":
            ok = scaling.admissible_k(cfg.h)
            bad = [k for k in cfg.k_list if k not in ok or k < cfg.a]
            if bad:
                raise ConfigError(f"k values {bad} not admissible for h={cfg.h} (need k >= a and k in {ok})")
        if cfg.kind not in ("continuous", "discrete"):
            raise ConfigError("kind must be 'continuous' or 'discrete'")
    except MeasureError as e:
        raise ConfigError(str(e)) from None
    return cfg


class Gates:
    def __init__(self):
        self.rows = []

    def add(self, name, value, threshold, ok=None):
        ok = value <= threshold if ok is None else ok
        self.rows.append({"gate": name, "value": float(value), "threshold": float(threshold), "ok": bool(ok)})

    @property
    def ok(self):
        return all(r["ok"] for r in self.rows)


def write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_gnuplot(path, plots):
    """``plots``: list of ``(csv file, x column, [y columns], title, extra commands)``."""
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set terminal pngcairo size 900,600"]
    for csv_name, x, ys, title, extra in plots:
        stem = Path(csv_name).stem
        lines += [f"set output '{stem}.png'", f"set title '{title}'", f"set xlabel '{x}'", *extra]
        parts = [f"'{csv_name}' using '{x}':'{y}' with linespoints title '{y}'" for y in ys]
        lines.append("plot " + ", ".join(parts))
        lines += ["unset logscale", ""]
    Path(path).write_text("\n".join(lines))


# --- subcommands -----------------------------------------------------------


def cmd_discrete(cfg, out):
    model = cfg.discrete_model()
    traj = dr_discrete.evolve(model, cfg.n)
    dr_discrete.write_trajectory_csv(traj, model, out / "trajectory.csv")
    g = Gates()
    g.add("mass", max(abs(mu.total - 1.0) for mu in traj), cfg.tolerance("mass"))
    slack = cfg.tolerance("moment_slack")
    ex1 = max((moment(b, 1) - model.growth1 * moment(a, 1) for a, b in zip(traj, traj[1:])), default=0.0)
    ex2 = max((moment(b, 2) - model.growth2 * moment(a, 2) for a, b in zip(traj, traj[1:])), default=0.0)
    g.add("moment1_excess", ex1, slack)
    g.add("moment2_excess", ex2, slack)
    plots = [("trajectory.csv", "n", ["proxy", "sustainability"], "discrete trajectory", ["set logscale y"])]
    return g, plots


def cmd_cdr(cfg, out):
    model = cfg.cdr_model()
    flow = cdr_flow.march_solve(model)
    cdr_flow.write_flow_csv(flow, out / "flow.csv")
    g = Gates()
    g.add("mass", max(abs(s.total - 1.0) for s in flow.slices), cfg.tolerance("mass"))
    n_it = cfg.picard_iter
    tail = cdr_flow.picard_tail_bound(model.a, model.q.m1, model.T, n_it)
    pic = cdr_flow.picard_solve(model, model.T, n_it)
    w = exact_w(pic, flow.at(model.T), with_plan=False, max_support=None).value
    g.add("picard_vs_march", w, 5 * (model.dt + tail))
    res = cdr_flow.form_residuals(flow, model)
    write_csv(out / "residuals.csv", [{"form": k, "residual": float(res[k])} for k in ("form2", "form3", "form4", "mass")],
              ["form", "residual"])
    g.add("form_mass", res["mass"], cfg.tolerance("mass"))
    plots = [("flow.csv", "t", ["moment1", "mass_at_zero"], "flow moments", [])]
    return g, plots


def cmd_paths(cfg, out):
    g = Gates()
    if cfg.kind == "discrete":
        model = cfg.discrete_model()
        laws = dr_discrete.evolve(model, cfg.n)
        ens = mc_sim.simulate_discrete(model, laws, cfg.n, cfg.n_paths, seed=cfg.seed)
        checkpoints = sorted({0, cfg.n // 2, cfg.n})
        for c in checkpoints:
            emp = mc_sim.empirical_measure(ens, c, x_max=model.x_max)
            budget = max(4 / math.sqrt(cfg.n_paths), 3 * mc_sim.tv_budget(laws[c], cfg.n_paths))
            g.add(f"tv_n{c}", tv_distance(emp, laws[c]), budget)
        mart = mc_sim.martingale_residual(ens, laws, checkpoints=[c for c in checkpoints if c > 0] or [0])
        a_eff = model.alpha
    else:
        model = cfg.cdr_model()
        flow = cdr_flow.march_solve(model)
        ens = mc_sim.simulate_cdr(flow, model.T, cfg.n_paths, seed=cfg.seed)
        checkpoints = sorted(set(cfg.t_list))
        for t in checkpoints:
            emp = mc_sim.empirical_measure(ens, t, x_max=model.x_max)
            mu = flow.at(t)
            stat = 3 * scaling.stat_budget(mu) / math.sqrt(cfg.n_paths)
            g.add(f"upper_w_t{t:g}", upper_w(emp, mu), stat + 2 * model.h + model.dt)
        mart = mc_sim.martingale_residual(ens, flow, checkpoints=[t for t in checkpoints if t > 0] or [model.T])
        a_eff = model.a
        if cfg.events:
            ens.write_events(out / "events.csv")
    mc_sim.write_summary_csv(ens, [0 if ens.kind == "discrete" else 0.0] + [c for c in checkpoints if c], out / "summary.csv")
    write_csv(out / "martingale.csv", mart["rows"], ["f", "t", "mean", "stderr", "flag"])
    write_csv(out / "increments.csv", mart["correlations"], ["f", "s", "t", "corr", "flag"])
    for r in mart["rows"]:
        g.add(f"martingale_{r['f']}_t{r['t']:g}", abs(r["mean"]), 3 * r["stderr"] + mc_sim.ZERO_FLOOR,
              ok=not r["flag"])
    for r in mart["correlations"]:
        g.add(f"increment_{r['f']}_t{r['t']:g}", abs(r["corr"]), 3 / math.sqrt(cfg.n_paths), ok=not r["flag"])
    q = cfg.offspring
    mom = mc_sim.moment_check(ens, [c for c in checkpoints if c], a_eff, q.m1, q.m2)
    write_csv(out / "moments.csv", mom, ["t", "order", "mean", "stderr", "bound", "ok"])
    for r in mom:
        g.add(f"moment{r['order']}_t{r['t']:g}", r["mean"], r["bound"], ok=r["ok"])
    plots = [("summary.csv", "t", ["mean", "mass_at_zero_fraction"], "ensemble summary", [])]
    return g, plots


def cmd_scaling(cfg, out):
    model = cfg.cdr_model()
    flow = cdr_flow.march_solve(model)
    rep = scaling.verify_rate(model, cfg.k_list, cfg.t_list, flow, workers=cfg.workers)
    rep.to_csv(out / "scaling.csv")
    (out / "scaling_summary.txt").write_text(rep.summary() + "\n")
    g = Gates()
    for r in rep.rows:
        g.add(f"rate_k{r['k']}_t{r['t']:g}", r["measured"], r["bound"] + r["budget"], ok=r["pass"] or r["vacuous"])
    plots = [("scaling.csv", "k", ["measured", "bound"], "rate theorem", ["set logscale xy"])]
    return g, plots


def cmd_phase(cfg, out):
    model = cfg.discrete_model()
    theta = cfg.initial_spec
    grid = np.linspace(cfg.p_min, cfg.p_max, cfg.p_count)
    res = dr_discrete.phase_scan(theta, grid, cfg.n, model, eps_F=cfg.eps_F,
                                 bisect_steps=cfg.bisect_steps, workers=cfg.workers)
    write_csv(out / "phase.csv", res.table, ["p", "proxy", "sustainability"])
    heat = []
    for p in grid:
        traj = dr_discrete.evolve(model.with_initial(theta.with_p(float(p))), cfg.n)
        for row in dr_discrete.trajectory_rows(traj, model):
            heat.append({"p": float(p), "n": row["n"], "proxy": row["proxy"]})
    write_csv(out / "phase_heatmap.csv", heat, ["p", "n", "proxy"])
    lo, hi = res.bracket
    write_csv(out / "critical.csv", [{"p_c": res.p_c, "lo": lo, "hi": hi, "label": res.label}],
              ["p_c", "lo", "hi", "label"])
    g = Gates()
    proxies = [r["proxy"] for r in res.table]
    g.add("proxy_increase", max(np.diff(proxies), default=0.0), 1e-12)
    width = hi - lo if not (math.isnan(lo) or math.isnan(hi)) else 0.0
    g.add("bracket_width", width, max(cfg.tolerance("bracket"), (cfg.p_max - cfg.p_min) / 2**cfg.bisect_steps))
    plots = [("phase.csv", "p", ["proxy", "sustainability"], "phase scan", []),
             ("phase_heatmap.csv", "p", ["proxy"], "proxy heatmap", ["set view map"])]
    return g, plots


def cmd_semigroup(cfg, out):
    model = cfg.cdr_model()
    flow = cdr_flow.march_solve(model)
    r, t = cfg.r, model.T
    s = r + round((t - r) / 2 / model.dt) * model.dt
    g = Gates()
    starts = semigroup.default_starts(model.n_sites, model.h, count=16)
    ck = semigroup.chapman_kolmogorov_residual(flow, r, s, t, starts)
    g.add("chapman_kolmogorov", ck["residual"], cfg.tolerance("ck"))
    g.add("entrance", semigroup.entrance_residual(flow, t, r=r), cfg.tolerance("entrance"))
    rng = np.random.default_rng(cfg.seed)
    pairs = model.h * rng.integers(0, min(model.n_sites, int(round(8 / model.h))), size=(cfg.n_pairs, 2))
    rows = semigroup.contraction_check(flow, r, t, pairs)
    write_csv(out / "contraction.csv", rows, ["x", "y", "W", "bound", "ok"])
    g.add("contraction_failures", sum(not x["ok"] for x in rows), 0)
    fb = semigroup.forward_backward_residuals(flow, r, t)
    write_csv(out / "semigroup.csv", [{"check": "chapman_kolmogorov", "value": ck["residual"]},
                                      {"check": "forward", "value": fb["forward"]},
                                      {"check": "backward", "value": fb["backward"]}], ["check", "value"])
    plots = [("contraction.csv", "x", ["W", "bound"], "contraction", [])]
    return g, plots


HANDLERS = {"discrete": cmd_discrete, "cdr": cmd_cdr, "paths": cmd_paths, "scaling": cmd_scaling,
            "phase": cmd_phase, "semigroup": cmd_semigroup}


# --- driver ----------------------------------------------------------------


def _float_list(s):
    return [float(v) for v in s.split(",") if v]


def _int_list(s):
    return [int(v) for v in s.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="drflow", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config or a manifest from an earlier run")
    p.add_argument("--out", help="output directory (DRFLOW_OUT wins if set)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--a", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--n", type=int, help="number of discrete steps")
    p.add_argument("--k-list", type=_int_list, dest="k_list")
    p.add_argument("--t-list", type=_float_list, dest="t_list")
    p.add_argument("--n-paths", type=int, dest="n_paths")
    p.add_argument("--kind", choices=("continuous", "discrete"))
    p.add_argument("--events", action="store_true", default=None, help="write the per-path event log")
    return p


def resolve_config(args, environ=None):
    environ = os.environ if environ is None else environ
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if "config" in data and "versions" in data:
            data = data["config"]
    data["command"] = args.command
    for name in ("out", "seed", "workers", "a", "alpha", "h", "T", "n", "k_list", "t_list", "n_paths",
                 "kind", "events"):
        v = getattr(args, name)
        if v is not None:
            data[name] = v
    if environ.get("DRFLOW_OUT"):
        data["out"] = environ["DRFLOW_OUT"]
    try:
        cfg = RunConfig.from_dict(data)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return validate(cfg)


def manifest(cfg, outputs):
    return {"config": cfg.to_dict(),
            "versions": {"drflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "seeds": {"base": cfg.seed, "streams": "Philox keyed by (seed, path index)"},
            "outputs": sorted(outputs)}


def run(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        gates, plots = HANDLERS[cfg.command](cfg, out)
    except TailTruncationError:
        raise
    except MeasureError as e:
        print(f"drflow: invariant violated: {e}", file=sys.stderr)
        gates, plots = Gates(), []
        gates.add("invariant", 1.0, 0.0)
    write_csv(out / "gates.csv", gates.rows, ["gate", "value", "threshold", "ok"])
    write_gnuplot(out / "plot.gp", plots)
    outputs = [p.name for p in out.iterdir() if p.name != "manifest.json"]
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, outputs), indent=2, sort_keys=True) + "\n")
    return gates


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"drflow: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        gates = run(cfg)
    except TailTruncationError as e:
        print(f"drflow: numerical abort: {e}", file=sys.stderr)
        return EXIT_ABORT
    failed = [r["gate"] for r in gates.rows if not r["ok"]]
    print(f"{cfg.command}: {len(gates.rows) - len(failed)}/{len(gates.rows)} gates pass -> {cfg.out}")
    for name in failed:
        print(f"  FAIL {name}")
    return EXIT_GATE if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
