"""Checks of the scaling limit: rescaled discrete recursions against the continuous flow.

With ``alpha = a/k`` and unit shift ``1/k`` the discrete recursion run for
``floor(k t)`` steps approaches ``mu_t``; the rate theorem bounds the
distance by ``e^{a(m1+2)t} [4(1+at)/k + W(gamma_0, mu_0)]``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mc_sim
from .dr_discrete import DiscreteModel, iterate
from .measure import MeasureError, check_step
from .wasserstein import DEFAULT_SUPPORT_CAP, exact_w, upper_w, w_auto


def admissible_k(h, k_max=None):
    """All ``k`` with ``1/(k h)`` a positive integer, i.e. the divisors of ``1/h``."""
    m = check_step(h)
    ks = [d for d in range(1, m + 1) if m % d == 0]
    return ks if k_max is None else [k for k in ks if k <= k_max]


def rescaled_model(base, k):
    """Discrete model with renewal rate ``a/k`` and shift ``1/k`` on the lattice of ``base``."""
    if k < base.a:
        raise MeasureError(f"need k >= a, got k={k}, a={base.a}")
    m = check_step(base.h)
    if m % k:
        raise MeasureError(f"k={k} is not aligned with h={base.h}; admissible k: {admissible_k(base.h)}")
    return DiscreteModel(base.a / k, base.q, base.initial, h=base.h, x_max=base.x_max,
                         overflow_limit=base.overflow_limit, shift=1.0 / k)


def rescaled_laws(base, k, n):
    """``gamma_0, ..., gamma_n`` of the rescaled recursion."""
    return list(iterate(rescaled_model(base, k), n))


def build_rescaled(base, k, t):
    """``gamma^{(k)}_{floor(k t)}`` from ``gamma_0 = discretize(initial)``."""
    n = int(math.floor(k * t + 1e-9))
    for mu in iterate(rescaled_model(base, k), n):
        pass
    return mu


def theorem_bound(a, m1, t, k, W0=0.0):
    if k < a:
        raise MeasureError(f"need k >= a, got k={k}, a={a}")
    return math.exp(a * (m1 + 2) * t) * (4.0 / k * (1 + a * t) + W0)


def decay_slope(ks, values):
    """Least-squares slope of ``log value`` against ``log(1/k)``; ``nan`` with fewer than two usable points."""
    ks = np.asarray(ks, float)
    v = np.asarray(values, float)
    ok = v > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(1.0 / ks[ok]), np.log(v[ok]), 1)[0])


REPORT_COLUMNS = ("k", "t", "n", "measured", "method", "bound", "budget", "vacuous", "pass")


@dataclass
class ScalingReport:
    rows: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)  # t -> fitted slope over all k
    moments: list = field(default_factory=list)

    @property
    def failures(self):
        return [r for r in self.rows if not r["pass"] and not r["vacuous"]]

    @property
    def ok(self):
        return not self.failures

    def summary(self):
        n_vac = sum(r["vacuous"] for r in self.rows)
        n_pass = sum(r["pass"] for r in self.rows)
        lines = [f"{len(self.rows)} rows: {n_pass} pass, {len(self.failures)} fail, {n_vac} vacuous"]
        for t, s in sorted(self.slopes.items()):
            lines.append(f"t={t:g}: decay slope {s:.3f}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def _distances(job):
    base, k, ns, refs, cap = job
    want = dict(zip(ns, refs))
    out = {}
    for n, mu in enumerate(iterate(rescaled_model(base, k), max(ns))):
        if n in want:
            out[n] = w_auto(mu, want[n], max_support=cap)
    return out


def verify_rate(base, k_list, t_list, flow, W0=None, max_support=DEFAULT_SUPPORT_CAP, workers=1):
    """Measured ``W(gamma^{(k)}_{floor(kt)}, mu_t)`` against the theorem bound plus ``5(dt + h)``.

    ``flow`` is the reference solution on the lattice of ``base``.  W is exact
    when the residual supports fit ``max_support`` and the comonotone upper
    bound otherwise (``method`` says which).  Rows whose bound is at least 1
    pass vacuously since ``W <= 1``.
    """
    if abs(flow.h - base.h) > 1e-15:
        raise MeasureError(f"flow lattice {flow.h} differs from model lattice {base.h}")
    if W0 is None:
        W0 = exact_w(base.initial_measure(), flow.slice(flow.indices[0]), with_plan=False,
                     max_support=None).value
    budget = 5 * (flow.dt + base.h)
    jobs = []
    for k in k_list:
        rescaled_model(base, k)
        ns = [int(math.floor(k * t + 1e-9)) for t in t_list]
        refs = [flow.at(t) for t in t_list]
        jobs.append((base, k, ns, refs, max_support))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_distances, jobs))
    else:
        results = [_distances(j) for j in jobs]
    rep = ScalingReport()
    for (_, k, ns, _, _), res in zip(jobs, results):
        for t, n in zip(t_list, ns):
            w, method = res[n]
            b = theorem_bound(base.a, base.q.m1, t, k, W0)
            rep.rows.append({"k": k, "t": t, "n": n, "measured": w, "method": method, "bound": b,
                             "budget": budget, "vacuous": b >= 1.0, "pass": w <= b + budget})
    for t in t_list:
        rows = [r for r in rep.rows if r["t"] == t]
        rep.slopes[t] = decay_slope([r["k"] for r in rows], [r["measured"] for r in rows])
    return rep


def stat_budget(mu):
    """``int sqrt(F (1 - F)) dx``: the scale of ``sqrt(N) E int |F_N - F|`` for an ``N``-sample of ``mu``."""
    F = np.minimum(mu.cdf / mu.total, 1.0)
    return float(np.sum(np.sqrt(F * (1 - F))) * mu.step)


def verify_process_marginals(base, k_list, t_list, flow, n_paths, seed=0):
    """Empirical law of ``Y^{(k)}_{floor(kt)}`` (rescaled discrete paths) against ``mu_t``.

    Each row carries the comonotone distance, the statistical budget
    ``stat_budget(mu_t)/sqrt(N)``, the lattice budget ``h`` and the theorem
    bound at ``k``.  ``trend_ok`` asks successive ``k`` to be nonincreasing
    up to twice the statistical budget.  Moment rows compare against
    ``e^{a m1 t}`` and ``e^{a(2 m2 + 1) t}``.
    """
    rows, moments = [], []
    refs = {t: flow.at(t) for t in t_list}
    for k in k_list:
        model = rescaled_model(base, k)
        ns = {t: int(math.floor(k * t + 1e-9)) for t in t_list}
        laws = rescaled_laws(base, k, max(ns.values()))
        ens = mc_sim.simulate_discrete(model, laws, max(ns.values()), n_paths, seed=seed)
        for t in t_list:
            mu = refs[t]
            emp = mc_sim.empirical_measure(ens, ns[t], step=mu.step, x_max=mu.x_max)
            rows.append({"k": k, "t": t, "n": ns[t], "distance": upper_w(emp, mu),
                         "stat_budget": stat_budget(mu) / math.sqrt(n_paths), "grid_budget": mu.step,
                         "bound": theorem_bound(base.a, base.q.m1, t, k)})
        for r in mc_sim.moment_check(ens, [ns[t] for t in t_list], base.a, base.q.m1, base.q.m2):
            moments.append({"k": k, **r})
    for t in t_list:
        seq = [r for r in rows if r["t"] == t]
        for prev, cur in zip(seq, seq[1:]):
            cur["trend_ok"] = cur["distance"] <= prev["distance"] + 2 * (prev["stat_budget"] + cur["stat_budget"])
        if seq:
            seq[0]["trend_ok"] = True
    return {"rows": rows, "moments": moments,
            "ok": all(r["trend_ok"] for r in rows) and all(m["ok"] for m in moments)}

