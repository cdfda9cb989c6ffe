"""Pathwise Monte Carlo for the discrete recursion and the continuous jump-drift process.

Both simulators read jump sizes off a precomputed deterministic flow of laws
(the frozen flow): the simulated particles never feed back into the law they
sample from.  Every path owns a Philox stream keyed by ``(seed, path index)``,
so an ensemble does not depend on the order in which paths are generated.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .cdr_flow import default_suite, step_index
from .measure import GridMeasure, MeasureError, OffspringDistribution, lattice_shift, q_mixture

_BLOCK = 8


def path_rng(seed, path):
    """Counter-based generator for one path."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, path], dtype=np.uint64)))


def right_inverse(cdf, u):
    """``inf{j : cdf[j] > u}`` as a site index, clamped to the last site."""
    return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)


def _normalized_cdf(mu):
    c = mu.cdf
    return c / mu.total if mu.total != 1.0 else c


@dataclass(eq=False)
class PathEnsemble:
    """Simulated paths.

    Discrete ensembles keep site indices in ``states``, one column per entry
    of ``steps`` (every step ``0..n`` unless the simulation was thinned); the
    state is ``states * step``.
    Continuous ensembles keep the start ``x0`` and the jump events as padded
    ``(N, M)`` arrays (``times`` is ``inf`` past the last jump).
    """

    kind: str
    step: float
    seed: int
    x0: np.ndarray
    states: np.ndarray = None
    times: np.ndarray = None
    sizes: np.ndarray = None
    horizon: float = 0.0
    shift: float = 1.0
    alpha: float = 0.0
    rate: float = 0.0
    q: OffspringDistribution = None
    steps: tuple = None

    @property
    def n_paths(self):
        return self.states.shape[0] if self.kind == "discrete" else self.x0.size

    def time_of(self, c):
        """Physical time of a checkpoint (step ``n`` of a discrete ensemble sits at ``n * shift``)."""
        return c * self.shift if self.kind == "discrete" else float(c)

    def state(self, c):
        """States of all paths at step ``c`` (discrete) or time ``c`` (continuous)."""
        if self.kind == "discrete":
            steps = range(self.states.shape[1]) if self.steps is None else self.steps
            if c not in steps:
                raise MeasureError(f"step {c} is not stored in this ensemble")
            return self.states[:, steps.index(c)] * self.step
        if not 0.0 <= c <= self.horizon:
            raise MeasureError(f"time {c} outside the ensemble range [0, {self.horizon}]")
        return _replay(self.x0, self.times, self.sizes, c)[0]

    def n_jumps(self):
        if self.kind != "continuous":
            raise MeasureError("jump counts are recorded only for continuous ensembles")
        return np.isfinite(self.times).sum(axis=1)

    def write_events(self, path):
        """Audit log of a continuous ensemble: one ``start`` row per path, then its jumps."""
        if self.kind != "continuous":
            raise MeasureError("event logs exist only for continuous ensembles")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "event", "time", "value"])
            for i in range(self.n_paths):
                w.writerow([i, "start", 0.0, repr(float(self.x0[i]))])
                for s, y in zip(self.times[i], self.sizes[i]):
                    if not np.isfinite(s):
                        break
                    w.writerow([i, "jump", repr(float(s)), repr(float(y))])


def _replay(x0, times, sizes, t, f=None):
    """State at ``t``; with ``f`` also the summed jump increments of ``f`` up to ``t``."""
    x = np.array(x0, dtype=float)
    tau = np.zeros_like(x)
    jumps = np.zeros_like(x) if f is not None else None
    for j in range(times.shape[1]):
        s = times[:, j]
        on = s <= t
        if not on.any():
            break
        pre = np.maximum(x - (s - tau), 0.0)
        post = pre + sizes[:, j]
        if f is not None:
            jumps += np.where(on, f(post) - f(pre), 0.0)
        x = np.where(on, post, x)
        tau = np.where(on, s, tau)
    return np.maximum(x - (t - tau), 0.0), jumps


def simulate_discrete(model, laws, n, n_paths, seed=0, x0=None, keep=None, batch=8192):
    """Paths of ``X_{m+1} = (X_m + eta_m G_m^{-1}(U_m) - model.shift)_+``.

    ``laws`` is the deterministic trajectory ``mu_0, mu_1, ...`` (at least
    ``n`` entries; the quantiles are of these, not of the ensemble).
    ``eta_m`` is Bernoulli(``model.alpha``) and ``G_m`` is the CDF of
    ``mu_m^q``.  Starting points are drawn from ``mu_0`` unless ``x0`` is given.
    ``keep`` limits the stored steps; paths are generated ``batch`` at a time.
    """
    if len(laws) < max(n, 1):
        raise MeasureError(f"flow has {len(laws)} laws, need {max(n, 1)}")
    steps = tuple(range(n + 1)) if keep is None else tuple(sorted(set(keep)))
    if steps[0] < 0 or steps[-1] > n:
        raise MeasureError(f"kept steps must lie in 0..{n}")
    col = {c: j for j, c in enumerate(steps)}
    step = laws[0].step
    s = lattice_shift(model.shift, step)
    alpha = model.alpha
    cdfs = [_normalized_cdf(q_mixture(laws[m], model.q, overflow_limit=1.0)) for m in range(n)] if alpha > 0 else []
    start_cdf = _normalized_cdf(laws[0])
    X = np.empty((n_paths, len(steps)), dtype=np.int64)
    for b0 in range(0, n_paths, batch):
        b1 = min(b0 + batch, n_paths)
        draws = np.empty((b1 - b0, 1 + 2 * n))
        for i in range(b0, b1):
            draws[i - b0] = path_rng(seed, i).random(1 + 2 * n)
        if x0 is None:
            x = right_inverse(start_cdf, draws[:, 0])
        else:
            x = np.broadcast_to(np.rint(np.asarray(x0, float) / step).astype(np.int64), (n_paths,))[b0:b1]
        if 0 in col:
            X[b0:b1, col[0]] = x
        for m in range(n):
            eta = draws[:, 1 + 2 * m] < alpha
            jump = right_inverse(cdfs[m], draws[:, 2 + 2 * m]) if alpha > 0 else 0
            x = np.maximum(x + np.where(eta, jump, 0) - s, 0)
            if m + 1 in col:
                X[b0:b1, col[m + 1]] = x
    x_start = X[:, col[0]] * step if 0 in col else None
    return PathEnsemble("discrete", step, seed, x_start, states=X, shift=model.shift,
                        alpha=alpha, q=model.q, steps=None if keep is None else steps)


def _draw_clock(g, rate, T):
    """Uniform for the start, then jump times on ``[0, T]`` and their uniforms."""
    u0 = g.random()
    if rate <= 0:
        return u0, np.empty(0), np.empty(0)
    gaps, us = [], []
    total = 0.0
    while total <= rate * T:
        e = g.standard_exponential(_BLOCK)
        gaps.append(e)
        us.append(g.random(_BLOCK))
        total += e.sum()
    s = np.cumsum(np.concatenate(gaps)) / rate
    k = np.searchsorted(s, T, side="right")
    return u0, s[:k], np.concatenate(us)[:k]


def nearest_slice(flow, s):
    """Stored step index nearest to each time in ``s``."""
    t = flow.times
    idx = np.asarray(flow.indices)
    p = np.clip(np.searchsorted(t, s), 1, t.size - 1) if t.size > 1 else np.zeros(np.shape(s), int)
    if t.size > 1:
        p = np.where(np.abs(t[p - 1] - s) <= np.abs(t[p] - s), p - 1, p)
    return idx[p]


def simulate_cdr(flow, T, n_paths, seed=0, x0=None):
    """Event-driven paths of the continuous process on ``[0, T]``.

    Jumps come from a rate-``flow.a`` Poisson clock; a jump at time ``s`` has
    the law ``mu_sigma^q`` with ``sigma`` the stored slice nearest to ``s``.
    Between jumps the path moves down at unit speed and waits at 0.
    """
    if T < 0 or T > flow.times[-1] + 1e-12:
        raise MeasureError(f"flow covers [0, {flow.times[-1]}], asked for T={T}")
    a = flow.a
    u0 = np.empty(n_paths)
    ev_t, ev_u = [], []
    for i in range(n_paths):
        u0[i], s, u = _draw_clock(path_rng(seed, i), a, T)
        ev_t.append(s)
        ev_u.append(u)
    counts = np.array([s.size for s in ev_t], dtype=int)
    M = int(counts.max()) if n_paths else 0
    times = np.full((n_paths, M), np.inf)
    sizes = np.zeros((n_paths, M))
    if M:
        rows = np.repeat(np.arange(n_paths), counts)
        cols = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        flat_t = np.concatenate(ev_t)
        flat_u = np.concatenate(ev_u)
        sig = nearest_slice(flow, flat_t)
        flat_y = np.empty_like(flat_t)
        for k in np.unique(sig):
            sel = sig == k
            flat_y[sel] = flow.qmix_quantile(int(k), flat_u[sel])
        times[rows, cols] = flat_t
        sizes[rows, cols] = flat_y
    h = flow.h
    if x0 is None:
        start = right_inverse(_normalized_cdf(flow.slice(flow.indices[0])), u0) * h
    else:
        start = np.broadcast_to(np.asarray(x0, float), n_paths).copy()
    return PathEnsemble("continuous", h, seed, start, times=times, sizes=sizes, horizon=float(T),
                        rate=a, q=flow.q)


def simulate_cdr_path(flow, x0, T, seed=0):
    """A single continuous path from ``x0``; a one-path ensemble."""
    return simulate_cdr(flow, T, 1, seed=seed, x0=x0)


def empirical_measure(ensemble, c, step=None, x_max=None):
    """Normalized histogram of the states at checkpoint ``c`` on the lattice ``step``.

    States beyond ``x_max`` land in ``overflow``.
    """
    step = ensemble.step if step is None else step
    x = ensemble.state(c)
    j = np.rint(x / step).astype(np.int64)
    if x_max is None:
        n_sites = int(j.max()) + 1
    else:
        n_sites = int(round(x_max / step)) + 1
    inside = j < n_sites
    w = np.bincount(j[inside], minlength=n_sites)[:n_sites] / x.size
    return GridMeasure(step, w, float(np.count_nonzero(~inside)) / x.size)


def tv_budget(mu, n_paths):
    """``sum_j sqrt(w_j (1 - w_j) / N)``, an upper bound on ``E tv(empirical, mu)`` for ``N`` samples."""
    w = np.r_[mu.masses, mu.overflow] / mu.total
    return float(np.sqrt(np.clip(w * (1 - w), 0, None)).sum() / math.sqrt(n_paths))


SUMMARY_COLUMNS = ("t", "mean", "var", "mass_at_zero_fraction")


def summary_rows(ensemble, checkpoints):
    rows = []
    for c in checkpoints:
        x = ensemble.state(c)
        rows.append({"t": ensemble.time_of(c), "mean": float(x.mean()), "var": float(x.var()),
                     "mass_at_zero_fraction": float(np.mean(x == 0.0))})
    return rows


def write_summary_csv(ensemble, checkpoints, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in summary_rows(ensemble, checkpoints):
            w.writerow({k: repr(float(v)) for k, v in r.items()})


def martingale_suite():
    """Five bounded test functions with bounded differences."""
    return [tf for tf in default_suite() if tf.name != "one"]


def _jump_weights(mix):
    """Jump-size law with the overflow on the last site, as the clamped inverse samples it."""
    w = mix.masses / mix.total
    w[-1] += mix.overflow / mix.total
    return w


def _events(ensemble):
    """Per-event states just before (``pre``) and after (``post``) each jump."""
    x = np.array(ensemble.x0, dtype=float)
    tau = np.zeros_like(x)
    pre = np.zeros_like(ensemble.sizes)
    post = np.zeros_like(ensemble.sizes)
    for j in range(ensemble.times.shape[1]):
        s = ensemble.times[:, j]
        on = np.isfinite(s)
        pre[:, j] = np.where(on, np.maximum(x - (np.where(on, s, 0.0) - tau), 0.0), 0.0)
        post[:, j] = pre[:, j] + ensemble.sizes[:, j]
        x = np.where(on, post[:, j], x)
        tau = np.where(on, s, tau)
    return pre, post


def _discrete_martingales(ensemble, laws, suite, checkpoints):
    if ensemble.steps is not None:
        raise MeasureError("martingale residuals need every step of the ensemble")
    X = ensemble.states
    s = lattice_shift(ensemble.shift, ensemble.step)
    h, alpha = ensemble.step, ensemble.alpha
    L = int(X.max()) + 1
    comp = {tf.name: np.zeros(X.shape[0]) for tf in suite}
    out = {tf.name: {} for tf in suite}
    base = {tf.name: tf.f(X[:, 0] * h) for tf in suite}
    for tf in suite:
        if 0 in checkpoints:
            out[tf.name][0] = np.zeros(X.shape[0])
    for m in range(max(checkpoints)):
        wn = None
        if alpha > 0:
            wn = _jump_weights(q_mixture(laws[m], ensemble.q, overflow_limit=1.0))
        for tf in suite:
            down = tf.f(np.maximum(np.arange(L) - s, 0) * h)
            if wn is not None:
                F = tf.f(np.maximum(np.arange(L + wn.size - 1) - s, 0) * h)
                up = fftconvolve(F, wn[::-1], mode="valid")
            else:
                up = down
            pf = (1 - alpha) * down + alpha * up - tf.f(np.arange(L) * h)
            comp[tf.name] += pf[X[:, m]]
            if m + 1 in checkpoints:
                out[tf.name][m + 1] = tf.f(X[:, m + 1] * h) - base[tf.name] - comp[tf.name]
    return out


def _continuous_martingales(ensemble, flow, suite, checkpoints):
    for c in checkpoints:
        if c > ensemble.horizon + 1e-12:
            raise MeasureError(f"checkpoint {c} beyond the ensemble horizon {ensemble.horizon}")
    targets = {step_index(c, flow.dt): c for c in checkpoints}
    for k in targets:
        if not flow.has(k):
            raise MeasureError(f"checkpoint at step {k} is not a stored slice")
    nodes = [k for k in flow.indices if k <= max(targets)]
    J = flow.slice(nodes[0]).n_sites
    h, a = flow.h, ensemble.rate
    sites = np.arange(J) * h
    nfft = 2 * J - 1
    # psi_s(x_j) = sum_l w_l f(x_j + l h) - f(x_j) by one circular correlation per slice
    Fhat = {tf.name: np.fft.rfft(tf.f(np.arange(2 * J - 1) * h), nfft) for tf in suite}
    pre, post = _events(ensemble)
    times = ensemble.times
    rows = np.arange(ensemble.n_paths)
    integral = {tf.name: np.zeros(ensemble.n_paths) for tf in suite}
    prev = None
    out = {tf.name: {} for tf in suite}
    for k in nodes:
        t = k * flow.dt
        if times.shape[1]:
            n_on = np.count_nonzero(times <= t, axis=1)
            last = np.maximum(n_on - 1, 0)
            anchor = np.where(n_on > 0, post[rows, last], ensemble.x0)
            since = np.where(n_on > 0, times[rows, last], 0.0)
        else:
            anchor, since = ensemble.x0, 0.0
        x = np.maximum(anchor - (t - since), 0.0)
        wr = None
        if a > 0:
            wr = np.fft.rfft(_jump_weights(flow.qmix(k))[::-1], nfft)
        vals = {}
        for tf in suite:
            if wr is None:
                vals[tf.name] = np.zeros_like(x)
                continue
            corr = np.fft.irfft(Fhat[tf.name] * wr, nfft)[J - 1:2 * J - 1]
            vals[tf.name] = np.interp(x, sites, corr - tf.f(sites))
        if prev is not None:
            dt = t - prev[0]
            for tf in suite:
                integral[tf.name] += 0.5 * dt * (vals[tf.name] + prev[1][tf.name])
        prev = (t, vals)
        if k in targets:
            on = times <= t
            for tf in suite:
                jumps = np.where(on, tf.f(post) - tf.f(pre), 0.0).sum(axis=1)
                out[tf.name][targets[k]] = jumps - a * integral[tf.name]
    return out


def martingale_values(ensemble, flow, suite, checkpoints):
    """Per-path ``M_c(f) = f(X_c) - f(X_0) - int_0^c A f(X)``, as ``{name: {checkpoint: array}}``.

    Discrete ensembles take ``flow`` as the list of laws and sum the one-step
    compensator exactly.  Continuous ensembles take a :class:`MeasureFlow`:
    the drift part of ``f(X_c) - f(X_0)`` cancels exactly along each linear
    piece, leaving the jump increments minus ``a int psi_s(X_s) ds`` by the
    trapezoid rule on the stored slices, with ``psi_s`` interpolated in space.
    """
    checkpoints = sorted(set(checkpoints))
    if ensemble.kind == "discrete":
        return _discrete_martingales(ensemble, flow, suite, checkpoints)
    return _continuous_martingales(ensemble, flow, suite, checkpoints)


# sample statistics below this are rounding noise of an identically zero martingale
ZERO_FLOOR = 1e-12


def _corr(u, v):
    su, sv = u.std(), v.std()
    if su <= ZERO_FLOOR or sv <= ZERO_FLOOR:
        return 0.0
    return float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))



def martingale_residual(ensemble, flow, suite=None, checkpoints=(0.5, 1.0), probe=None):
    """Mean and standard error of ``M_c(f)`` per function and checkpoint.

    A row is flagged when ``|mean| > 3 stderr + ZERO_FLOOR``.  For consecutive
    checkpoints ``s < t`` the correlation of ``M_t - M_s`` with ``probe(X_s)``
    (default ``1 - exp(-x)``) is flagged when it exceeds ``3 / sqrt(N)``.
    """
    suite = martingale_suite() if suite is None else suite
    probe = (lambda x: -np.expm1(-x)) if probe is None else probe
    cps = sorted(set(checkpoints))
    N = ensemble.n_paths
    vals = martingale_values(ensemble, flow, suite, cps)
    rows, corr_rows = [], []
    for tf in suite:
        v = vals[tf.name]
        for c in cps:
            mean = float(v[c].mean())
            se = float(v[c].std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
            rows.append({"f": tf.name, "t": ensemble.time_of(c), "mean": mean, "stderr": se,
                         "flag": abs(mean) > 3 * se + ZERO_FLOOR})
        for s, t in zip(cps, cps[1:]):
            r = _corr(v[t] - v[s], probe(ensemble.state(s)))
            corr_rows.append({"f": tf.name, "s": ensemble.time_of(s), "t": ensemble.time_of(t),
                              "corr": r, "flag": abs(r) > 3 / math.sqrt(N)})
    return {"rows": rows, "correlations": corr_rows,
            "flagged": any(r["flag"] for r in rows + corr_rows)}


def moment_check(ensemble, checkpoints, a, m1, m2):
    """Sample moments against ``e^{a m1 t} E[X_0]`` and ``e^{a (2 m2 + 1) t} E[X_0^2]``.

    A row passes when the sample mean is at most the bound times
    ``1 + 3 * relative stderr``.
    """
    x0 = ensemble.state(0 if ensemble.kind == "discrete" else 0.0)
    N = x0.size
    e1, e2 = float(x0.mean()), float((x0 ** 2).mean())
    rows = []
    for c in checkpoints:
        t = ensemble.time_of(c)
        x = ensemble.state(c)
        for order, bound in ((1, math.exp(a * m1 * t) * e1), (2, math.exp(a * (2 * m2 + 1) * t) * e2)):
            v = x ** order
            mean = float(v.mean())
            se = float(v.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
            rel = se / mean if mean > 0 else 0.0
            rows.append({"t": t, "order": order, "mean": mean, "stderr": se, "bound": bound,
                         "ok": mean <= bound * (1 + 3 * rel)})
    return rows
