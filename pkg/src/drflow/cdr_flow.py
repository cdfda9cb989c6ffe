"""Continuous-time flow ``d/dt mu_t = a (mu_t * mu_t^q - mu_t) + d/dx mu_t 1_{x>0}``.

Two solvers share the lattice with time step ``dt = h``:

* :func:`march_solve` steps ``mu <- [(1 - a dt) mu + a dt mu * mu^q] o T_dt^{-1}``;
* :func:`picard_solve` iterates the mild equation with exponential weights,
  the time integral taken by the left-endpoint rule.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .measure import (
    MASS_TOL,
    OVERFLOW_LIMIT,
    GridMeasure,
    InitialMeasureSpec,
    MeasureError,
    OffspringDistribution,
    check_step,
    convolve,
    discretize,
    from_bytes,
    mass_at_zero,
    moment,
    q_mixture,
    quantile_from_cdf,
    shift_sites,
    to_bytes,
)

_MAGIC = b"DRFLOW01"
_HEADER = struct.Struct("<dddqqd")  # a, dt, h, J, K, T


@dataclass(frozen=True)
class CdrModel:
    a: float
    q: OffspringDistribution
    initial: InitialMeasureSpec
    h: float = 2.0**-8
    x_max: float = 64.0
    T: float = 1.0
    overflow_limit: float = OVERFLOW_LIMIT

    def __post_init__(self):
        if not self.a >= 0:
            raise MeasureError(f"a must be >= 0, got {self.a}")
        check_step(self.h)
        if abs(self.T / self.h - round(self.T / self.h)) > 1e-9 or self.T < 0:
            raise MeasureError(f"T={self.T} is not a whole number of steps h={self.h}")
        if abs(self.x_max / self.h - round(self.x_max / self.h)) > 1e-9:
            raise MeasureError("x_max must be a whole number of lattice steps")
        if self.a * self.h > 1.0:
            raise MeasureError(f"a*dt = {self.a * self.h} > 1")

    @classmethod
    def classical(cls, initial, **kw):
        return cls(kw.pop("a", 1.0), OffspringDistribution.classical(), initial, **kw)

    @property
    def dt(self):
        return self.h

    @property
    def n_steps(self):
        return int(round(self.T / self.h))

    @property
    def n_sites(self):
        return int(round(self.x_max / self.h)) + 1

    def initial_measure(self):
        return discretize(self.initial, self.h, self.x_max, self.overflow_limit)

    def replace(self, **kw):
        d = dict(a=self.a, q=self.q, initial=self.initial, h=self.h, x_max=self.x_max,
                 T=self.T, overflow_limit=self.overflow_limit)
        d.update(kw)
        return CdrModel(**d)


def step_index(t, dt):
    i = t / dt
    k = int(round(i))
    if abs(i - k) > 1e-9 or k < 0:
        raise MeasureError(f"t={t} is not on the time lattice dt={dt}")
    return k


@dataclass(eq=False)
class MeasureFlow:
    """Slices ``mu_{t_i}`` at ``t_i = i dt`` for the stored step indices.

    The offspring mixtures ``mu_{t_i}^q`` and their CDFs are cached on first
    use; quantiles of ``mu_{t_i}^q`` are read off the CDF by binary search,
    which is exact on the lattice.
    """

    dt: float
    a: float
    q: OffspringDistribution
    slices: list
    indices: list
    _qmix: dict = field(default_factory=dict, repr=False)
    _pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._pos = {k: j for j, k in enumerate(self.indices)}

    @property
    def h(self):
        return self.slices[0].step

    @property
    def times(self):
        return np.asarray(self.indices) * self.dt

    @property
    def n_steps(self):
        return self.indices[-1]

    def has(self, i):
        return i in self._pos

    def slice(self, i):
        try:
            return self.slices[self._pos[i]]
        except KeyError:
            raise MeasureError(f"step {i} not stored in this flow") from None

    def at(self, t):
        return self.slice(step_index(t, self.dt))

    def qmix(self, i):
        m = self._qmix.get(i)
        if m is None:
            m = q_mixture(self.slice(i), self.q, overflow_limit=1.0)
            self._qmix[i] = m
        return m

    def qmix_cdf(self, i):
        m = self.qmix(i)
        return m.cdf / m.total if m.total != 1.0 else m.cdf

    def qmix_quantile(self, i, u):
        """Right-continuous inverse of the CDF of ``mu_{t_i}^q``."""
        return quantile_from_cdf(self.qmix_cdf(i), self.h, u)

    def drop_cache(self):
        self._qmix.clear()


def _mix_step(mu, other, a_dt):
    """``(1 - a dt) mu + a dt other``, then shift one site."""
    w = (1.0 - a_dt) * mu.masses + a_dt * other.masses
    o = (1.0 - a_dt) * mu.overflow + a_dt * other.overflow
    return shift_sites(GridMeasure(mu.step, w, o), 1)


def march_solve(model, mu0=None, keep_every=1, n_steps=None):
    """Marching solver.  ``keep_every`` thins the stored slices (the last is always kept)."""
    mu = model.initial_measure() if mu0 is None else mu0
    n = model.n_steps if n_steps is None else n_steps
    a_dt = model.a * model.dt
    slices, idx = [mu], [0]
    cache = {}
    for i in range(n):
        if a_dt > 0:
            mq = q_mixture(mu, model.q, overflow_limit=1.0)
            if i % keep_every == 0:
                cache[i] = mq
            mu = _mix_step(mu, convolve(mu, mq), a_dt)
        else:
            mu = shift_sites(mu, 1)
        if abs(mu.total - 1.0) > MASS_TOL:
            raise MeasureError(f"march step {i + 1} lost mass: {mu.total!r}")
        mu.check_overflow(model.overflow_limit, f"march step {i + 1}")
        if (i + 1) % keep_every == 0 or i + 1 == n:
            slices.append(mu)
            idx.append(i + 1)
    flow = MeasureFlow(model.dt, model.a, model.q, slices, idx)
    flow._qmix.update({k: v for k, v in cache.items() if flow.has(k)})
    return flow


# --------------------------------------------------------------------------
# Picard iteration
# --------------------------------------------------------------------------


def picard_paths(model, n_iter, n_steps=None, mu0=None):
    """Picard iterates on the time lattice.

    Returns ``(path, finals)`` where ``path`` is the list of slices of the
    last iterate and ``finals[n]`` is iterate ``n`` at the final time
    (unnormalized sub-probabilities).  The accumulator recursion
    ``A_{i+1} = e^{-a dt} (A_i + a dt c_i) o T_dt^{-1}`` reproduces the
    left-endpoint discretization of the mild equation.
    """
    if n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    mu0 = model.initial_measure() if mu0 is None else mu0
    n = model.n_steps if n_steps is None else n_steps
    a, dt = model.a, model.dt
    # iterate 0: e^{-a t} mu0 o T_t^{-1}
    path = [mu0]
    cur = mu0
    for i in range(n):
        cur = shift_sites(cur, 1)
        path.append(cur.scaled(math.exp(-a * (i + 1) * dt)))
    finals = [path[-1]]
    decay = math.exp(-a * dt)
    for _ in range(n_iter):
        new = [mu0]
        A = mu0
        for i in range(n):
            src = path[i]
            if a > 0:
                c = convolve(src, q_mixture(src, model.q, overflow_limit=1.0, sub_probability=True))
                w = decay * (A.masses + a * dt * c.masses)
                o = decay * (A.overflow + a * dt * c.overflow)
            else:
                w, o = A.masses, A.overflow
            A = shift_sites(GridMeasure(mu0.step, w, o), 1)
            new.append(A)
        path = new
        finals.append(path[-1])
    return path, finals


def picard_iterates(model, t, n_iter, mu0=None):
    """Iterates ``mu_t^{(0)}, ..., mu_t^{(n_iter)}`` at time ``t`` (unnormalized)."""
    return picard_paths(model, n_iter, step_index(t, model.dt), mu0)[1]


def picard_solve(model, t, n_iter, mu0=None):
    """``n_iter``-th Picard iterate at ``t``, renormalized at output."""
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    last = picard_iterates(model, t, n_iter, mu0)[-1]
    if last.total > 1.0 + 1e-8:
        raise MeasureError(f"Picard iterate has mass {last.total!r} > 1")
    last.check_overflow(model.overflow_limit, "picard")
    return last.normalize()


def picard_tail_bound(a, m1, t, n):
    """``2 sum_{k>=n} (a (m1+1) t)^k / k!``, summed until terms are negligible."""
    if n < 0:
        raise ValueError("n must be >= 0")
    lam = a * (m1 + 1.0) * t
    if lam == 0.0:
        return 0.0 if n >= 1 else 2.0
    term = math.exp(n * math.log(lam) - math.lgamma(n + 1))
    s = 0.0
    k = n
    while True:
        s += term
        k += 1
        term *= lam / k
        if term <= 1e-16 * s and k > lam:
            break
    return 2.0 * s


# --------------------------------------------------------------------------
# generator and equivalent forms
# --------------------------------------------------------------------------


def _sample(f, x):
    return np.asarray(f(x), dtype=float) if callable(f) else None


def apply_generator(f, flow, t, x):
    """``A_t f(x) = a sum_z mu_t^q(z) [f(x+z) - f(x)] - f'(x) 1_{x>0}``.

    ``f`` is a callable on ``[0, inf)`` or an array of lattice samples (held
    constant past the grid).  ``f'`` is the backward difference
    ``(f(x) - f(x-h)) / h``, the direction the drift moves mass.
    """
    i = step_index(t, flow.dt)
    h = flow.h
    j = step_index(x, h)
    mq = flow.qmix(i)
    z = mq.sites
    if callable(f):
        fx = float(f(np.array([x]))[0])
        fxz = np.asarray(f(x + z), dtype=float)
        f_left = float(f(np.array([x - h]))[0]) if j > 0 else fx
        f_over = float(f(np.array([x + mq.x_max]))[0])
    else:
        g = np.asarray(f, dtype=float)
        fx = g[j]
        fxz = g[np.minimum(j + np.arange(z.size), g.size - 1)]
        f_left = g[j - 1] if j > 0 else fx
        f_over = g[-1]
    jump = float(np.dot(mq.masses, fxz - fx) + mq.overflow * (f_over - fx))
    drift = (fx - f_left) / h if j > 0 else 0.0
    return flow.a * jump - drift


@dataclass(frozen=True)
class TestFunction:
    name: str
    f: object
    df: object = None  # derivative, if f is C^1


def default_suite():
    return [
        TestFunction("one", lambda x: np.ones_like(np.asarray(x, float)), lambda x: np.zeros_like(np.asarray(x, float))),
        TestFunction("1-exp(-x)", lambda x: -np.expm1(-np.asarray(x, float)), lambda x: np.exp(-np.asarray(x, float))),
        TestFunction("sin", lambda x: np.sin(x), lambda x: np.cos(x)),
        TestFunction("1/(1+x)", lambda x: 1.0 / (1.0 + np.asarray(x, float)),
                     lambda x: -1.0 / (1.0 + np.asarray(x, float)) ** 2),
        TestFunction("bump", lambda x: np.exp(-(np.asarray(x, float) - 2.0) ** 2),
                     lambda x: -2.0 * (np.asarray(x, float) - 2.0) * np.exp(-(np.asarray(x, float) - 2.0) ** 2)),
        TestFunction("min(x,1)", lambda x: np.minimum(np.asarray(x, float), 1.0)),
    ]


def pair(mu, fv):
    """``<mu, f>`` with ``fv`` the samples on the sites; overflow uses the last sample."""
    return float(np.dot(mu.masses, fv) + mu.overflow * fv[-1])


def _exp_weights(a, dt, n, t):
    """Weights ``w_j`` with ``sum_j w_j F_j = int_0^t e^{a(s-t)} F(s) ds`` for
    ``F`` linear between the nodes ``s_j = j dt``, ``j = 0..n``."""
    w = np.zeros(n + 1)
    if a == 0:
        w[:] = dt
        w[0] = w[-1] = dt / 2
        return w
    b = a * dt
    s = np.arange(n) * dt
    E = np.exp(a * (s - t))
    full = E * math.expm1(b) / a
    w1 = E / a * (math.exp(b) - math.expm1(b) / b)
    w0 = full - w1
    w[:-1] += w0
    w[1:] += w1
    return w


def _trap_weights(dt, n):
    w = np.full(n + 1, dt)
    w[0] = w[-1] = dt / 2
    return w


def form_residuals(flow, model, suite=None, check_times=None):
    """Max absolute residual of the equivalent formulations.

    ``form2``: weak form with generator drift (C^1 functions only);
    ``form3``: shift-mild form; ``form4``: exponential-mild form; ``mass``:
    the equation for ``<mu_t, 1>`` with the generating function.  Time
    integrals use the trapezoid rule, with exponentially fitted weights where
    the integrand carries ``e^{a(s-t)}``.  Requires every step stored.
    """
    suite = default_suite() if suite is None else suite
    if any(b - a != 1 for a, b in zip(flow.indices, flow.indices[1:])):
        raise MeasureError("form_residuals needs every time step stored")
    n_all = flow.n_steps
    if check_times is None:
        check_times = [flow.dt * k for k in sorted({n_all // 4, n_all // 2, n_all}) if k > 0]
    a, dt, q = flow.a, flow.dt, flow.q
    x = flow.slices[0].sites
    mix = [convolve(flow.slice(i), flow.qmix(i)) for i in range(n_all + 1)] if a > 0 else None
    report = {"form2": 0.0, "form3": 0.0, "form4": 0.0, "mass": 0.0, "per_function": {}}
    masses = np.array([flow.slice(i).total for i in range(n_all + 1)])
    for t in check_times:
        n = step_index(t, dt)
        # mass equation
        wexp = _exp_weights(a, dt, n, t)
        gm = np.array([float(q.g(m)) for m in masses[: n + 1]])
        rhs = math.exp(-a * t) * masses[0] + a * float(np.dot(wexp, gm))
        report["mass"] = max(report["mass"], abs(masses[n] - rhs))
        wtr = _trap_weights(dt, n)
        for tf in suite:
            fv = np.asarray(tf.f(x), float)
            lhs = pair(flow.slice(n), fv)
            res = {}
            if tf.df is not None:
                dfv = np.asarray(tf.df(x), float)
                dfv[0] = 0.0  # indicator 1_{x>0}
                src = np.array([pair(mix[j], fv) - pair(flow.slice(j), fv) for j in range(n + 1)]) if a > 0 else np.zeros(n + 1)
                drift = np.array([pair(flow.slice(j), dfv) for j in range(n + 1)])
                res["form2"] = lhs - pair(flow.slice(0), fv) - a * np.dot(wtr, src) + np.dot(wtr, drift)
            # shift-mild forms: <nu, T_{t-s} f> = <nu o T_{t-s}^{-1}, f>
            sh3 = np.zeros(n + 1)
            sh4 = np.zeros(n + 1)
            if a > 0:
                for j in range(n + 1):
                    cm = pair(shift_sites(mix[j], n - j), fv)
                    sh3[j] = cm - pair(shift_sites(flow.slice(j), n - j), fv)
                    sh4[j] = cm
            base = pair(shift_sites(flow.slice(0), n), fv)
            res["form3"] = lhs - base - a * np.dot(wtr, sh3)
            res["form4"] = lhs - math.exp(-a * t) * base - a * np.dot(wexp, sh4)
            for k, v in res.items():
                report[k] = max(report[k], abs(float(v)))
                d = report["per_function"].setdefault(tf.name, {})
                d[k] = max(d.get(k, 0.0), abs(float(v)))
    return report


# --------------------------------------------------------------------------
# checkpoints and CSV
# --------------------------------------------------------------------------


def save_flow(flow, path, T=None):
    mu0 = flow.slices[0]
    T = flow.times[-1] if T is None else T
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(flow.a, flow.dt, mu0.step, mu0.n_sites, flow.q.K, T))
        fh.write(np.asarray(flow.q.weights, "<f8").tobytes())
        fh.write(struct.pack("<q", len(flow.slices)))
        fh.write(np.asarray(flow.indices, "<i8").tobytes())
        for mu in flow.slices:
            fh.write(to_bytes(mu))


def load_flow(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(_MAGIC)] != _MAGIC:
        raise MeasureError(f"{path}: not a flow checkpoint")
    off = len(_MAGIC)
    a, dt, h, J, K, T = _HEADER.unpack_from(buf, off)
    off += _HEADER.size
    q = OffspringDistribution(np.frombuffer(buf, "<f8", K, off).copy())
    off += 8 * K
    (ns,) = struct.unpack_from("<q", buf, off)
    off += 8
    idx = np.frombuffer(buf, "<i8", ns, off).tolist()
    off += 8 * ns
    slices = []
    for _ in range(ns):
        mu, off = from_bytes(buf, off)
        if mu.n_sites != J or mu.step != h:
            raise MeasureError(f"{path}: slice shape does not match header")
        slices.append(mu)
    return MeasureFlow(dt, a, q, slices, idx)


FLOW_COLUMNS = ["t", "moment1", "moment2", "mass_at_zero"]


def flow_rows(flow):
    return [{"t": float(t), "moment1": moment(mu, 1), "moment2": moment(mu, 2),
             "mass_at_zero": mass_at_zero(mu)} for t, mu in zip(flow.times, flow.slices)]


def write_flow_csv(flow, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FLOW_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in flow_rows(flow):
            w.writerow({k: repr(float(v)) for k, v in r.items()})
