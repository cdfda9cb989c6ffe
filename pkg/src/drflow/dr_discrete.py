"""Discrete-time generalized model ``mu_{n+1} = [(1-alpha) mu_n + alpha mu_n * mu_n^q] o T_1^{-1}``."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .measure import (
    MASS_TOL,
    OVERFLOW_LIMIT,
    GridMeasure,
    InitialMeasureSpec,
    MeasureError,
    OffspringDistribution,
    TailTruncationError,
    check_step,
    convolve,
    discretize,
    lattice_shift,
    mass_at_zero,
    moment,
    pushforward_shift,
    q_mixture,
)

DEFAULT_EPS_F = 1e-4


@dataclass(frozen=True)
class DiscreteModel:
    alpha: float
    q: OffspringDistribution
    initial: InitialMeasureSpec
    h: float = 1.0
    x_max: float = 64.0
    overflow_limit: float = OVERFLOW_LIMIT
    shift: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise MeasureError(f"alpha must lie in [0, 1], got {self.alpha}")
        check_step(self.h)
        if abs(self.x_max / self.h - round(self.x_max / self.h)) > 1e-9:
            raise MeasureError("x_max must be a whole number of lattice steps")
        lattice_shift(self.shift, self.h)

    @classmethod
    def classical(cls, initial, x_max=64.0, h=1.0):
        return cls(1.0, OffspringDistribution.classical(), initial, h, x_max)

    @property
    def growth1(self):
        return 1.0 + self.alpha * self.q.m1

    @property
    def growth2(self):
        return 1.0 + 2.0 * self.alpha * self.q.m1 + self.alpha * self.q.m2

    def initial_measure(self):
        return discretize(self.initial, self.h, self.x_max, self.overflow_limit)

    def with_initial(self, spec):
        return replace(self, initial=spec)


def dr_step(mu, model):
    if not mu.normalized:
        raise MeasureError(f"dr_step needs a normalized measure, total={mu.total!r}")
    a = model.alpha
    if a == 0.0:
        mixed = mu
    else:
        c = convolve(mu, q_mixture(mu, model.q, overflow_limit=1.0))
        mixed = GridMeasure(mu.step, (1.0 - a) * mu.masses + a * c.masses,
                            (1.0 - a) * mu.overflow + a * c.overflow)
    out = pushforward_shift(mixed, model.shift)
    if abs(out.total - 1.0) > MASS_TOL:
        raise MeasureError(f"dr_step lost mass: total={out.total!r}")
    # total mass 1 is a repelling fixed point of T -> (1-a) T + a T^2 (slope 1 + a m1),
    # so round-off in the total would double every step without this projection
    if out.total != 1.0:
        out = out.scaled(1.0 / out.total)
    return out.check_overflow(model.overflow_limit, "dr_step")


def iterate(model, n, mu0=None):
    """Yield ``mu_0, ..., mu_n`` without keeping the whole trajectory."""
    if n < 0:
        raise ValueError("n must be >= 0")
    mu = model.initial_measure() if mu0 is None else mu0
    yield mu
    for i in range(n):
        try:
            mu = dr_step(mu, model)
        except TailTruncationError as e:
            raise TailTruncationError(e.overflow, e.limit, f"step {i + 1}") from None
        yield mu


def evolve(model, n, mu0=None):
    return list(iterate(model, n, mu0))


def free_energy_proxy(trajectory, model):
    """``(1 + alpha m1)^{-n} <mu_n, x>``; equals ``2^{-n} <mu_n, x>`` when alpha = q_1 = 1.

    For other models this normalization is a heuristic.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    m = np.array([moment(mu, 1) for mu in trajectory])
    return m / model.growth1 ** np.arange(m.size)


def sustainability(mu):
    """``mu(0, inf)``; overflow mass counts as alive."""
    return mu.total - mass_at_zero(mu)


def trajectory_rows(trajectory, model):
    proxy = free_energy_proxy(trajectory, model)
    rows = []
    for n, mu in enumerate(trajectory):
        rows.append({
            "n": n,
            "moment1": moment(mu, 1),
            "moment2": moment(mu, 2),
            "proxy": proxy[n],
            "sustainability": sustainability(mu),
            "mass_at_zero": mass_at_zero(mu),
            "overflow": mu.overflow,
        })
    return rows


TRAJECTORY_COLUMNS = ["n", "moment1", "moment2", "proxy", "sustainability", "mass_at_zero", "overflow"]


def write_rows(rows, path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def write_trajectory_csv(trajectory, model, path):
    write_rows(trajectory_rows(trajectory, model), path, TRAJECTORY_COLUMNS)


# --------------------------------------------------------------------------
# phase scan
# --------------------------------------------------------------------------


@dataclass
class PhaseScanResult:
    n: int
    eps_F: float
    table: list = field(default_factory=list)  # dicts p, proxy, sustainability
    p_c: float = float("nan")
    bracket: tuple = (float("nan"), float("nan"))
    label: str = "heuristic finite-n proxy"


def _endpoint(model, theta, p, n):
    mdl = model.with_initial(theta.with_p(float(p)))
    last = None
    for last in iterate(mdl, n):
        pass
    proxy = moment(last, 1) / model.growth1**n
    return float(proxy), float(sustainability(last))


def _endpoint_args(args):
    return _endpoint(*args)


def phase_scan(theta, p_grid, n, model, eps_F=DEFAULT_EPS_F, bisect_steps=30, workers=1):
    """Scan ``p delta_0 + (1-p) theta`` over ``p_grid`` and bisect the largest
    ``p`` with ``proxy_n(p) > eps_F``."""
    p_grid = np.asarray(p_grid, dtype=float)
    if np.any((p_grid < 0) | (p_grid > 1)):
        raise ValueError("p_grid must lie in [0, 1]")
    args = [(model, theta, p, n) for p in p_grid]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(_endpoint_args, args))
    else:
        vals = [_endpoint(*a) for a in args]
    res = PhaseScanResult(n=n, eps_F=eps_F)
    for p, (pr, su) in zip(p_grid, vals):
        res.table.append({"p": float(p), "proxy": pr, "sustainability": su})
    order = np.argsort(p_grid)
    ps = p_grid[order]
    above = np.array([vals[i][0] > eps_F for i in order])
    if not above.any():
        res.p_c, res.bracket = float(ps[0]), (float("nan"), float(ps[0]))
        return res
    i = int(np.flatnonzero(above)[-1])
    if i == ps.size - 1:
        res.p_c, res.bracket = float(ps[i]), (float(ps[i]), float("nan"))
        return res
    lo, hi = float(ps[i]), float(ps[i + 1])
    for _ in range(bisect_steps):
        mid = 0.5 * (lo + hi)
        if _endpoint(model, theta, mid, n)[0] > eps_F:
            lo = mid
        else:
            hi = mid
    res.p_c = 0.5 * (lo + hi)
    res.bracket = (lo, hi)
    return res
