"""Transition semigroup ``P_{r,t}`` of the frozen-coefficient linear flow.

A row ``nu`` is carried from ``r`` to ``t`` by the same one-step map as the
marching solver, with the offspring mixture taken from the base flow::

    nu <- [(1 - a dt) nu + a dt nu * mu_s^q] o T_dt^{-1}

Rows are stored as a dense ``(R, J)`` array and stepped together.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sp_fft

from .cdr_flow import default_suite, step_index
from .measure import GridMeasure, MeasureError
from .wasserstein import exact_w, rho

ROW_TOL = 1e-8
_CHUNK = 256


@dataclass
class TransitionKernel:
    r: float
    t: float
    step: float
    starts: np.ndarray      # site indices
    rows: np.ndarray        # (R, J) masses
    overflow: np.ndarray    # (R,)

    def row(self, k):
        return GridMeasure(self.step, self.rows[k], float(self.overflow[k]))

    def row_at(self, x):
        j = step_index(x, self.step)
        hit = np.flatnonzero(self.starts == j)
        if hit.size == 0:
            raise MeasureError(f"no row for start x={x}")
        return self.row(int(hit[0]))

    def totals(self):
        return self.rows.sum(axis=1) + self.overflow

    def to_csv(self, path, min_mass=0.0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["start_x", "target_x", "mass"])
            for k, j in enumerate(self.starts):
                nz = np.flatnonzero(self.rows[k] > min_mass)
                for i in nz:
                    w.writerow([repr(float(j * self.step)), repr(float(i * self.step)), repr(float(self.rows[k, i]))])


def default_starts(n_sites, step, count=64):
    """``count`` sites spread geometrically over ``[0, x_max]`` (always including 0)."""
    x_max = (n_sites - 1) * step
    g = np.geomspace(step, x_max, count - 1) if n_sites > 1 else np.array([])
    idx = np.unique(np.r_[0, np.rint(g / step).astype(int)])
    return idx[idx < n_sites]


def _batch_conv(V, b):
    """Truncated convolution of every row of ``V`` with ``b``."""
    n = V.shape[1]
    nb = np.flatnonzero(b)
    if nb.size == 0:
        return np.zeros_like(V)
    b = b[: nb[-1] + 1]
    L = sp_fft.next_fast_len(n + b.size - 1, real=True)
    out = sp_fft.irfft(sp_fft.rfft(V, L, axis=1) * sp_fft.rfft(b, L), L, axis=1)[:, :n]
    np.maximum(out, 0.0, out=out)
    return out


def _check_range(flow, i0, i1):
    if i0 > i1:
        raise MeasureError("need r <= t")
    if i1 > flow.n_steps or any(not flow.has(i) for i in range(i0, i1)):
        raise MeasureError(f"flow does not cover steps {i0}..{i1} with every slice stored")


def propagate(flow, r, t, V, over=None):
    """Carry the rows of ``V`` (and their overflow) from ``r`` to ``t``."""
    dt = flow.dt
    i0, i1 = step_index(r, dt), step_index(t, dt)
    _check_range(flow, i0, i1)
    V = np.array(V, dtype=float, ndmin=2)
    over = np.zeros(V.shape[0]) if over is None else np.array(over, dtype=float)
    a_dt = flow.a * dt
    for i in range(i0, i1):
        if a_dt > 0:
            mq = flow.qmix(i)
            C = _batch_conv(V, mq.masses)
            tot = (V.sum(axis=1) + over) * mq.total
            c_over = np.maximum(tot - C.sum(axis=1), 0.0)
            V = (1.0 - a_dt) * V + a_dt * C
            over = (1.0 - a_dt) * over + a_dt * c_over
        else:
            V = V.copy()
        V[:, 0] += V[:, 1]
        V[:, 1:-1] = V[:, 2:]
        V[:, -1] = 0.0
    return V, over


def transition(flow, r, t, nu):
    """``nu P_{r,t}`` for a single measure."""
    V, o = propagate(flow, r, t, nu.masses[None, :], [nu.overflow])
    return GridMeasure(nu.step, V[0], float(o[0]))


def kernel(flow, r, t, starts=None):
    n = flow.slices[0].n_sites
    starts = default_starts(n, flow.h) if starts is None else np.asarray(starts, dtype=int)
    V = np.zeros((starts.size, n))
    V[np.arange(starts.size), starts] = 1.0
    rows, over = propagate(flow, r, t, V)
    K = TransitionKernel(r, t, flow.h, starts, rows, over)
    bad = np.abs(K.totals() - 1.0) > ROW_TOL
    if bad.any():
        raise MeasureError(f"kernel rows not normalized: {K.totals()[bad][:3]}")
    return K


def entrance_residual(flow, t, r=0.0):
    """``tv(mu_r P_{r,t}, mu_t)``."""
    nu = transition(flow, r, t, flow.at(r))
    mu = flow.at(t)
    return float(np.abs(nu.masses - mu.masses).sum() + abs(nu.overflow - mu.overflow))


def chapman_kolmogorov_residual(flow, r, s, t, starts=None, snap_to=None):
    """Max over starts of ``tv(P_{r,t}(x,.), int P_{r,s}(x,dy) P_{s,t}(y,.))``.

    By default every intermediate site carrying mass gets its own row, so the
    composition is exact.  With ``snap_to`` (site indices) intermediate mass is
    moved to the nearest listed site first; the returned dict then carries
    the snapping distance.
    """
    Krt = kernel(flow, r, t, starts)
    Krs = kernel(flow, r, s, Krt.starts)
    W = Krs.rows
    snap = 0.0
    if snap_to is not None:
        snap_to = np.unique(np.asarray(snap_to, dtype=int))
        J = W.shape[1]
        near = snap_to[np.abs(np.arange(J)[:, None] - snap_to[None, :]).argmin(axis=1)]
        Ws = np.zeros((W.shape[0], snap_to.size))
        pos = np.searchsorted(snap_to, near)
        for k in range(W.shape[0]):
            Ws[k] = np.bincount(pos, W[k], minlength=snap_to.size)
        used = np.abs(np.arange(J) - near)[W.max(axis=0) > 0]
        snap = float(used.max() * flow.h) if used.size else 0.0
        ys, W = snap_to, Ws
    else:
        ys = np.flatnonzero(W.max(axis=0) > 0)
        W = W[:, ys]
    comp = np.zeros_like(Krt.rows)
    comp_over = Krs.overflow.copy()
    for c0 in range(0, ys.size, _CHUNK):
        y = ys[c0:c0 + _CHUNK]
        V = np.zeros((y.size, comp.shape[1]))
        V[np.arange(y.size), y] = 1.0
        rows, over = propagate(flow, s, t, V)
        comp += W[:, c0:c0 + _CHUNK] @ rows
        comp_over += W[:, c0:c0 + _CHUNK] @ over
    tv = np.abs(Krt.rows - comp).sum(axis=1) + np.abs(Krt.overflow - comp_over)
    return {"residual": float(tv.max()), "snap_distance": snap, "n_intermediate": int(ys.size)}


def contraction_check(flow, r, t, pairs, slack=None):
    """``W(P_{r,t}(x,.), P_{r,t}(y,.)) <= e^{a(t-r)} rho(x, y) + slack`` per pair."""
    slack = 5 * flow.dt if slack is None else slack
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    sites = np.unique(np.rint(pairs / flow.h).astype(int))
    K = kernel(flow, r, t, sites)
    out = []
    factor = math.exp(flow.a * (t - r))
    for x, y in pairs:
        w = exact_w(K.row_at(x), K.row_at(y), max_support=None, with_plan=False).value
        bound = factor * float(rho(x, y))
        out.append({"x": float(x), "y": float(y), "W": w, "bound": bound, "ok": w <= bound + slack})
    return out


# --------------------------------------------------------------------------
# forward / backward equations
# --------------------------------------------------------------------------


def _extended(f, step, n):
    """Samples of ``f`` on ``2n`` sites so that ``f(y + z)`` is available for ``y, z`` on the grid."""
    return np.asarray(f(np.arange(2 * n) * step), dtype=float)


def generator_vector(flow, i, fv_ext, n):
    """``(A_s f)(y)`` at all grid sites, ``s = i dt``.

    ``fv_ext`` holds samples on ``2n`` sites; jumps use the stored
    ``mu_s^q`` (its overflow is charged ``f(last extended site)``).
    """
    h = flow.h
    mq = flow.qmix(i)
    b = mq.masses
    # correlation sum_z b_z f(y + z), y < n
    L = sp_fft.next_fast_len(fv_ext.size + b.size, real=True)
    corr = sp_fft.irfft(sp_fft.rfft(fv_ext[::-1], L) * sp_fft.rfft(b, L), L)
    corr = corr[fv_ext.size - 1 - np.arange(n)]
    f = fv_ext[:n]
    jump = corr + mq.overflow * fv_ext[-1] - mq.total * f
    drift = np.zeros(n)
    drift[1:] = (f[1:] - f[:-1]) / h
    return flow.a * jump - drift


def adjoint_step(flow, i, g):
    """``(S_i^* g)(y) = (1 - a dt) g((y-h)_+) + a dt sum_z mu_i^q(z) g((y+z-h)_+)``.

    ``g`` is held constant past the last site.
    """
    n = g.size
    a_dt = flow.a * flow.dt
    gs = np.r_[g[0], g[:-1]]   # g((y-h)_+)
    if a_dt == 0:
        return gs
    mq = flow.qmix(i)
    ext = np.r_[gs, np.full(n, g[-1])]
    b = mq.masses
    L = sp_fft.next_fast_len(ext.size + b.size, real=True)
    corr = sp_fft.irfft(sp_fft.rfft(ext[::-1], L) * sp_fft.rfft(b, L), L)
    corr = corr[ext.size - 1 - np.arange(n)] + mq.overflow * g[-1]
    return (1.0 - a_dt) * gs + a_dt * corr


def backward_values(flow, r, t, fv):
    """``u_s = P_{s,t} f`` on the grid for ``s = t, t - dt, ..., r`` (listed from ``r``)."""
    i0, i1 = step_index(r, flow.dt), step_index(t, flow.dt)
    _check_range(flow, i0, i1)
    u = np.asarray(fv, dtype=float)
    out = [u]
    for i in range(i1 - 1, i0 - 1, -1):
        u = adjoint_step(flow, i, u)
        out.append(u)
    return out[::-1]


def _trap(vals, dt):
    vals = np.asarray(vals)
    if vals.shape[0] < 2:
        return np.zeros(vals.shape[1:])
    return dt * (vals.sum(axis=0) - 0.5 * (vals[0] + vals[-1]))


def forward_backward_residuals(flow, r, t, suite=None, xs=None):
    """Residuals of ``P_{r,t}f = f + int P_{r,s} A_s f ds`` (forward) and
    ``P_{r,t}f = f + int A_s P_{s,t} f ds`` (backward) at the points ``xs``."""
    suite = default_suite() if suite is None else suite
    dt, h = flow.dt, flow.h
    n = flow.slices[0].n_sites
    i0, i1 = step_index(r, dt), step_index(t, dt)
    _check_range(flow, i0, i1)
    xs = np.array([0.0, 0.5, 1.0, 2.0, 3.0]) if xs is None else np.asarray(xs, float)
    js = np.array([step_index(x, h) for x in xs])
    V = np.zeros((js.size, n))
    V[np.arange(js.size), js] = 1.0
    # rows P_{r,s}(x, .) for every s in [r, t]
    rows = [(V, np.zeros(js.size))]
    for i in range(i0, i1):
        rows.append(propagate(flow, i * dt, (i + 1) * dt, *rows[-1]))
    report = {"forward": 0.0, "backward": 0.0, "per_function": {}}
    for tf in suite:
        ext = _extended(tf.f, h, n)
        fv = ext[:n]
        Af = [generator_vector(flow, i, ext, n) for i in range(i0, i1 + 1)]
        lhs_f = rows[-1][0] @ fv + rows[-1][1] * fv[-1]
        integrand = [R @ A + o * A[-1] for (R, o), A in zip(rows, Af)]
        fwd = lhs_f - fv[js] - _trap(integrand, dt)
        us = backward_values(flow, r, t, fv)
        Au = []
        for k, i in enumerate(range(i0, i1 + 1)):
            u_ext = np.r_[us[k], np.full(n, us[k][-1])]
            Au.append(generator_vector(flow, i, u_ext, n)[js])
        bwd = us[0][js] - fv[js] - _trap(Au, dt)
        fr, br = float(np.abs(fwd).max()), float(np.abs(bwd).max())
        report["forward"] = max(report["forward"], fr)
        report["backward"] = max(report["backward"], br)
        report["per_function"][tf.name] = {"forward": fr, "backward": br}
    return report


def derivative_commutation(flow, r, t, f, df, x_hi=None):
    """Compare ``D(P_{r,t} f)`` with ``P_{r,t}(D f)`` on interior sites, ``D`` the
    central lattice difference, for ``f`` with ``f'(0) = 0``.

    Returns the max gap over all sites up to ``x_hi`` and over sites with
    ``x > t - r``, where no path from ``x`` can reach the origin by time ``t``.
    Below ``t - r`` the gap does not vanish as ``h -> 0``: paths that are
    stopped at 0 forget their starting point, so the identity fails there.
    """
    n = flow.slices[0].n_sites
    h = flow.h
    x = np.arange(n) * h
    u = backward_values(flow, r, t, np.asarray(f(x), float))[0]
    du = backward_values(flow, r, t, np.asarray(df(x), float))[0]
    hi = n // 2 if x_hi is None else int(round(x_hi / h))
    d = (u[2:hi + 1] - u[: hi - 1]) / (2 * h)
    gap = np.abs(d - du[1:hi])
    xs = x[1:hi]
    away = gap[xs > (t - r) + h]
    return {"all": float(gap.max()), "away_from_origin": float(away.max()) if away.size else 0.0}
