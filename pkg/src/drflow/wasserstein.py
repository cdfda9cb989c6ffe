"""Truncated Wasserstein distance ``W`` with cost ``rho(x, y) = min(1, |x - y|)``.

The exact solver works on the residuals left after the common mass
``min(w_j, v_j)`` is kept in place.  ``rho`` is the shortest-path metric of
the graph made of the residual sites joined in order along the line (edge
cost = gap) plus one hub node joined to every site at cost 1/2.  Optimal
transport for that metric is a min-cost flow on this graph, and because the
graph is a path with a single hub the flow problem collapses to a chain
dynamic program over the cumulative hub flow ``G``::

    minimize  sum_i gap_i |S_i - G_i| + 1/2 sum_i |G_i - G_{i-1}|

with ``S`` the cumulative net supply.  The value functions are convex
piecewise linear, so the DP runs exactly with a weighted slope trick.
Potentials come out of complementary slackness and a transport plan out of
a path decomposition of the optimal flow.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .measure import MeasureError, _same_step

DEFAULT_SUPPORT_CAP = 4096
MASS_MATCH_TOL = 1e-9
ZERO = 1e-15
# overflow is placed this far beyond x_max, i.e. at rho-distance 1 from every site
_OVERFLOW_GAP = 2.0


class SupportCapExceeded(MeasureError):
    """Residual support is larger than the configured cap."""

    def __init__(self, n, cap):
        self.n = n
        self.cap = cap
        super().__init__(
            f"reduced support has {n} sites > cap {cap}; use upper_w(), "
            "coarsen the measures, or raise max_support")


@dataclass
class TransportResult:
    value: float
    plan: np.ndarray | None = None          # rows (source_x, target_x, mass)
    dual_certificate: np.ndarray | None = None  # potential at each lattice site
    dual_overflow: float = 0.0
    n_support: int = 0

    def plan_cost(self):
        if self.plan is None or self.plan.size == 0:
            return 0.0
        return float(np.sum(self.plan[:, 2] * rho(self.plan[:, 0], self.plan[:, 1])))

    def dual_value(self, mu, nu):
        if self.dual_certificate is None:
            raise ValueError("no dual certificate available")
        f = self.dual_certificate
        return float(np.dot(mu.masses - nu.masses, f) + (mu.overflow - nu.overflow) * self.dual_overflow)


def rho(x, y):
    return np.minimum(1.0, np.abs(np.asarray(x) - np.asarray(y)))


def _residuals(mu, nu):
    _same_step(mu, nu)
    if abs(mu.total - nu.total) > MASS_MATCH_TOL:
        raise MeasureError(f"total masses differ: {mu.total!r} vs {nu.total!r}")
    w, v = mu.masses, nu.masses
    common = np.minimum(w, v)
    r = w - common
    s = v - common
    oc = min(mu.overflow, nu.overflow)
    return r, s, mu.overflow - oc, nu.overflow - oc


# --------------------------------------------------------------------------
# slope-trick chain DP
# --------------------------------------------------------------------------


class _Side:
    """Breakpoints on one side of the minimizer, stored as (position, weight).

    ``sign=-1`` is the left side (inner end = largest position), ``sign=+1``
    the right side (inner end = smallest position).
    """

    __slots__ = ("sign", "inner", "outer", "pos", "wt", "total")

    def __init__(self, sign, pos, wt):
        self.sign = sign
        self.inner = []
        self.outer = []
        self.pos = pos
        self.wt = wt
        self.total = 0.0

    def push(self, p, c):
        k = len(self.pos)
        self.pos.append(p)
        self.wt.append(c)
        heapq.heappush(self.inner, (self.sign * p, k))
        heapq.heappush(self.outer, (-self.sign * p, k))
        self.total += c

    def _peek(self, heap):
        while heap and self.wt[heap[0][1]] <= 0.0:
            heapq.heappop(heap)
        return heap[0][1] if heap else -1

    def top(self):
        return self._peek(self.inner)

    def bottom(self):
        return self._peek(self.outer)

    def take_inner(self, amount):
        """Remove ``amount`` of weight from the inner end; yields (pos, taken)."""
        out = []
        while amount > 0.0:
            k = self.top()
            if k < 0:
                break
            t = min(self.wt[k], amount)
            self.wt[k] -= t
            self.total -= t
            amount -= t
            out.append((self.pos[k], t))
        return out

    def clamp(self, cap):
        """Cap the total weight (= the outer slope); returns the cut position."""
        cut = None
        while self.total > cap:
            k = self.bottom()
            if k < 0:
                break
            t = min(self.wt[k], self.total - cap)
            self.wt[k] -= t
            self.total -= t
            cut = self.pos[k]
        return cut


def _chain_dp(S, gap):
    """Minimize ``sum_{i<n-1} gap_i|S_i - G_i| + 1/2 sum_i |G_i - G_{i-1}|``
    with ``G_{-1} = G_{n-1} = 0``.  Returns ``(value, G)``."""
    n = S.size
    pos, wt = [], []
    left = _Side(-1, pos, wt)
    right = _Side(+1, pos, wt)
    left.push(0.0, 1.0)
    right.push(0.0, 1.0)
    m = 0.0
    lo = np.empty(n)
    hi = np.empty(n)
    for i in range(n):
        a = left.clamp(0.5)
        b = right.clamp(0.5)
        lo[i] = -math.inf if a is None else a
        hi[i] = math.inf if b is None else b
        if i == n - 1:
            break
        s, w = float(S[i]), float(gap[i])
        if w <= 0.0:
            continue
        kl, kr = left.top(), right.top()
        lt = pos[kl] if kl >= 0 else -math.inf
        rt = pos[kr] if kr >= 0 else math.inf
        if lt <= s <= rt:
            left.push(s, w)
            right.push(s, w)
        elif s < lt:
            left.push(s, 2.0 * w)
            for p, t in left.take_inner(w):
                right.push(p, t)
                m += t * (p - s)
        else:
            right.push(s, 2.0 * w)
            for p, t in right.take_inner(w):
                left.push(p, t)
                m += t * (s - p)
    # evaluate the final function at G = 0
    val = m + _side_excess(left, 0.0, -1) + _side_excess(right, 0.0, +1)
    G = np.empty(n)
    g = 0.0
    G[n - 1] = 0.0
    for i in range(n - 1, 0, -1):
        g = min(max(g, lo[i]), hi[i])
        G[i - 1] = g
    return val, G


def _side_excess(side, x, sign):
    tot = 0.0
    for h in side.inner:
        k = h[1]
        c = side.wt[k]
        if c <= 0.0:
            continue
        p = side.pos[k]
        d = (p - x) if sign < 0 else (x - p)
        if d > 0:
            tot += c * d
    return tot


# --------------------------------------------------------------------------
# potentials and plan from the optimal flow
# --------------------------------------------------------------------------


def _potentials(x, d, g, F, gap, tol):
    """Node potentials satisfying complementary slackness with flow (g, F).

    Used line edges pin potential differences inside blocks; used hub edges
    pin a block to +-1/2.  A forward/backward pass over the chain of blocks
    then picks offsets with ``|phi| <= 1/2`` and ``|phi_i - phi_{i+1}| <= gap_i``.
    """
    used_line = np.abs(F) > tol
    block = np.r_[0, np.cumsum(~used_line)]
    step = np.where(F > 0, -gap, gap) * used_line
    off = np.r_[0.0, np.cumsum(step)]
    first = np.flatnonzero(np.r_[True, block[1:] != block[:-1]])
    off -= off[first][block]
    nb = int(block[-1]) + 1
    mn = np.full(nb, np.inf)
    mx = np.full(nb, -np.inf)
    np.minimum.at(mn, block, off)
    np.maximum.at(mx, block, off)
    lo = -0.5 - mn
    hi = 0.5 - mx
    for i in np.flatnonzero(np.abs(g) > tol):
        c = (0.5 if g[i] > 0 else -0.5) - off[i]
        b = block[i]
        lo[b] = max(lo[b], c)
        hi[b] = min(hi[b], c)
    bad = lo > hi
    lo[bad] = hi[bad] = 0.5 * (lo[bad] + hi[bad])
    e = first[1:] - 1                 # edge joining block b and b+1
    oe = off[e]
    ge = gap[e]
    for b in range(nb - 1):
        lo[b + 1] = max(lo[b + 1], lo[b] + oe[b] - ge[b])
        hi[b + 1] = min(hi[b + 1], hi[b] + oe[b] + ge[b])
        if lo[b + 1] > hi[b + 1]:
            lo[b + 1] = hi[b + 1] = 0.5 * (lo[b + 1] + hi[b + 1])
    c = np.empty(nb)
    c[-1] = 0.5 * (lo[-1] + hi[-1])
    for b in range(nb - 2, -1, -1):
        t = c[b + 1] - oe[b]
        c[b] = min(max(t, lo[b]), hi[b])
    phi = c[block] + off
    return np.clip(phi, -0.5, 0.5)


def _nw_corner(src_idx, src_mass, dst_idx, dst_mass):
    """Monotone coupling of two lists of masses with equal totals."""
    if src_mass.size == 0 or dst_mass.size == 0:
        return np.empty((0, 3))
    cs = np.cumsum(src_mass)
    cd = np.cumsum(dst_mass)
    total = min(cs[-1], cd[-1])
    br = np.union1d(cs, cd)
    br = br[br <= total * (1 + 1e-15)]
    br = np.minimum(br, total)
    prev = np.r_[0.0, br[:-1]]
    m = br - prev
    keep = m > ZERO
    mid = 0.5 * (br + prev)[keep]
    i = np.minimum(np.searchsorted(cs, mid), cs.size - 1)
    j = np.minimum(np.searchsorted(cd, mid), cd.size - 1)
    return np.column_stack([src_idx[i], dst_idx[j], m[keep]])


def _splice(pairs, r_node, s_node, n):
    """Merge ``(j -> i), (i -> l)`` into ``(j -> l)`` wherever node ``i``
    both receives and sends more than its own residual."""
    out_l = [[] for _ in range(n)]
    in_l = [[] for _ in range(n)]
    recs = []
    for a, b, m in pairs:
        a, b = int(a), int(b)
        if a == b or m <= ZERO:
            continue
        rec = [a, b, m]
        recs.append(rec)
        out_l[a].append(rec)
        in_l[b].append(rec)
    for i in range(n):
        outs = [r for r in out_l[i] if r[2] > ZERO and r[0] == i]
        ins = [r for r in in_l[i] if r[2] > ZERO and r[1] == i]
        sent = sum(r[2] for r in outs)
        excess = sent - r_node[i]
        if excess <= ZERO or not ins:
            continue
        ii = oi = 0
        while excess > ZERO and ii < len(ins) and oi < len(outs):
            rin, rout = ins[ii], outs[oi]
            t = min(rin[2], rout[2], excess)
            j, l = rin[0], rout[1]
            rin[2] -= t
            rout[2] -= t
            excess -= t
            if j != l:
                rec = [j, l, t]
                recs.append(rec)
                out_l[j].append(rec)
                in_l[l].append(rec)
            if rin[2] <= ZERO:
                ii += 1
            if rout[2] <= ZERO:
                oi += 1
    arr = np.array([r for r in recs if r[2] > ZERO], dtype=float).reshape(-1, 3)
    return arr


def _solve_reduced(x, r, s, with_plan):
    d = r - s
    n = x.size
    gap = np.diff(x)
    S = np.cumsum(d)
    S[-1] = 0.0
    value, G = _chain_dp(S, gap)
    g = np.diff(np.r_[0.0, G])
    F = S[:-1] - G[:-1]
    tol = 1e-13
    phi = _potentials(x, d, g, F, gap, tol)
    plan = None
    if with_plan:
        e = d - g
        idx = np.arange(n)
        ep, em = np.clip(e, 0, None), np.clip(-e, 0, None)
        gp, gm = np.clip(g, 0, None), np.clip(-g, 0, None)
        line = _nw_corner(idx[ep > ZERO], ep[ep > ZERO], idx[em > ZERO], em[em > ZERO])
        hub = _nw_corner(idx[gp > ZERO], gp[gp > ZERO], idx[gm > ZERO], gm[gm > ZERO])
        pairs = np.vstack([line, hub])
        plan = _splice(pairs, r, s, n)
    return value, phi, plan


def exact_w(mu, nu, max_support=DEFAULT_SUPPORT_CAP, with_plan=True, support_tol=ZERO):
    """Exact ``W(mu, nu)``.

    ``max_support`` bounds the number of residual sites (``None`` = no cap).
    The plan lists ``(source_x, target_x, mass)`` on the residual measures;
    the overflow bucket, if present, sits at ``x = inf`` (rho-distance 1).
    """
    r, s, ro, so = _residuals(mu, nu)
    if not (mu.normalized and nu.normalized):
        raise MeasureError("exact_w needs normalized measures")
    sites = np.flatnonzero((r > support_tol) | (s > support_tol))
    has_over = ro > support_tol or so > support_tol
    n = sites.size + int(has_over)
    if max_support is not None and n > max_support:
        raise SupportCapExceeded(n, max_support)
    phi_full = np.zeros(mu.n_sites)
    if n <= 1:
        return TransportResult(0.0, np.empty((0, 3)), phi_full, 0.0, n)
    x = sites * mu.step
    rr, ss = r[sites], s[sites]
    if has_over:
        x = np.r_[x, mu.x_max + _OVERFLOW_GAP]
        rr, ss = np.r_[rr, ro], np.r_[ss, so]
    # re-balance masses dropped below support_tol
    diff = rr.sum() - ss.sum()
    if diff > 0:
        ss[np.argmax(ss)] += diff
    elif diff < 0:
        rr[np.argmax(rr)] -= diff
    value, phi, plan = _solve_reduced(x, rr, ss, with_plan)
    n_sites = sites.size
    phi_sites = phi[:n_sites]
    # piecewise-linear extension between residual sites, constant outside
    phi_full = np.interp(np.arange(mu.n_sites) * mu.step, x[:n_sites], phi_sites) if n_sites else phi_full
    dual_over = float(phi[-1]) if has_over else (float(phi_sites[-1]) if n_sites else 0.0)
    if plan is not None and plan.size:
        px = np.where(plan[:, :2] < n_sites, plan[:, :2] * 0.0, math.inf)
        ids = plan[:, :2].astype(int)
        inside = ids < n_sites
        px[inside] = x[ids[inside]]
        plan = np.column_stack([px, plan[:, 2]])
    return TransportResult(float(value), plan, phi_full, dual_over, n)


def upper_w(mu, nu):
    """Comonotone (quantile-matched) coupling of the residuals; an upper bound on W."""
    r, s, ro, so = _residuals(mu, nu)
    x = mu.sites
    # overflow as a point at +inf
    xr = np.r_[x, math.inf]
    rr = np.r_[r, ro]
    ss = np.r_[s, so]
    ir = np.flatnonzero(rr > 0)
    js = np.flatnonzero(ss > 0)
    if ir.size == 0 or js.size == 0:
        return 0.0
    cr = np.cumsum(rr[ir])
    cs = np.cumsum(ss[js])
    total = min(cr[-1], cs[-1])
    br = np.union1d(cr, cs)
    br = np.minimum(br[br <= total * (1 + 1e-15)], total)
    prev = np.r_[0.0, br[:-1]]
    m = br - prev
    mid = 0.5 * (br + prev)
    a = xr[ir[np.minimum(np.searchsorted(cr, mid), ir.size - 1)]]
    b = xr[js[np.minimum(np.searchsorted(cs, mid), js.size - 1)]]
    with np.errstate(invalid="ignore"):
        c = np.where(np.isinf(a) & np.isinf(b), 0.0, np.minimum(1.0, np.abs(a - b)))
    return float(np.sum(m * c))


def random_test_function(rng, sites, n_knots=None):
    """Random piecewise-linear ``f`` with slopes in [-1, 1] and range inside an
    interval of length 1, so ``|f(x) - f(y)| <= rho(x, y)``."""
    L = sites[-1] if sites.size > 1 else 1.0
    k = int(rng.integers(1, 12)) if n_knots is None else n_knots
    knots = np.sort(rng.uniform(0, max(L, 1e-12), size=k))
    knots = np.r_[0.0, knots, max(L, 1e-12)]
    slopes = rng.uniform(-1, 1, size=knots.size - 1)
    vals = np.r_[0.0, np.cumsum(slopes * np.diff(knots))]
    f = np.interp(sites, knots, vals)
    lo = rng.uniform(f.min() - 1.0, f.max()) if f.size else 0.0
    lo = min(max(lo, f.min() - 1.0), f.max())
    return np.clip(f, lo, lo + 1.0)


def dual_lb(mu, nu, trials=64, seed=0, use_exact=True, max_support=DEFAULT_SUPPORT_CAP):
    """Lower bound ``max_f |<mu - nu, f>|`` over admissible test functions.

    Candidates are random piecewise-linear functions, the ramps
    ``min(1, (x - c)_+)`` and, when ``use_exact`` and the support fits,
    the optimal potentials of :func:`exact_w`.
    """
    _same_step(mu, nu)
    diff = mu.masses - nu.masses
    dover = mu.overflow - nu.overflow
    x = mu.sites
    best = 0.0
    rng = np.random.default_rng(seed)
    for _ in range(int(trials)):
        f = random_test_function(rng, x)
        # overflow sits beyond the grid; any value within [lo, lo+1] reachable is fine
        val = float(np.dot(diff, f) + dover * f[-1])
        best = max(best, abs(val))
    for c in np.linspace(0.0, x[-1], 17):
        f = np.clip(x - c, 0.0, 1.0)
        best = max(best, abs(float(np.dot(diff, f) + dover * 1.0)))
    if use_exact:
        try:
            res = exact_w(mu, nu, max_support=max_support, with_plan=False)
        except SupportCapExceeded:
            res = None
        if res is not None:
            best = max(best, abs(res.dual_value(mu, nu)))
    return best


def w_auto(mu, nu, max_support=DEFAULT_SUPPORT_CAP):
    """``(value, method)``: exact when the support fits, else the upper bound."""
    try:
        return exact_w(mu, nu, max_support=max_support, with_plan=False).value, "exact"
    except SupportCapExceeded:
        return upper_w(mu, nu), "upper"


def coarse_w(mu, nu, factor):
    """Exact ``W`` of block-aggregated measures and the added error bound.

    Aggregation moves each unit of mass by at most ``factor * step / 2``, so
    ``|W - W_coarse| <= factor * step``.
    """
    from .measure import coarsen
    a, b = coarsen(mu, factor), coarsen(nu, factor)
    res = exact_w(a.normalize() if not a.normalized else a,
                  b.normalize() if not b.normalized else b,
                  max_support=None, with_plan=False)
    return res.value, factor * mu.step


def dense_lp_w(mu, nu):
    """Oracle: solve the full coupling LP with HiGHS (no common-mass removal)."""
    from scipy.optimize import linprog
    from scipy import sparse

    i = np.flatnonzero(mu.masses > 0)
    j = np.flatnonzero(nu.masses > 0)
    a = mu.masses[i]
    b = nu.masses[j]
    xi = i * mu.step
    yj = j * nu.step
    if mu.overflow > 0:
        a = np.r_[a, mu.overflow]
        xi = np.r_[xi, math.inf]
    if nu.overflow > 0:
        b = np.r_[b, nu.overflow]
        yj = np.r_[yj, math.inf]
    with np.errstate(invalid="ignore"):
        C = np.minimum(1.0, np.abs(xi[:, None] - yj[None, :]))
    C[np.isinf(xi)[:, None] & np.isinf(yj)[None, :]] = 0.0
    na, nb = a.size, b.size
    rows = np.r_[np.repeat(np.arange(na), nb), na + np.tile(np.arange(nb), na)]
    cols = np.r_[np.arange(na * nb), np.arange(na * nb)]
    A = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(na + nb, na * nb))
    res = linprog(C.ravel(), A_eq=A, b_eq=np.r_[a, b], bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"dense LP failed: {res.message}")
    return float(res.fun)


def plan_to_csv(result, path):
    with open(path, "w") as fh:
        fh.write("source_x,target_x,mass\n")
        if result.plan is not None:
            for a, b, m in result.plan:
                fh.write(f"{a:.17g},{b:.17g},{m:.17g}\n")
