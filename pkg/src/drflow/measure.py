"""Lattice measures on the half line and the primitive operations on them.

A :class:`GridMeasure` holds masses ``w_j`` at sites ``x_j = j * step``,
``j = 0..J``, plus an ``overflow`` bucket for mass that has left
``[0, J * step]``.  All operations return new measures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import fft as sp_fft

MASS_TOL = 1e-10
OVERFLOW_LIMIT = 1e-6
NEG_CLAMP = 1e-12
_DIRECT_CONV_MAX = 64


class MeasureError(ValueError):
    """Invalid lattice or measure arguments."""


class TailTruncationError(MeasureError):
    """Raised when more than the allowed mass leaves the grid."""

    def __init__(self, overflow, limit=OVERFLOW_LIMIT, where=""):
        self.overflow = overflow
        self.limit = limit
        msg = f"overflow mass {overflow:.3e} exceeds {limit:.1e}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


def check_step(step):
    """Validate that ``1/step`` is a positive integer and return ``1/step``."""
    if not step > 0:
        raise MeasureError(f"step must be positive, got {step}")
    inv = 1.0 / step
    m = round(inv)
    if m < 1 or abs(inv - m) > 1e-9 * max(1.0, inv):
        raise MeasureError(f"1/step must be an integer, got step={step}")
    return m


def lattice_shift(a, step):
    """Number of sites in a shift by ``a``; raises if ``a`` is not aligned."""
    if a < 0:
        raise MeasureError(f"shift must be nonnegative, got {a}")
    s = a / step
    n = round(s)
    if abs(s - n) > 1e-9 * max(1.0, s):
        raise MeasureError(f"shift {a} is not a multiple of step {step}")
    return int(n)


@dataclass(frozen=True, eq=False)
class GridMeasure:
    step: float
    masses: np.ndarray
    overflow: float = 0.0

    def __post_init__(self):
        w = np.array(self.masses, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise MeasureError("masses must be a nonempty 1-d array")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise MeasureError("masses must be finite and nonnegative")
        if not self.overflow >= 0:
            raise MeasureError(f"overflow must be nonnegative, got {self.overflow}")
        w.setflags(write=False)
        object.__setattr__(self, "masses", w)
        object.__setattr__(self, "overflow", float(self.overflow))

    @property
    def n_sites(self):
        return self.masses.size

    @property
    def x_max(self):
        return (self.n_sites - 1) * self.step

    @cached_property
    def sites(self):
        x = np.arange(self.n_sites) * self.step
        x.setflags(write=False)
        return x

    @cached_property
    def total(self):
        return float(self.masses.sum()) + self.overflow

    @property
    def normalized(self):
        return abs(self.total - 1.0) <= MASS_TOL

    @cached_property
    def cdf(self):
        c = np.cumsum(self.masses)
        c.setflags(write=False)
        return c

    def with_masses(self, masses, overflow=None):
        return GridMeasure(self.step, masses, self.overflow if overflow is None else overflow)

    def scaled(self, c):
        return GridMeasure(self.step, self.masses * c, self.overflow * c)

    def normalize(self):
        t = self.total
        if t <= 0:
            raise MeasureError("cannot normalize a zero measure")
        return self.scaled(1.0 / t)

    def check_overflow(self, limit=OVERFLOW_LIMIT, where=""):
        if self.overflow > limit:
            raise TailTruncationError(self.overflow, limit, where)
        return self

    def __repr__(self):
        return (f"GridMeasure(step={self.step}, n_sites={self.n_sites}, "
                f"total={self.total:.12g}, overflow={self.overflow:.3g})")


def dirac(x, step, x_max):
    """Unit atom at the lattice site nearest to ``x``."""
    return discretize(InitialMeasureSpec.dirac(x), step, x_max)


def from_atoms(atoms, step, x_max):
    """Build a measure from ``{x: mass}`` snapping each atom to its nearest site."""
    check_step(step)
    n = int(round(x_max / step)) + 1
    w = np.zeros(n)
    over = 0.0
    for x, m in dict(atoms).items():
        j = int(round(x / step))
        if j < n:
            w[j] += m
        else:
            over += m
    return GridMeasure(step, w, over)


# --------------------------------------------------------------------------
# Offspring law and initial data
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OffspringDistribution:
    """Law ``q`` on ``{1..K}``; ``weights[k-1] = q_k``."""

    weights: np.ndarray
    renormalized_by: float = 0.0

    def __post_init__(self):
        q = np.array(self.weights, dtype=float)
        if q.ndim != 1 or q.size == 0 or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise MeasureError("offspring weights must be a nonempty nonnegative vector")
        if abs(q.sum() - 1.0) > 1e-12:
            raise MeasureError(f"offspring weights sum to {q.sum()!r}, not 1")
        q.setflags(write=False)
        object.__setattr__(self, "weights", q)

    @classmethod
    def from_weights(cls, weights, renormalize=True):
        """Accept raw weights; with ``renormalize`` the sum is forced to 1.

        ``renormalized_by`` records ``|sum - 1|`` before rescaling.
        """
        q = np.asarray(weights, dtype=float)
        s = q.sum()
        if s <= 0:
            raise MeasureError("offspring weights must have positive sum")
        if renormalize:
            return cls(q / s, renormalized_by=abs(s - 1.0))
        return cls(q)

    @classmethod
    def classical(cls):
        return cls(np.array([1.0]))

    @property
    def K(self):
        return self.weights.size

    @cached_property
    def m1(self):
        k = np.arange(1, self.K + 1)
        return float(np.sum(k * self.weights))

    @cached_property
    def m2(self):
        k = np.arange(1, self.K + 1)
        return float(np.sum(k * k * self.weights))

    def g(self, z):
        """Generating function ``sum_k q_k z^(k+1)``."""
        z = np.asarray(z, dtype=float)
        k = np.arange(1, self.K + 1)
        return np.sum(self.weights * np.power.outer(z, k + 1), axis=-1)

    def __repr__(self):
        return f"OffspringDistribution({self.weights.tolist()})"


@dataclass(frozen=True)
class InitialMeasureSpec:
    """``p * delta_0 + (1 - p) * theta`` for a few families of ``theta``.

    kind is one of ``"dirac"`` (atom at ``x0``), ``"exponential"`` (rate
    ``lam``) or ``"lattice"`` (``weights[i]`` at ``i + 1``).
    """

    kind: str
    p: float = 0.0
    x0: float | None = None
    lam: float | None = None
    weights: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise MeasureError(f"p must lie in [0, 1], got {self.p}")
        if self.kind == "dirac":
            if self.x0 is None or self.x0 < 0:
                raise MeasureError("dirac needs x0 >= 0")
        elif self.kind == "exponential":
            if self.lam is None or not self.lam > 0:
                raise MeasureError("exponential needs lam > 0")
        elif self.kind == "lattice":
            w = np.asarray(self.weights, dtype=float)
            if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise MeasureError("lattice weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        else:
            raise MeasureError(f"unknown initial kind {self.kind!r}")

    @classmethod
    def dirac(cls, x0):
        return cls("dirac", 0.0, x0=float(x0))

    @classmethod
    def two_atom(cls, p, x0):
        return cls("dirac", float(p), x0=float(x0))

    @classmethod
    def exponential(cls, p, lam):
        return cls("exponential", float(p), lam=float(lam))

    @classmethod
    def lattice(cls, weights, p=0.0):
        return cls("lattice", float(p), weights=tuple(weights))

    def with_p(self, p):
        return InitialMeasureSpec(self.kind, float(p), self.x0, self.lam, self.weights)

    def to_dict(self):
        d = {"kind": self.kind, "p": self.p}
        if self.x0 is not None:
            d["x0"] = self.x0
        if self.lam is not None:
            d["lam"] = self.lam
        if self.weights is not None:
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        w = d.get("weights")
        return cls(d["kind"], float(d.get("p", 0.0)), d.get("x0"), d.get("lam"),
                   tuple(w) if w is not None else None)


def discretize(spec, step, x_max, overflow_limit=OVERFLOW_LIMIT):
    """Place ``spec`` on the lattice ``{0, step, .., x_max}``.

    Atoms go to the nearest site.  The exponential density is integrated
    exactly over the cells ``[x_j - step/2, x_j + step/2)`` (clipped at 0);
    whatever lies beyond the last cell is overflow.
    """
    check_step(step)
    n = int(round(x_max / step)) + 1
    if n < 1:
        raise MeasureError("x_max must be >= 0")
    w = np.zeros(n)
    over = 0.0
    p = spec.p
    w[0] += p
    if spec.kind == "dirac":
        j = int(round(spec.x0 / step))
        if j < n:
            w[j] += 1.0 - p
        else:
            over += 1.0 - p
    elif spec.kind == "lattice":
        for i, m in enumerate(spec.weights, start=1):
            j = int(round(i / step))
            if j < n:
                w[j] += (1.0 - p) * m
            else:
                over += (1.0 - p) * m
    elif spec.kind == "exponential":
        lam = spec.lam
        if x_max < 10.0 / lam:
            raise MeasureError(f"x_max={x_max} too short for rate {lam}; need >= {10.0 / lam}")
        edges = (np.arange(n + 1) - 0.5) * step
        edges[0] = 0.0
        surv = np.exp(-lam * edges)
        cell = surv[:-1] - surv[1:]
        w += (1.0 - p) * cell
        over += (1.0 - p) * surv[-1]
    mu = GridMeasure(step, w, over)
    return mu.check_overflow(overflow_limit, "discretize")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def _same_step(mu, nu):
    if abs(mu.step - nu.step) > 1e-15 * max(mu.step, nu.step):
        raise MeasureError(f"step mismatch: {mu.step} vs {nu.step}")
    if mu.n_sites != nu.n_sites:
        raise MeasureError(f"grid size mismatch: {mu.n_sites} vs {nu.n_sites}")


def _clamp(v):
    neg = v < 0
    if np.any(neg):
        worst = v[neg].min()
        if worst < -NEG_CLAMP:
            raise MeasureError(f"convolution produced negative mass {worst:.3e}")
        v[neg] = 0.0
    return v


def conv_truncated(a, b, n=None):
    """First ``n`` entries of the linear convolution of ``a`` and ``b``.

    Sparse inputs (e.g. a few atoms) are convolved pairwise, which is exact;
    dense ones go through an FFT whose negative round-off is clamped to zero.
    """
    n = a.size if n is None else n
    ia = np.flatnonzero(a[:n])
    ib = np.flatnonzero(b[:n])
    if ia.size == 0 or ib.size == 0:
        return np.zeros(n)
    if ia.size * ib.size <= 8 * n:
        idx = (ia[:, None] + ib[None, :]).ravel()
        val = (a[ia][:, None] * b[ib][None, :]).ravel()
        keep = idx < n
        return np.bincount(idx[keep], val[keep], minlength=n)
    # trailing zeros do not contribute
    a = a[: ia[-1] + 1]
    b = b[: ib[-1] + 1]
    if min(a.size, b.size) <= _DIRECT_CONV_MAX:
        out = np.convolve(a, b)[:n]
    else:
        L = sp_fft.next_fast_len(a.size + b.size - 1, real=True)
        out = sp_fft.irfft(sp_fft.rfft(a, L) * sp_fft.rfft(b, L), L)[:n]
        # entries under the round-off bound are indistinguishable from zero; left in,
        # they grow like real mass under dynamics that amplify far tails
        floor = 16 * np.finfo(float).eps * np.log2(L) * np.linalg.norm(a) * np.linalg.norm(b)
        out[np.abs(out) <= floor] = 0.0
    if out.size < n:
        out = np.pad(out, (0, n - out.size))
    return _clamp(out.copy())


def _tail_overflow(a, a_over, b, b_over):
    """Mass of ``X + Y`` past the last site, from tail sums rather than a difference of totals.

    Pairs of sites ``i + j >= n`` contribute ``sum_i a_i B_{n-i}`` where ``B_m``
    is the mass of ``b`` on sites ``>= m``; overflow on either side always overflows.
    """
    n = a.size
    tail = np.append(np.cumsum(b[::-1])[::-1], 0.0)
    grid = float(np.dot(a, tail[n - np.arange(n)])) if n > 1 else 0.0
    a_in, b_in = float(a.sum()), float(b.sum())
    return grid + a_over * (b_in + b_over) + a_in * b_over


def convolve(mu, nu):
    """Law of ``X + Y``; everything past the last site, or touching overflow,
    goes into overflow."""
    _same_step(mu, nu)
    kept = conv_truncated(mu.masses, nu.masses)
    return GridMeasure(mu.step, kept, _tail_overflow(mu.masses, mu.overflow, nu.masses, nu.overflow))


def convolve_direct(mu, nu):
    """O(J^2) double sum, used as an oracle for :func:`convolve`."""
    _same_step(mu, nu)
    n = mu.n_sites
    out = np.zeros(n)
    a, b = mu.masses, nu.masses
    for i in range(n):
        if a[i] == 0.0:
            continue
        out[i:] += a[i] * b[: n - i]
    return GridMeasure(mu.step, out, _tail_overflow(a, mu.overflow, b, nu.overflow))


def q_mixture(mu, q, overflow_limit=OVERFLOW_LIMIT, sub_probability=False):
    """``sum_k q_k mu^{*k}`` via a running convolution power.

    With ``sub_probability`` the input may have total mass below 1.
    """
    if sub_probability:
        if mu.total > 1.0 + MASS_TOL:
            raise MeasureError(f"total mass {mu.total!r} exceeds 1")
    elif not mu.normalized:
        raise MeasureError("q_mixture needs a normalized measure")
    w = mu.masses
    acc = q.weights[0] * w
    acc_over = q.weights[0] * mu.overflow
    power, power_over = w, mu.overflow
    for k in range(2, q.K + 1):
        power, power_over = conv_truncated(power, w), _tail_overflow(power, power_over, w, mu.overflow)
        qk = q.weights[k - 1]
        if qk:
            acc = acc + qk * power
            acc_over += qk * power_over
    out = GridMeasure(mu.step, acc, acc_over)
    return out.check_overflow(overflow_limit, "q_mixture")


def pushforward_shift(mu, a):
    """Law of ``(X - a)_+``; ``a`` must be a whole number of sites."""
    s = lattice_shift(a, mu.step)
    return shift_sites(mu, s)


def shift_masses(w, s):
    if s == 0:
        return w
    out = np.zeros_like(w)
    out[0] = w[: s + 1].sum()
    if s + 1 < w.size:
        out[1 : w.size - s] = w[s + 1 :]
    return out


def shift_sites(mu, s):
    if s == 0:
        return mu
    return GridMeasure(mu.step, shift_masses(mu.masses, s), mu.overflow)


def moment(mu, k, with_flag=False):
    """``sum_j x_j^k w_j``; overflow adds ``x_max^k * overflow``.

    With ``with_flag`` returns ``(value, is_lower_bound)``; the flag is set
    whenever overflow is present.
    """
    if k not in (0, 1, 2):
        raise MeasureError(f"moment order must be 0, 1 or 2, got {k}")
    x = mu.sites
    val = float(np.dot(x**k, mu.masses)) + mu.x_max**k * mu.overflow
    if with_flag:
        return val, mu.overflow > 0
    return val


def quantile(mu, u):
    """Right-continuous inverse ``inf{x_j : G(x_j) > u}``; vectorized in ``u``.

    Levels falling into the overflow bucket return ``x_max``.
    """
    if not mu.normalized:
        raise MeasureError("quantile needs a normalized measure")
    ua = np.asarray(u, dtype=float)
    if np.any((ua <= 0) | (ua >= 1)):
        raise MeasureError("quantile levels must lie in (0, 1)")
    return quantile_from_cdf(mu.cdf, mu.step, ua)


def quantile_from_cdf(cdf, step, u):
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, cdf.size - 1)
    out = idx * step
    return float(out) if np.ndim(out) == 0 else out


def tv_distance(mu, nu):
    """Total variation norm ``sum_j |w_j - v_j| + |overflow difference|``."""
    _same_step(mu, nu)
    return float(np.abs(mu.masses - nu.masses).sum() + abs(mu.overflow - nu.overflow))


def mass_at_zero(mu):
    return float(mu.masses[0])


def coarsen(mu, factor):
    """Aggregate blocks of ``factor`` sites onto the nearest coarse site.

    Each unit of mass moves by at most ``factor * step / 2``.
    """
    factor = int(factor)
    if factor < 1:
        raise MeasureError("coarsening factor must be >= 1")
    if factor == 1:
        return mu
    w = mu.masses
    n_coarse = (w.size - 1) // factor + 1
    idx = (np.arange(w.size) + factor // 2) // factor
    over = mu.overflow
    keep = idx < n_coarse
    out = np.bincount(idx[keep], weights=w[keep], minlength=n_coarse)
    over += float(w[~keep].sum())
    return GridMeasure(mu.step * factor, out, over)


def regrid(mu, step, n_sites):
    """Embed ``mu`` into a finer lattice whose step divides ``mu.step``."""
    r = mu.step / step
    m = round(r)
    if abs(r - m) > 1e-9 * r:
        raise MeasureError(f"step {step} does not divide {mu.step}")
    out = np.zeros(n_sites)
    j = np.arange(mu.n_sites) * m
    keep = j < n_sites
    out[j[keep]] = mu.masses[keep]
    return GridMeasure(step, out, mu.overflow + float(mu.masses[~keep].sum()))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<dqd")


def to_csv(mu, path_or_buf):
    lines = ["x,mass"]
    lines += [f"{x:.17g},{m:.17g}" for x, m in zip(mu.sites, mu.masses)]
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def from_csv(path_or_buf, overflow=0.0):
    data = np.loadtxt(path_or_buf, delimiter=",", skiprows=1, ndmin=2)
    x, m = data[:, 0], data[:, 1]
    step = x[1] - x[0] if x.size > 1 else 1.0
    return GridMeasure(float(1.0 / round(1.0 / step)), m, overflow)


def to_bytes(mu):
    """Header ``(h: f64, J: i64, overflow: f64)`` then ``J + 1`` float64 masses."""
    return _HEADER.pack(mu.step, mu.n_sites - 1, mu.overflow) + mu.masses.astype("<f8").tobytes()


def from_bytes(buf, offset=0):
    """Inverse of :func:`to_bytes`; returns ``(measure, next_offset)``."""
    step, J, over = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    n = J + 1
    w = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).copy()
    return GridMeasure(step, w, over), offset + 8 * n


def dump(mu, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(mu))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())[0]
