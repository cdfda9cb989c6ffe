import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drflow import cdr_flow as C
from drflow import measure as M
from drflow import wasserstein as W

H = 2.0**-6


def model(a=1.0, x0=2.0, h=H, T=1.0, x_max=64.0, q=None):
    q = M.OffspringDistribution.classical() if q is None else q
    return C.CdrModel(a, q, M.InitialMeasureSpec.dirac(x0), h=h, x_max=x_max, T=T)


@pytest.fixture(scope="module")
def flow():
    m = model()
    return m, C.march_solve(m)


def test_model_validation():
    with pytest.raises(M.MeasureError):
        model(T=0.3, h=0.25)
    with pytest.raises(M.MeasureError):
        model(a=8.0, h=0.25)


def test_pure_drift_when_a_zero():
    m = model(a=0.0, x0=1.5, T=1.0)
    fl = C.march_solve(m)
    for t in (0.25, 1.0):
        expect = M.pushforward_shift(m.initial_measure(), t)
        np.testing.assert_array_equal(fl.at(t).masses, expect.masses)
    z = C.march_solve(model(a=0.0, x0=0.0))
    assert all(s.masses[0] == 1.0 for s in z.slices)


def test_slice_count_and_mass(flow):
    m, fl = flow
    assert len(fl.slices) == m.n_steps + 1
    assert all(abs(s.total - 1.0) <= 1e-8 for s in fl.slices)


def test_keep_every_thins_slices():
    m = model(T=0.5)
    fl = C.march_solve(m, keep_every=8)
    assert fl.indices == list(range(0, m.n_steps + 1, 8))
    full = C.march_solve(m)
    np.testing.assert_array_equal(fl.at(0.5).masses, full.at(0.5).masses)


def test_weak_continuity(flow):
    m, fl = flow
    for i in range(0, m.n_steps, 8):
        w = W.exact_w(fl.slice(i), fl.slice(i + 1), max_support=None).value
        assert w <= (1.0 + m.a) * m.dt + 1e-12


def test_self_convergence_in_dt():
    t = 1.0
    ref = C.march_solve(model(h=2.0**-9)).at(t)
    errs = []
    for h in (2.0**-6, 2.0**-7):
        mu = C.march_solve(model(h=h)).at(t)
        errs.append(W.exact_w(M.regrid(mu, ref.step, ref.n_sites), ref, max_support=None).value)
    assert errs[1] < errs[0]
    assert 0.35 < errs[1] / errs[0] < 0.65


def test_tail_bound_against_mpmath():
    mpmath.mp.dps = 40
    for a, m1, t, n in [(1, 1, 0.5, 5), (0.7, 2.5, 1.3, 3), (2, 1, 1, 12), (1, 1, 0.5, 0)]:
        lam = mpmath.mpf(a) * (m1 + 1) * t
        ref = 2 * mpmath.nsum(lambda k: lam**k / mpmath.factorial(k), [n, mpmath.inf])
        assert C.picard_tail_bound(a, m1, t, n) == pytest.approx(float(ref), rel=1e-13)
    assert C.picard_tail_bound(1, 1, 0.5, 5) == pytest.approx(2 * (math.e - sum(1 / math.factorial(k) for k in range(5))))
    assert C.picard_tail_bound(0.0, 1, 1, 3) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 3), st.floats(0, 4), st.floats(0, 2), st.integers(0, 30))
def test_tail_bound_monotone(a, m1, t, n):
    b0 = C.picard_tail_bound(a, m1, t, n)
    b1 = C.picard_tail_bound(a, m1, t, n + 1)
    assert 0 <= b1 <= b0 * (1 + 1e-12)


def test_picard_first_iterate_no_source():
    m = model(a=0.0, x0=1.0)
    out = C.picard_solve(m, 0.5, 1)
    np.testing.assert_array_equal(out.masses, M.pushforward_shift(m.initial_measure(), 0.5).masses)


def test_picard_successive_iterates_within_tail_bound():
    m = model(T=0.5)
    its = C.picard_iterates(m, 0.5, 8)
    for n in range(1, 8):
        assert its[n].total <= 1.0 + 1e-8
        assert M.tv_distance(its[n], its[n + 1]) <= C.picard_tail_bound(1, 1, 0.5, n) + m.dt


def test_picard_vs_march(flow):
    m, fl = flow
    p = C.picard_solve(m.replace(T=0.5), 0.5, 12)
    w = W.exact_w(p, fl.at(0.5), max_support=None).value
    assert w <= 5 * (m.dt + C.picard_tail_bound(1, 1, 0.5, 12))


def test_generator_examples(flow):
    m, fl = flow
    one = lambda x: np.ones_like(np.asarray(x, float))
    ident = lambda x: np.asarray(x, float)
    t = 0.5
    assert C.apply_generator(one, fl, t, 1.0) == 0.0
    m1 = M.moment(fl.at(t), 1)
    assert C.apply_generator(ident, fl, t, 0.0) == pytest.approx(m1, rel=1e-12)
    assert C.apply_generator(ident, fl, t, 1.0) == pytest.approx(m1 - 1.0, rel=1e-12)
    # array input agrees with callable away from the edge
    arr = np.sin(fl.at(t).sites)
    assert C.apply_generator(arr, fl, t, 0.5) == pytest.approx(
        C.apply_generator(np.sin, fl, t, 0.5), abs=1e-9)
    with pytest.raises(M.MeasureError):
        C.apply_generator(one, fl, 0.5 + H / 3, 1.0)


def test_form_residuals_a_zero():
    m = model(a=0.0, T=0.5)
    r = C.form_residuals(C.march_solve(m), m)
    assert r["form3"] <= 1e-9 and r["form4"] <= 1e-9 and r["mass"] <= 1e-9


def test_form_residuals_are_first_order():
    r = []
    for h in (2.0**-6, 2.0**-7):
        m = model(h=h, T=0.5)
        r.append(C.form_residuals(C.march_solve(m), m))
    for k in ("form2", "form3", "form4"):
        assert 0.4 <= r[1][k] / r[0][k] <= 0.6, k
    assert r[1]["mass"] <= 1e-6


def test_gronwall_on_random_pairs():
    rng = np.random.default_rng(0)
    q = M.OffspringDistribution.classical()
    for _ in range(4):
        specs = [M.InitialMeasureSpec.lattice(rng.dirichlet(np.ones(3)), p=rng.uniform(0.2, 0.6))
                 for _ in range(2)]
        m = C.CdrModel(1.0, q, specs[0], h=H, x_max=96.0, T=0.5)
        f1 = C.march_solve(m)
        f2 = C.march_solve(m.replace(initial=specs[1]))
        w0 = W.exact_w(f1.slices[0], f2.slices[0]).value
        wt = W.exact_w(f1.at(0.5), f2.at(0.5), max_support=None).value
        assert wt <= math.exp(q.m1 * 0.5) * w0 + 5 * H


def test_checkpoint_roundtrip(tmp_path, flow):
    m, fl = flow
    p = tmp_path / "flow.bin"
    C.save_flow(fl, p)
    back = C.load_flow(p)
    assert back.indices == fl.indices and back.dt == fl.dt and back.a == fl.a
    for s, b in zip(fl.slices, back.slices):
        np.testing.assert_array_equal(s.masses, b.masses)
    csvp = tmp_path / "flow.csv"
    C.write_flow_csv(fl, csvp)
    lines = csvp.read_text().splitlines()
    assert lines[0] == "t,moment1,moment2,mass_at_zero" and len(lines) == len(fl.slices) + 1


def test_qmix_quantile(flow):
    m, fl = flow
    i = 10
    u = np.linspace(0.01, 0.99, 50)
    x = fl.qmix_quantile(i, u)
    cdf = fl.qmix_cdf(i)
    j = np.rint(x / fl.h).astype(int)
    assert np.all(cdf[j] > u)
    assert np.all((j == 0) | (cdf[np.maximum(j - 1, 0)] <= u))
