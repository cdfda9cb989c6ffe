import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drflow import dr_discrete as D
from drflow import measure as M


def classical(x0, x_max=64.0):
    return D.DiscreteModel.classical(M.InitialMeasureSpec.dirac(x0), x_max=x_max)


def test_fixed_point_and_doubling():
    m1 = classical(1.0)
    mu = m1.initial_measure()
    assert np.array_equal(D.dr_step(mu, m1).masses, mu.masses)
    m2 = classical(2.0)
    out = D.dr_step(m2.initial_measure(), m2)
    assert out.masses[3] == 1.0


def test_alpha_zero_is_pure_shift():
    model = D.DiscreteModel(0.0, M.OffspringDistribution([0.3, 0.7]),
                            M.InitialMeasureSpec.lattice([0.2, 0.3, 0.5], p=0.1), x_max=8.0)
    mu = model.initial_measure()
    np.testing.assert_array_equal(D.dr_step(mu, model).masses, M.pushforward_shift(mu, 1.0).masses)


def test_dirac_trajectory_closed_form():
    traj = D.evolve(classical(2.0, x_max=2.0**10 + 8), 10)
    for n, mu in enumerate(traj):
        assert mu.masses[2**n + 1] == 1.0
    proxy = D.free_energy_proxy(traj, classical(2.0))
    np.testing.assert_array_equal(proxy, 1.0 + 2.0 ** -np.arange(11))
    p1 = D.free_energy_proxy(D.evolve(classical(1.0), 10), classical(1.0))
    np.testing.assert_array_equal(p1, 2.0 ** -np.arange(11))


def enumerate_step(atoms, alpha, q):
    """Law of (B (X + sum_{i<=K} X_i) + (1-B) X - 1)_+ by brute-force enumeration."""
    out = {}
    xs = list(atoms.items())
    for (x, px) in xs:
        out[max(x - 1, 0)] = out.get(max(x - 1, 0), 0.0) + (1 - alpha) * px
        for k, qk in enumerate(q, start=1):
            for combo in itertools.product(xs, repeat=k):
                s = x + sum(c[0] for c in combo)
                p = alpha * px * qk * np.prod([c[1] for c in combo])
                out[max(s - 1, 0)] = out.get(max(s - 1, 0), 0.0) + p
    return out


def test_half_alpha_two_atom_matches_enumeration():
    q = [1.0]
    spec = M.InitialMeasureSpec.two_atom(0.5, 2.0)
    model = D.DiscreteModel(0.5, M.OffspringDistribution(q), spec, x_max=8.0)
    out = D.dr_step(model.initial_measure(), model)
    ref = enumerate_step({0: 0.5, 2: 0.5}, 0.5, q)
    expect = np.zeros(out.n_sites)
    for x, p in ref.items():
        expect[x] += p
    np.testing.assert_allclose(out.masses, expect, atol=1e-15)
    np.testing.assert_allclose(out.masses[:4], [3 / 8, 1 / 2, 0, 1 / 8])


def test_general_offspring_matches_enumeration():
    q = [0.2, 0.5, 0.3]
    atoms = {0: 0.3, 1: 0.5, 3: 0.2}
    spec = M.InitialMeasureSpec.lattice([0.5 / 0.7, 0.0, 0.2 / 0.7], p=0.3)
    model = D.DiscreteModel(0.7, M.OffspringDistribution(q), spec, x_max=16.0)
    out = D.dr_step(model.initial_measure(), model)
    ref = enumerate_step(atoms, 0.7, q)
    expect = np.zeros(out.n_sites)
    for x, p in ref.items():
        expect[x] += p
    np.testing.assert_allclose(out.masses, expect, atol=1e-14)


def test_sustainability():
    assert D.sustainability(M.dirac(0.0, 1.0, 4.0)) == 0.0
    assert D.sustainability(M.dirac(2.0, 1.0, 4.0)) == 1.0
    assert D.sustainability(M.from_atoms({0: 0.5, 2: 0.5}, 1.0, 4.0)) == 0.5


def test_overflow_abort_reports_step():
    with pytest.raises(M.TailTruncationError, match="step 4"):
        D.evolve(classical(2.0, x_max=12.0), 6)


def random_model(rng, x_max=512.0):
    K = int(rng.integers(1, 4))
    q = M.OffspringDistribution.from_weights(rng.random(K) + 0.01)
    w = rng.random(int(rng.integers(1, 5))) + 0.01
    spec = M.InitialMeasureSpec.lattice(w / w.sum(), p=float(rng.uniform(0.3, 0.9)))
    return D.DiscreteModel(float(rng.uniform(0, 1)), q, spec, x_max=x_max)


def test_moment_bounds_and_mass_on_random_models():
    rng = np.random.default_rng(0)
    ran = 0
    for _ in range(20):
        model = random_model(rng)
        try:
            traj = D.evolve(model, 6)
        except M.TailTruncationError:
            continue
        ran += 1
        for a, b in zip(traj, traj[1:]):
            assert abs(b.total - 1.0) <= 1e-10
            assert M.moment(b, 1) <= model.growth1 * M.moment(a, 1) + 1e-9
            assert M.moment(b, 2) <= model.growth2 * M.moment(a, 2) + 1e-8
        proxy = D.free_energy_proxy(traj, model)
        assert np.all(np.diff(proxy) <= 1e-9)
    assert ran >= 15


def test_phase_scan_classical():
    theta = M.InitialMeasureSpec.dirac(2.0)
    model = D.DiscreteModel.classical(theta, x_max=256.0)
    grid = np.linspace(0, 1, 11)
    res = D.phase_scan(theta, grid, 6, model, bisect_steps=12)
    proxies = [r["proxy"] for r in res.table]
    assert proxies[-1] == 0.0
    assert proxies[0] == pytest.approx(1 + 2.0**-6)
    assert np.all(np.diff(proxies) <= 1e-12)
    lo, hi = res.bracket
    assert lo <= res.p_c <= hi and hi - lo < 0.1 / 2**11
    # parallel run gives the identical table
    par = D.phase_scan(theta, grid, 6, model, bisect_steps=12, workers=2)
    assert par.table == res.table and par.p_c == res.p_c


def test_trajectory_csv(tmp_path):
    model = classical(2.0)
    traj = D.evolve(model, 3)
    p = tmp_path / "t.csv"
    D.write_trajectory_csv(traj, model, p)
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(D.TRAJECTORY_COLUMNS)
    assert lines[2].split(",")[3] == "1.5"


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0.01, 1), min_size=1, max_size=3),
       st.lists(st.floats(0, 1), min_size=1, max_size=4), st.floats(0, 1))
def test_step_properties(alpha, qw, theta, p):
    q = M.OffspringDistribution.from_weights(qw)
    th = np.array(theta) + 1e-3
    model = D.DiscreteModel(alpha, q, M.InitialMeasureSpec.lattice(th / th.sum(), p=p), x_max=40.0)
    mu = model.initial_measure()
    out = D.dr_step(mu, model)
    assert abs(out.total - 1.0) <= 1e-10
    assert M.moment(out, 1) <= model.growth1 * M.moment(mu, 1) + 1e-9
    assert M.moment(out, 2) <= model.growth2 * M.moment(mu, 2) + 1e-8
