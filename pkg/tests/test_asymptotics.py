import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnslab.asymptotics import (compute_Xinfty, fit_decay, gronwall_audit, hminus1_distance,
                                indicator_limit_check, profile_change_of_variables,
                                profile_pushforward, profile_w1, w1_bound, w1_empirical,
                                w1_monokinetic)
from vnslab.errors import MassMismatchError, ValidationError
from vnslab.flowmap import FlowSnapshotSeries
from vnslab.geometry import Domain, FunctionField, MACGrid, ZeroField
from vnslab.kinetic import InitialDataSpec, ParticleEnsemble, SpatialLaw, VelocityLaw, sample_initial

from conftest import swirl_field
from oracles import w1_assignment, w1_dual_lp, w1_permutations


def test_w1_monokinetic_two_particles(unit2):
    ens = ParticleEnsemble.from_weights([[0.3, 0.3], [0.6, 0.6]], [[1.0, 0.0], [0.0, 2.0]], [0.5, 0.5], unit2)
    assert w1_monokinetic(ens) == 1.5
    z = np.hstack([ens.x, ens.v])
    z0 = np.hstack([ens.x, np.zeros_like(ens.v)])
    assert w1_permutations(z, z0) == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
def test_w1_monokinetic_exact_against_permutations(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9, (n, 2))
    v = rng.normal(size=(n, 2))
    ens = ParticleEnsemble.from_weights(x, v, np.full(n, 1.0 / n), Domain.unit(2))
    ref = w1_permutations(np.hstack([x, v]), np.hstack([x, np.zeros_like(v)]))
    # equal dyadic-free weights: allow roundoff of 1/n in units
    assert w1_monokinetic(ens) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    E = 0.5 * float(np.sum(ens.weights * np.sum(v * v, axis=1)))
    assert w1_monokinetic(ens) <= w1_bound(E, ens.mass_alive) * (1 + 1e-12)


def test_w1_monokinetic_at_rest(unit2):
    ens = ParticleEnsemble.from_weights([[0.3, 0.3], [0.6, 0.6]], np.zeros((2, 2)), [0.5, 0.5], unit2)
    assert w1_monokinetic(ens) == 0.0


def test_w1_empirical_examples():
    pts = np.random.default_rng(0).uniform(size=(7, 2))
    w = np.full(7, 1 / 7)
    assert w1_empirical(pts, w, pts, w).cost == pytest.approx(0.0, abs=1e-12)
    r = w1_empirical([[0.0, 0.0], [1.0, 0.0]], [0.5, 0.5], [[0.5, 0.0]], [1.0])
    assert r.cost == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(MassMismatchError):
        w1_empirical([[0.0, 0.0]], [1.0], [[1.0, 0.0]], [0.5])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_w1_empirical_dual_oracle(seed, n, m):
    rng = np.random.default_rng(seed)
    xa, xb = rng.uniform(size=(n, 2)), rng.uniform(size=(m, 2))
    wa, wb = rng.uniform(0.1, 1, n), rng.uniform(0.1, 1, m)
    wa, wb = wa / wa.sum(), wb / wb.sum()
    assert w1_empirical(xa, wa, xb, wb).cost == pytest.approx(w1_dual_lp(xa, wa, xb, wb), abs=1e-8)


def test_w1_empirical_assignment_oracle():
    rng = np.random.default_rng(11)
    for _ in range(5):
        xa, xb = rng.uniform(size=(15, 3)), rng.uniform(size=(15, 3))
        w = np.full(15, 1 / 15)
        assert w1_empirical(xa, w, xb, w).cost == pytest.approx(w1_assignment(xa, xb), abs=1e-10)


def test_hminus1_sin_mode_second_order():
    ref = 1.0 / (2 * math.pi * math.sqrt(2))
    errs = []
    for n in (32, 64):
        grid = MACGrid.uniform(Domain.unit(2), n)
        c = grid.cell_centers()
        rho = np.sin(np.pi * c[..., 0]) * np.sin(np.pi * c[..., 1])
        assert hminus1_distance(grid, rho, rho) == 0.0
        errs.append(abs(hminus1_distance(grid, rho) - ref))
    assert errs[0] < 1e-3
    assert errs[1] < errs[0] / 3.5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hminus1_triangle(seed):
    grid = MACGrid(Domain.unit(2), (10, 9))
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(size=grid.shape) for _ in range(3))
    assert hminus1_distance(grid, a, c) <= hminus1_distance(grid, a, b) + hminus1_distance(grid, b, c) + 1e-8


def test_fit_decay_exact():
    t = np.linspace(0, 5, 50)
    f = fit_decay(t, 3 * np.exp(-0.7 * t), window=(0, 5))
    assert f.rate == pytest.approx(0.7, abs=1e-8) and f.prefactor == pytest.approx(3, abs=1e-8)
    assert abs(fit_decay(t, np.full(50, 2.5)).rate) < 1e-10
    with pytest.raises(ValidationError):
        fit_decay(t[:5], np.ones(5))
    with pytest.raises(ValidationError):
        fit_decay(t, np.zeros(50))


def test_gronwall_audit_exponential():
    t = np.linspace(0, 5, 501)
    y = 2 * np.exp(-1.3 * t)
    assert gronwall_audit(t, y, fit_decay(t, y).rate) <= 1.05


def test_xinfty_free(unit2):
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 5.0, 0.1)
    r = compute_Xinfty(s, [[0.5, 0.5], [0.5, 0.5]], [[0.1, 0.0], [3.0, 0.0]])
    assert np.allclose(r.x_inf[0], [0.6, 0.5], atol=1e-12)
    assert r.survived.tolist() == [True, False]


def _decaying_swirl(dom, amp, rate):
    base = swirl_field(dom, amp)
    return lambda t: FunctionField(dom, lambda x, k=math.exp(-rate * t): k * base.func(x))


def test_xinfty_cauchy_tail(unit2):
    fn = _decaying_swirl(unit2, 0.2, 3.0)
    rng = np.random.default_rng(2)
    x = rng.uniform(0.35, 0.65, (40, 2))
    v = rng.uniform(-0.05, 0.05, (40, 2))
    r1 = compute_Xinfty(FlowSnapshotSeries.uniform(unit2, fn, 0.0, 4.0, 0.05), x, v)
    r2 = compute_Xinfty(FlowSnapshotSeries.uniform(unit2, fn, 0.0, 8.0, 0.05), x, v)
    assert np.all(r1.survived) and r1.tail > 0
    assert np.abs(r1.x_inf - r2.x_inf).max() <= r1.tail


def test_profile_free_translation(unit2):
    spec = InitialDataSpec(SpatialLaw("ball", (0.5, 0.5), 0.2), VelocityLaw(1e-9), 4000, 0)
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 1.0, 0.1)
    grid = MACGrid.uniform(unit2, 16)
    p = profile_pushforward(spec, s, grid)
    assert p.mass == pytest.approx(1.0, abs=1e-12)
    ens = sample_initial(spec, unit2)
    direct = grid.deposit(None, ens.x_init, ens.weights) / grid.cell_volume
    assert np.abs(p.rho - direct).max() < 1e-3 * direct.max()


def test_profile_escape_is_empty(unit2):
    spec = InitialDataSpec(SpatialLaw("ball", (0.5, 0.5), 0.1), VelocityLaw(8.0, 4.0), 500, 0)
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 2.0, 0.1)
    assert profile_pushforward(spec, s, MACGrid.uniform(unit2, 8)).mass == 0.0


def test_change_of_variables_translation_quadrature(unit2):
    spec = InitialDataSpec(SpatialLaw("ball", (0.5, 0.5), 0.2), VelocityLaw(0.1), 1, 0)
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 1.0, 0.1)
    grid = MACGrid.uniform(unit2, 12)
    cov = profile_change_of_variables(spec, s, grid, n_v=16, sub=2)
    # direct quadrature of int f0(x - v, v) dv on the same sub-points, fine velocity rule
    vax = -0.1 + (np.arange(64) + 0.5) * (0.2 / 64)
    V = np.stack(np.meshgrid(vax, vax, indexing="ij"), -1).reshape(-1, 2)
    offs = np.array([[-0.25, -0.25], [-0.25, 0.25], [0.25, -0.25], [0.25, 0.25]]) / 12
    c = grid.cell_centers().reshape(-1, 2)
    ref = np.zeros(len(c))
    for o in offs:
        for vv in V:
            ref += spec.density(c + o - vv, np.broadcast_to(vv, c.shape)) * (0.2 / 64) ** 2 / 4
    assert cov.mass == pytest.approx(1.0, abs=1e-2)
    assert profile_w1(cov.rho, ref.reshape(grid.shape), grid) < 0.01


def test_change_of_variables_needs_density(unit2):
    spec = InitialDataSpec(SpatialLaw("ball", (0.5, 0.5), 0.2), VelocityLaw(0.0), 10, 0)
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        profile_change_of_variables(spec, s, MACGrid.uniform(unit2, 8))
    # monokinetic data: the limit profile is the initial density itself
    grid = MACGrid.uniform(unit2, 8)
    p = profile_pushforward(spec, s, grid)
    ens = sample_initial(spec, unit2)
    assert np.array_equal(p.rho, grid.deposit(None, ens.x_init, ens.weights) / grid.cell_volume)


def test_profiles_agree_under_decaying_flow(unit2):
    spec = InitialDataSpec(SpatialLaw("ball", (0.5, 0.5), 0.15), VelocityLaw(0.15), 20000, 1)
    s = FlowSnapshotSeries.uniform(unit2, _decaying_swirl(unit2, 0.1, 4.0), 0.0, 4.0, 0.05)
    grid = MACGrid.uniform(unit2, 12)
    push = profile_pushforward(spec, s, grid)
    cov = profile_change_of_variables(spec, s, grid, n_v=16)
    cov_half = profile_change_of_variables(spec, s, grid, n_v=8)
    h0, h1 = push.meta["halves"]
    err = 0.5 * profile_w1(h0, h1, grid) + profile_w1(cov, cov_half, grid)
    assert profile_w1(push, cov, grid) <= 3 * err


def test_indicator_limits(unit2):
    s = FlowSnapshotSeries.uniform(unit2, ZeroField(2), 0.0, 3.0, 0.05)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.3, 0.7, (200, 2))
    v = rng.normal(scale=0.8, size=(200, 2))
    v[0] = [0.01, 0.0]
    x[1], v[1] = [0.5, 0.5], [3.0, 0.0]
    rep = indicator_limit_check(s, x, v, [0.25, 0.5, 1.0, 2.0, 3.0])
    assert rep.monotone
    assert np.all(rep.indicators[:, 0] == 1)
    assert rep.indicators[-1, 1] == 0 and rep.indicators[0, 1] == 0
