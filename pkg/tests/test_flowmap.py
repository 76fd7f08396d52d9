import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnslab.errors import BudgetViolationError, CoverageError
from vnslab.flowmap import (FlowSnapshotSeries, exit_time_forward, flow, injectivity_margin,
                            phase_jacobian, straightening_map, write_trajectory)
from vnslab.geometry import Domain, PhaseClass, ZeroField

from conftest import sine_field, swirl_field


def zero_series(dom, t1=1.0, dt=0.05):
    return FlowSnapshotSeries.uniform(dom, ZeroField(dom.dim), 0.0, t1, dt)


def test_free_flow_closed_form(unit2):
    x, v = flow(zero_series(unit2), 0.0, 1.0, [0.0, 0.0], [1.0, 0.0])
    assert np.abs(x[0] - [1 - math.exp(-1), 0]).max() < 1e-12
    assert np.abs(v[0] - [math.exp(-1), 0]).max() < 1e-12


def test_group_and_inverse(unit2):
    s = FlowSnapshotSeries.uniform(unit2, swirl_field(unit2, 0.3), 0.0, 1.0, 0.05)
    rng = np.random.default_rng(0)
    x = rng.uniform(0.3, 0.7, (50, 2))
    v = rng.uniform(-0.1, 0.1, (50, 2))
    xa, va = flow(s, 0.0, 0.4, x, v)
    xb, vb = flow(s, 0.4, 0.85, xa, va)
    xc, vc = flow(s, 0.0, 0.85, x, v)
    assert np.abs(xb - xc).max() < 1e-10 and np.abs(vb - vc).max() < 1e-10
    xr, vr = flow(s, 0.85, 0.0, xc, vc)
    assert np.abs(xr - x).max() < 1e-10 and np.abs(vr - v).max() < 1e-10


def test_coverage_error(unit2):
    with pytest.raises(CoverageError):
        flow(zero_series(unit2), 0.0, 1.5, [0.5, 0.5], [0.0, 0.0])


@pytest.mark.parametrize("d", [2, 3])
def test_jacobian_determinant(d):
    dom = Domain.unit(d)
    s = FlowSnapshotSeries.uniform(dom, sine_field(dom), 0.0, 1.0, 0.02)
    rng = np.random.default_rng(1)
    x = rng.uniform(0.3, 0.7, (20, d))
    v = rng.uniform(-0.2, 0.2, (20, d))
    J = phase_jacobian(s, 0.0, 1.0, x, v)
    det = np.linalg.det(J)
    assert np.abs(det / math.exp(-d) - 1).max() < 1e-6


def test_jacobian_finite_difference_oracle(unit2):
    # the linearized step differs from the derivative of the discrete step at O(dt^2)
    s = FlowSnapshotSeries.uniform(unit2, sine_field(unit2), 0.0, 1.0, 0.01)
    z = np.array([0.45, 0.55, 0.05, -0.1])
    J = phase_jacobian(s, 0.0, 1.0, z[None, :2], z[None, 2:])[0]
    eps = 1e-6
    fd = np.empty((4, 4))
    for k in range(4):
        dz = np.zeros(4)
        dz[k] = eps
        xp, vp = flow(s, 0.0, 1.0, (z + dz)[None, :2], (z + dz)[None, 2:])
        xm, vm = flow(s, 0.0, 1.0, (z - dz)[None, :2], (z - dz)[None, 2:])
        fd[:, k] = (np.concatenate([xp[0], vp[0]]) - np.concatenate([xm[0], vm[0]])) / (2 * eps)
    assert np.abs(fd - J).max() < 1e-6
    assert np.linalg.det(fd) == pytest.approx(math.exp(-2), rel=1e-6)


def test_jacobian_free_blocks(unit3):
    J = phase_jacobian(zero_series(unit3, 0.7, 0.1), 0.0, 0.7, [[0.5, 0.5, 0.5]], [[0.1, 0.0, 0.2]])[0]
    I = np.eye(3)
    assert np.allclose(J[:3, :3], I, atol=1e-13)
    assert np.allclose(J[:3, 3:], (1 - math.exp(-0.7)) * I, atol=1e-13)
    assert np.allclose(J[3:, :3], 0, atol=1e-13)
    assert np.allclose(J[3:, 3:], math.exp(-0.7) * I, atol=1e-13)


def test_trajectory_file(unit2, tmp_path):
    s = FlowSnapshotSeries.uniform(unit2, sine_field(unit2), 0.0, 0.2, 0.05)
    _, hist = phase_jacobian(s, 0.0, 0.2, [[0.5, 0.5]], [[0.1, 0.0]], return_path=True)
    p = write_trajectory(tmp_path / "traj.csv", hist)
    lines = p.read_text().splitlines()
    assert lines[0] == "s,x0,x1,v0,v1,detJ" and len(lines) == 6


def test_exit_time_closed_form(unit3):
    s = zero_series(unit3, 2.0, 0.05)
    ex = exit_time_forward(s, [[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]], [[2.0, 0, 0], [0.4, 0, 0]], 2.0)
    assert ex.tau[0] == pytest.approx(math.log(4 / 3), abs=1e-12)
    assert np.isnan(ex.tau[1])
    assert ex.classes[0] is PhaseClass.OUTGOING and ex.classes[1] is None


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_exit_classes_never_incoming(seed):
    dom = Domain.unit(2)
    s = FlowSnapshotSeries.uniform(dom, swirl_field(dom, 0.5), 0.0, 1.0, 0.1)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.1, 0.9, (40, 2))
    v = rng.normal(scale=1.5, size=(40, 2))
    ex = exit_time_forward(s, x, v, 1.0)
    for t, c in zip(ex.tau, ex.classes):
        if np.isfinite(t):
            assert c in (PhaseClass.OUTGOING, PhaseClass.GRAZING)


def test_straightening_free(unit2):
    s = zero_series(unit2, 0.6, 0.1)
    v = np.array([[0.1, -0.2]])
    r = straightening_map(s, 0.6, [[0.5, 0.5]], v)
    assert np.allclose(r.gamma, math.exp(0.6) * v, atol=1e-13)
    assert r.det[0] == pytest.approx(math.exp(1.2), rel=1e-12)


def test_straightening_lower_bound_3d(unit3):
    s = FlowSnapshotSeries.uniform(unit3, sine_field(unit3, [0.01, -0.008, 0.006]), 0.0, 1.0, 0.05)
    rng = np.random.default_rng(4)
    for t in (0.25, 0.5, 1.0):
        x = rng.uniform(0.2, 0.8, (30, 3))
        v = rng.uniform(-0.3, 0.3, (30, 3))
        r = straightening_map(s, t, x, v)
        assert np.all(r.det >= math.exp(3 * t) / 2)


def test_injectivity_margin_sampled(unit2):
    s = FlowSnapshotSeries.uniform(unit2, sine_field(unit2, [0.01, 0.01]), 0.0, 1.0, 0.05)
    t = 1.0
    rng = np.random.default_rng(7)
    x = np.repeat(rng.uniform(0.3, 0.7, (1, 2)), 200, axis=0)
    v1 = rng.uniform(-0.3, 0.3, (200, 2))
    v2 = v1 + rng.normal(scale=0.05, size=(200, 2))
    r1, r2 = straightening_map(s, t, x, v1), straightening_map(s, t, x, v2)
    ratio = np.linalg.norm(r1.gamma - r2.gamma, axis=1) / np.linalg.norm(v1 - v2, axis=1)
    assert np.all(ratio >= injectivity_margin(r1.budget, t))


def test_budget_violation(unit2):
    s = FlowSnapshotSeries.uniform(unit2, sine_field(unit2, [2.0, 2.0]), 0.0, 1.0, 0.05)
    with pytest.raises(BudgetViolationError):
        straightening_map(s, 1.0, [[0.5, 0.5]], [[0.0, 0.0]])
