import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vnslab.coupling import LoopOptions
from vnslab.errors import ScenarioValidationError, ValidationError
from vnslab.flowmap import FlowSnapshotSeries, exit_time_forward
from vnslab.fluid import FluidParams
from vnslab.geometry import Domain, ZeroField
from vnslab.kinetic import sample_initial
from vnslab.scenarios import (boundary_gap, build_confinement, build_escape, build_mixed,
                              confinement_quantities, default_scenario, escape_threshold,
                              run_scenario)


def test_confinement_worked_instance():
    delta, offset = confinement_quantities(0.3, 0.1)
    assert delta == pytest.approx(0.025, abs=1e-15)
    assert offset == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(ScenarioValidationError):
        confinement_quantities(0.3, 0.2)


def test_confinement_builder_matches_formula(unit2):
    cfg = build_confinement(unit2, (0.5, 0.5), 0.2, 0.1, n_particles=100)
    assert cfg.derived["gap"] == pytest.approx(0.3, abs=1e-15)
    assert cfg.derived["delta"] == pytest.approx(0.025, abs=1e-15)
    assert cfg.derived["radius"] == pytest.approx(0.35, abs=1e-15)
    with pytest.raises(ScenarioValidationError):
        build_confinement(unit2, (0.5, 0.5), 0.2, 0.2)


def test_confinement_point_mass_limit(unit2):
    R = 0.1
    deltas = [build_confinement(unit2, (0.5, 0.5), eps, R, n_particles=10).derived["delta"]
              for eps in (1e-2, 1e-4, 1e-6)]
    limit = 0.5 * (0.5 / 2 - R)
    assert abs(deltas[-1] - limit) < abs(deltas[0] - limit)
    assert deltas[-1] == pytest.approx(limit, abs=1e-6)


def test_boundary_gap_rejects(unit2):
    with pytest.raises(ScenarioValidationError):
        boundary_gap(unit2, (0.5, 0.5), 0.5)
    with pytest.raises(ScenarioValidationError):
        boundary_gap(unit2, (1.5, 0.5), 0.1)
    with pytest.raises(ScenarioValidationError):
        boundary_gap(unit2, (0.5, 0.5), -0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.0, 0.5), st.floats(0.0, 0.3))
def test_validation_is_pure(ax, ay, eps, R):
    dom = Domain.unit(2)

    def outcome():
        try:
            return build_confinement(dom, (ax, ay), eps, R, n_particles=10).derived
        except ValidationError as e:
            return type(e).__name__ + str(e)

    assert outcome() == outcome()


def test_escape_threshold_example():
    thr = escape_threshold(1.0, 0.1, 1.0)
    assert thr == pytest.approx(3.32216, abs=1e-5)
    assert thr == pytest.approx(2.1 / (1 - math.exp(-1)), rel=1e-14)
    # the worked value 3.48827 is 1.05 times the rounded threshold; exact is 3.488259
    assert 1.05 * thr == pytest.approx(3.48827, abs=2e-5)
    assert escape_threshold(1.0, 0.1, 60.0) == pytest.approx(2.1, rel=1e-12)
    with pytest.raises(ScenarioValidationError):
        escape_threshold(1.0, 0.1, 0.0)


def test_escape_builder(unit2):
    cfg = build_escape(unit2, (0.5, 0.5), 0.1, 1.0, n_particles=100)
    L = 2 * math.sqrt(0.5)
    assert cfg.derived["L"] == pytest.approx(L, rel=1e-14)
    assert cfg.R == pytest.approx(1.05 * (2 * L + 0.1) / (1 - math.exp(-1)), rel=1e-14)
    assert cfg.derived["budget_u_L1Linf"] == pytest.approx(L / 8)
    ens = sample_initial(cfg.spec, unit2)
    s = np.linalg.norm(ens.v, axis=1)
    assert np.all(s >= cfg.R) and np.all(s <= 2 * cfg.R)


@pytest.mark.parametrize("d", [2, 3])
def test_escape_free_exit_oracle(d):
    dom = Domain.unit(d)
    a = (0.4,) * d
    cfg = build_escape(dom, a, 0.1, 1.0, n_particles=500, seed=3)
    ens = sample_initial(cfg.spec, dom)
    series = FlowSnapshotSeries.uniform(dom, ZeroField(d), 0.0, 1.0, 0.05)
    ex = exit_time_forward(series, ens.x, ens.v, 1.0)
    assert np.all(np.isfinite(ex.tau)) and np.all(ex.tau <= 1.0)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_mixed_split(unit2, alpha):
    cfg = build_mixed(unit2, (0.5, 0.5), 0.2, alpha, n_particles=1000)
    ens = sample_initial(cfg.spec, unit2)
    assert ens.component_mass(0) == alpha
    assert ens.component_mass(1) == 1.0 - alpha
    slow = np.linalg.norm(ens.v, axis=1) < cfg.R1
    assert np.all(slow == (ens.component == 0))
    assert cfg.R1 == pytest.approx(0.1) and cfg.R1 < cfg.R2


def test_mixed_rejects(unit2):
    with pytest.raises(ScenarioValidationError):
        build_mixed(unit2, (0.5, 0.5), 0.2, 1.5)
    with pytest.raises(ScenarioValidationError):
        build_mixed(unit2, (0.5, 0.5), 0.2, 0.3, R1=0.2)


def _params(n=16, dt=0.01):
    return FluidParams((n, n), dt)


def test_run_confinement_short(tmp_path):
    cfg = default_scenario("confinement", n_particles=500)
    rep, solver = run_scenario(cfg, _params(), 0.5, LoopOptions(q=None))
    assert rep.passed
    assert rep.measured["absorbed_mass"] == 0.0
    assert rep.measured["max_support_radius"] <= cfg.derived["radius"]
    d = json.loads(rep.write(tmp_path / "r.json").read_text())
    assert set(d) == {"kind", "params", "derived", "predictions", "measured", "pass"}


def test_run_escape_short():
    cfg = default_scenario("escape", n_particles=500)
    rep, solver = run_scenario(cfg, _params(), 1.2, LoopOptions(q=None))
    assert rep.passed and rep.measured["alive_mass_after_T"] == 0.0
    assert rep.measured["budget_ok"]
    assert solver.ens.mass_alive == 0.0
    with pytest.raises(ValidationError):
        run_scenario(cfg, _params(), 0.5)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
def test_run_mixed_short(alpha):
    cfg = default_scenario("mixed", alpha=alpha, n_particles=400)
    rep, _ = run_scenario(cfg, _params(), 1.1, LoopOptions(q=None))
    assert rep.passed and rep.measured["final_mass"] == alpha


def test_unknown_scenario():
    with pytest.raises(ValidationError):
        default_scenario("nonsense")
