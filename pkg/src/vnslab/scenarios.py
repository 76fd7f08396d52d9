"""Confinement, escape and prescribed-mass scenarios.

Each builder validates the geometric condition of its regime, computes the
derived quantities and returns a :class:`ScenarioConfig` carrying the initial
data.  :func:`run_scenario` runs the coupled loop and compares the outcome
with the regime's prediction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asymptotics import fit_decay
from .coupling import CoupledSolver, LoopOptions
from .diagnostics import trapezoid_between
from .errors import ScenarioValidationError, ValidationError
from .fluid import FluidParams, initial_mode
from .geometry import Domain, distance_to_boundary, inside
from .kinetic import InitialDataSpec, Mixture, SpatialLaw, VelocityLaw, sample_initial

ESCAPE_SAFETY = 1.05


@dataclass
class ScenarioConfig:
    kind: str
    domain: Domain
    a: tuple[float, ...]
    epsilon: float
    spec: InitialDataSpec
    R: float | None = None
    R1: float | None = None
    R2: float | None = None
    alpha: float | None = None
    T: float | None = None
    u0_amplitude: float = 0.0
    derived: dict = field(default_factory=dict)

    def params(self) -> dict:
        return {"kind": self.kind, "a": list(self.a), "epsilon": self.epsilon, "R": self.R,
                "R1": self.R1, "R2": self.R2, "alpha": self.alpha, "T": self.T,
                "u0_amplitude": self.u0_amplitude, "n_particles": self.spec.n_particles,
                "seed": self.spec.seed, "domain": {"lo": list(self.domain.lo), "hi": list(self.domain.hi)}}


def boundary_gap(domain: Domain, a, epsilon: float) -> float:
    """Distance from the closed ball ``B(a, epsilon)`` to the boundary."""
    if epsilon < 0:
        raise ScenarioValidationError("epsilon must be non-negative")
    a = np.asarray(a, float)
    if not inside(domain, a):
        raise ScenarioValidationError("centre must lie inside the domain")
    gap = float(distance_to_boundary(domain, a)) - epsilon
    if gap <= 0:
        raise ScenarioValidationError("the ball B(a, epsilon) must sit inside the domain")
    return gap


def confinement_quantities(gap: float, R: float) -> tuple[float, float]:
    """``delta = (gap/2 - R)/2`` and the predicted confinement radius offset ``R + 2 delta``."""
    if not 2 * R < gap:
        raise ScenarioValidationError(f"confinement needs 2R < gap (2R = {2 * R}, gap = {gap})")
    delta = 0.5 * (0.5 * gap - R)
    return delta, R + 2 * delta


def escape_threshold(L: float, epsilon: float, T: float) -> float:
    """Smallest admissible speed ``(2L + epsilon) / (1 - e^{-T})``."""
    if not T > 0:
        raise ScenarioValidationError("escape horizon must be positive")
    return (2 * L + epsilon) / (-math.expm1(-T))


def build_confinement(domain: Domain, a, epsilon: float, R: float, n_particles: int = 10000,
                      seed: int = 0, u0_amplitude: float = 0.0) -> ScenarioConfig:
    gap = boundary_gap(domain, a, epsilon)
    delta, offset = confinement_quantities(gap, R)
    spec = InitialDataSpec(SpatialLaw("ball", tuple(a), epsilon), VelocityLaw(R), n_particles, seed)
    return ScenarioConfig("confinement", domain, tuple(float(c) for c in a), epsilon, spec, R=R,
                          u0_amplitude=u0_amplitude,
                          derived={"gap": gap, "delta": delta, "radius": epsilon + offset,
                                   "budget_u_L1Linf": delta})


def build_escape(domain: Domain, a, epsilon: float, T: float = 1.0, n_particles: int = 10000,
                 seed: int = 0, u0_amplitude: float = 0.0) -> ScenarioConfig:
    boundary_gap(domain, a, epsilon)
    L = 2 * _circumradius(domain, a)
    if L <= epsilon:
        raise ScenarioValidationError("escape construction needs L > epsilon")
    thr = escape_threshold(L, epsilon, T)
    R = ESCAPE_SAFETY * thr
    spec = InitialDataSpec(SpatialLaw("ball", tuple(a), epsilon), VelocityLaw(2 * R, R), n_particles, seed)
    return ScenarioConfig("escape", domain, tuple(float(c) for c in a), epsilon, spec, R=R, T=T,
                          u0_amplitude=u0_amplitude,
                          derived={"L": L, "threshold": thr, "R": R, "budget_u_L1Linf": L / 8})


def build_mixed(domain: Domain, a, epsilon: float, alpha: float, T: float = 1.0,
                R1: float | None = None, n_particles: int = 10000, seed: int = 0,
                u0_amplitude: float = 0.0) -> ScenarioConfig:
    """Slow component of mass ``alpha`` that stays, fast component of mass ``1 - alpha`` that leaves.

    The default slow radius is a third of the boundary gap.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ScenarioValidationError("alpha must lie in [0, 1]")
    gap = boundary_gap(domain, a, epsilon)
    R1 = gap / 3 if R1 is None else R1
    delta, offset = confinement_quantities(gap, R1)
    L = 2 * _circumradius(domain, a)
    if L <= epsilon:
        raise ScenarioValidationError("no escape speed exists for this geometry")
    thr = escape_threshold(L, epsilon, T)
    R2 = ESCAPE_SAFETY * thr
    if not R1 < R2:
        raise ScenarioValidationError("need R1 < R2")
    vel = Mixture(alpha, VelocityLaw(R1), VelocityLaw(2 * R2, R2))
    spec = InitialDataSpec(SpatialLaw("ball", tuple(a), epsilon), vel, n_particles, seed)
    return ScenarioConfig("mixed", domain, tuple(float(c) for c in a), epsilon, spec, R1=R1, R2=R2,
                          alpha=alpha, T=T, u0_amplitude=u0_amplitude,
                          derived={"gap": gap, "delta": delta, "radius": epsilon + offset, "L": L,
                                   "threshold": thr, "budget_confine": delta, "budget_escape": L / 8})


def _circumradius(domain: Domain, a) -> float:
    a = np.asarray(a, float)
    far = np.maximum(np.abs(a - domain.lo_arr), np.abs(domain.hi_arr - a))
    return float(np.linalg.norm(far))


@dataclass
class ScenarioReport:
    kind: str
    params: dict
    derived: dict
    predictions: dict
    measured: dict
    passed: bool
    trajectories: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "derived": self.derived,
                "predictions": self.predictions, "measured": self.measured, "pass": self.passed}

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
        return path


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def make_solver(cfg: ScenarioConfig, params: FluidParams, options: LoopOptions | None = None) -> CoupledSolver:
    opts = options or LoopOptions()
    if opts.ref_point is None:
        opts.ref_point = cfg.a
    grid = params.grid(cfg.domain)
    ens = sample_initial(cfg.spec, cfg.domain)
    fluid = initial_mode(grid, cfg.u0_amplitude)
    return CoupledSolver(fluid, ens, params, cfg.domain, opts)


def evaluate(cfg: ScenarioConfig, solver: CoupledSolver) -> ScenarioReport:
    """Compare a finished run with the scenario's predictions."""
    h = solver.history
    t = h.t
    alive = h.column("mass_alive")
    absorbed = h.column("mass_absorbed")
    u_l1linf = trapezoid_between(t, h.column("u_Linf"), t[0])
    radius = np.array(solver.support_radius)
    ens = solver.ens
    measured = {"final_mass": float(alive[-1]), "absorbed_mass": float(absorbed[-1]),
                "u_L1Linf": u_l1linf, "max_support_radius": float(radius.max()) if radius.size else 0.0,
                "grazing_exits": ens.n_grazing, "horizon": float(t[-1]),
                "max_interp_ratio": float(max(h.interp_ratio)) if h.interp_ratio else 0.0}
    try:
        fit = fit_decay(t, h.column("E"))
        measured["decay_rate"], measured["decay_r2"] = fit.rate, fit.r2
    except ValidationError:
        measured["decay_rate"] = measured["decay_r2"] = None
    # long-time profile: deposit X_T + V_T of the alive particles
    idx, x, v, w = ens.alive_view()
    rho_lt = solver.grid.deposit(None, x + v, w) / solver.grid.cell_volume
    measured["rho_inf_longtime_mass"] = float(rho_lt.sum() * solver.grid.cell_volume)
    d = cfg.derived
    if cfg.kind == "confinement":
        pred = {"absorbed_mass": 0.0, "support_radius_max": d["radius"], "budget_u_L1Linf": d["delta"]}
        passed = measured["absorbed_mass"] == 0.0 and measured["max_support_radius"] <= d["radius"]
        measured["budget_ok"] = u_l1linf <= d["delta"]
    elif cfg.kind == "escape":
        after = alive[t >= cfg.T]
        pred = {"alive_mass_after_T": 0.0, "budget_u_L1Linf": d["L"] / 8}
        measured["alive_mass_after_T"] = float(after.max()) if after.size else None
        passed = after.size > 0 and bool(np.all(after == 0.0))
        measured["budget_ok"] = u_l1linf < d["L"] / 8
    else:
        pred = {"final_mass": cfg.alpha}
        slow = ens.component_mass(0)
        measured["slow_component_alive"] = slow
        measured["fast_component_alive"] = ens.component_mass(1)
        measured["budget_ok"] = u_l1linf <= min(d["budget_confine"], d["budget_escape"])
        passed = t[-1] >= cfg.T and measured["final_mass"] == cfg.alpha
    report = ScenarioReport(cfg.kind, cfg.params(), dict(d), pred, measured, bool(passed))
    report.trajectories = {"t": t, "mass_alive": alive, "support_radius": radius, "rho_longtime": rho_lt}
    return report


def run_scenario(cfg: ScenarioConfig, params: FluidParams, horizon: float,
                 options: LoopOptions | None = None) -> tuple[ScenarioReport, CoupledSolver]:
    if cfg.T is not None and horizon < cfg.T:
        raise ValidationError("horizon must reach the escape time T")
    solver = make_solver(cfg, params, options)
    solver.run(horizon)
    return evaluate(cfg, solver), solver


def default_scenario(kind: str, alpha: float | None = None, n_particles: int = 10000,
                     seed: int = 0) -> ScenarioConfig:
    """Worked instances on the unit square centred at (0.5, 0.5)."""
    dom = Domain.unit(2)
    a = (0.5, 0.5)
    if kind == "confinement":
        return build_confinement(dom, a, 0.2, 0.1, n_particles, seed, u0_amplitude=0.02)
    if kind == "escape":
        return build_escape(dom, a, 0.1, 1.0, n_particles, seed, u0_amplitude=0.02)
    if kind == "mixed":
        return build_mixed(dom, a, 0.2, 0.3 if alpha is None else alpha, 1.0,
                           n_particles=n_particles, seed=seed, u0_amplitude=0.02)
    raise ValidationError(f"unknown scenario {kind!r}")
