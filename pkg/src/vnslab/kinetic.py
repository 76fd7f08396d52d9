"""Particle discretization of the kinetic equation with an absorbing wall.

Weights are integer multiples of a dyadic mass unit so that alive mass plus
absorbed mass equals the initial mass exactly at every step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import integrator
from .errors import ValidationError
from .fluid import FluidState, ForceField
from .geometry import (Domain, MACGrid, PhaseClass, VelocityField,
                       classify_phase, distance_to_boundary, inside)

DEFAULT_UNIT_EXP = 54


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def unit_sphere_area(d: int) -> float:
    return d * unit_ball_volume(d)


@dataclass(frozen=True)
class SpatialLaw:
    """Uniform law on a ball ``B(center, radius)`` or on a box ``[lo, hi]``."""

    kind: str = "ball"
    center: tuple[float, ...] = (0.5, 0.5)
    radius: float = 0.1
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("ball", "box"):
            raise ValidationError(f"unknown spatial law {self.kind!r}")
        if self.kind == "ball" and not self.radius > 0:
            raise ValidationError("spatial ball radius must be positive")

    @property
    def dim(self) -> int:
        return len(self.center) if self.kind == "ball" else len(self.lo)

    @property
    def volume(self) -> float:
        if self.kind == "ball":
            return unit_ball_volume(self.dim) * self.radius ** self.dim
        return float(np.prod(np.subtract(self.hi, self.lo)))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = self.dim
        if self.kind == "box":
            return np.asarray(self.lo) + rng.random((n, d)) * np.subtract(self.hi, self.lo)
        return np.asarray(self.center) + _ball(rng, n, d, 0.0, self.radius)

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "box":
            ok = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        else:
            ok = np.linalg.norm(x - np.asarray(self.center), axis=-1) <= self.radius
        return ok / self.volume

    def fits_in(self, domain: Domain) -> bool:
        if self.kind == "ball":
            return distance_to_boundary(domain, np.asarray(self.center, float)) > self.radius
        return bool(np.all(np.asarray(self.lo) > domain.lo_arr)
                    and np.all(np.asarray(self.hi) < domain.hi_arr))


@dataclass(frozen=True)
class VelocityLaw:
    """Uniform law on the shell ``r_inner <= |v| <= r_outer`` (a ball when ``r_inner = 0``).

    ``r_outer = 0`` gives the monokinetic law at rest.
    """

    r_outer: float
    r_inner: float = 0.0

    def __post_init__(self):
        if self.r_inner < 0 or self.r_outer < self.r_inner:
            raise ValidationError("velocity law needs 0 <= r_inner <= r_outer")

    def volume(self, d: int) -> float:
        return unit_ball_volume(d) * (self.r_outer ** d - self.r_inner ** d)

    def sample(self, rng: np.random.Generator, n: int, d: int) -> np.ndarray:
        return _ball(rng, n, d, self.r_inner, self.r_outer)

    def density(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        r = np.linalg.norm(v, axis=-1)
        vol = self.volume(v.shape[-1])
        if vol == 0:
            raise ValidationError("a point-mass velocity law has no density")
        return ((r >= self.r_inner) & (r <= self.r_outer)) / vol


@dataclass(frozen=True)
class Mixture:
    """Mass ``alpha`` on ``inner`` and ``1 - alpha`` on ``outer``, sampled stratified."""

    alpha: float
    inner: VelocityLaw
    outer: VelocityLaw

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("mixture weight must lie in [0, 1]")

    @property
    def r_outer(self) -> float:
        return max(self.inner.r_outer, self.outer.r_outer)

    def density(self, v):
        out = 0.0
        if self.alpha > 0:
            out = out + self.alpha * self.inner.density(v)
        if self.alpha < 1:
            out = out + (1 - self.alpha) * self.outer.density(v)
        return out


def _ball(rng, n, d, r0, r1):
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    u = rng.random((n, 1))
    r = (r0 ** d + u * (r1 ** d - r0 ** d)) ** (1.0 / d)
    return g / norms * r


@dataclass(frozen=True)
class InitialDataSpec:
    """Product initial density ``f0(x, v) = rho_law(x) g(v)`` with unit mass."""

    spatial: SpatialLaw
    velocity: VelocityLaw | Mixture
    n_particles: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValidationError("need at least one particle")

    @property
    def dim(self) -> int:
        return self.spatial.dim

    def density(self, x, v) -> np.ndarray:
        return self.spatial.density(x) * self.velocity.density(v)

    @property
    def v_radius(self) -> float:
        return self.velocity.r_outer


@dataclass
class LedgerEntry:
    t_exit: float
    x: np.ndarray
    v: np.ndarray
    units: int
    boundary_class: PhaseClass


@dataclass
class ParticleEnsemble:
    x: np.ndarray
    v: np.ndarray
    units: np.ndarray
    unit_exp: int = DEFAULT_UNIT_EXP
    alive: np.ndarray | None = None
    component: np.ndarray | None = None
    t: float = 0.0
    seed: int | None = None
    domain: Domain | None = None
    ledger: list[LedgerEntry] = field(default_factory=list)
    x_init: np.ndarray | None = None
    v_init: np.ndarray | None = None
    last_step: tuple | None = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        self.v = np.array(self.v, dtype=float)
        self.units = np.asarray(self.units, dtype=np.int64)
        n = len(self.x)
        if self.alive is None:
            self.alive = np.ones(n, dtype=bool)
        if self.component is None:
            self.component = np.zeros(n, dtype=np.int8)
        if self.x_init is None:
            self.x_init = self.x.copy()
            self.v_init = self.v.copy()
        self.total_units = int(self.units.sum())

    @classmethod
    def from_weights(cls, x, v, weights, domain: Domain | None = None, unit_exp: int = DEFAULT_UNIT_EXP):
        units = np.array([int(Fraction(float(w)) * 2 ** unit_exp) for w in np.atleast_1d(weights)],
                         dtype=np.int64)
        return cls(np.atleast_2d(x), np.atleast_2d(v), units, unit_exp=unit_exp, domain=domain)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def unit(self) -> float:
        return 2.0 ** -self.unit_exp

    @property
    def weights(self) -> np.ndarray:
        return self.units.astype(float) * self.unit

    def alive_units(self) -> int:
        return int(self.units[self.alive].sum())

    def absorbed_units(self) -> int:
        return sum(e.units for e in self.ledger)

    def units_to_mass(self, units: int) -> float:
        return float(Fraction(units, 2 ** self.unit_exp))

    @property
    def mass_alive(self) -> float:
        return self.units_to_mass(self.alive_units())

    @property
    def mass_absorbed(self) -> float:
        return self.units_to_mass(self.absorbed_units())

    @property
    def n_grazing(self) -> int:
        return sum(e.boundary_class is PhaseClass.GRAZING for e in self.ledger)

    def component_mass(self, k: int) -> float:
        sel = self.alive & (self.component == k)
        return self.units_to_mass(int(self.units[sel].sum()))

    def alive_view(self):
        idx = np.flatnonzero(self.alive)
        return idx, self.x[idx], self.v[idx], self.weights[idx]

    def support_radius(self, center) -> float:
        idx = np.flatnonzero(self.alive)
        if idx.size == 0:
            return 0.0
        return float(np.linalg.norm(self.x[idx] - np.asarray(center), axis=1).max())

    def write_ledger(self, path: str | Path) -> Path:
        path = Path(path)
        d = self.dim
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_exit"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)]
                       + ["weight", "boundary_class"])
            for e in self.ledger:
                w.writerow([repr(float(e.t_exit))] + [repr(float(a)) for a in e.x]
                           + [repr(float(a)) for a in e.v]
                           + [repr(self.units_to_mass(e.units)), e.boundary_class.value])
        return path


def _split_units(total: int, n: int) -> np.ndarray:
    if n == 0:
        if total:
            raise ValidationError("cannot place positive mass on zero particles")
        return np.zeros(0, dtype=np.int64)
    base, rem = divmod(total, n)
    out = np.full(n, base, dtype=np.int64)
    out[:rem] += 1
    return out


def _unit_exp_for(alpha: float) -> int:
    den = Fraction(alpha).denominator
    k = max(DEFAULT_UNIT_EXP, den.bit_length() - 1)
    return min(k, 62)


def sample_initial(spec: InitialDataSpec, domain: Domain | None = None) -> ParticleEnsemble:
    """Draw the particle ensemble for ``spec`` with a seeded generator.

    The velocity mixture is stratified: the first ``round(alpha N)`` particles
    carry exactly mass ``alpha`` and the rest carry ``1 - alpha``.
    """
    if domain is not None and not spec.spatial.fits_in(domain):
        raise ValidationError("spatial support must lie inside the domain")
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_particles, spec.dim
    x = spec.spatial.sample(rng, n)
    vel = spec.velocity
    if isinstance(vel, Mixture):
        k = _unit_exp_for(vel.alpha)
        total = 2 ** k
        inner_units = int(Fraction(vel.alpha) * total)
        n1 = int(round(vel.alpha * n))
        if vel.alpha > 0:
            n1 = max(n1, 1)
        if vel.alpha < 1:
            n1 = min(n1, n - 1)
        v = np.concatenate([vel.inner.sample(rng, n1, d), vel.outer.sample(rng, n - n1, d)])
        units = np.concatenate([_split_units(inner_units, n1), _split_units(total - inner_units, n - n1)])
        comp = np.concatenate([np.zeros(n1, np.int8), np.ones(n - n1, np.int8)])
    else:
        k = DEFAULT_UNIT_EXP
        v = vel.sample(rng, n, d)
        units = _split_units(2 ** k, n)
        comp = np.zeros(n, np.int8)
    return ParticleEnsemble(x, v, units, unit_exp=k, component=comp, seed=spec.seed, domain=domain)


def push_particles(ens: ParticleEnsemble, field: VelocityField, dt: float) -> None:
    """Advance alive particles by one exponential drag step (in place)."""
    idx = np.flatnonzero(ens.alive)
    x0, v0 = ens.x[idx], ens.v[idx]
    x1, v1, ubar = integrator.step(x0, v0, field, dt)
    ens.x[idx], ens.v[idx] = x1, v1
    ens.last_step = (idx, x0, v0, ubar, dt, ens.t)
    ens.t = ens.t + dt


def absorb(ens: ParticleEnsemble, domain: Domain | None = None) -> int:
    """Remove particles whose last step reached the wall; returns the number absorbed.

    The exit point is located on the frozen-field path by bisection; its time,
    phase point, mass and boundary class are appended to the ledger.
    """
    domain = domain or ens.domain
    if domain is None:
        raise ValidationError("absorption needs a domain")
    if ens.last_step is None:
        idx = np.flatnonzero(ens.alive)
        gone = idx[~inside(domain, ens.x[idx])]
        s = np.zeros(len(gone))
        xe, ve, t0 = ens.x[gone], ens.v[gone], ens.t
    else:
        idx, x0, v0, ubar, h, t0 = ens.last_step
        ens.last_step = None
        mask, s_all = integrator.segment_exit(domain, x0, v0, ubar, h)
        gone = idx[mask]
        s = s_all[mask]
        xe = integrator.path(x0[mask], v0[mask], ubar[mask], s)
        ve = integrator.path_velocity(v0[mask], ubar[mask], s)
    if len(gone) == 0:
        return 0
    xe = _snap_to_boundary(domain, xe)
    classes = classify_phase(domain, xe, ve)
    for k, i in enumerate(gone):
        ens.ledger.append(LedgerEntry(float(t0 + s[k]), xe[k].copy(), ve[k].copy(),
                                      int(ens.units[i]), classes[k]))
    ens.alive[gone] = False
    ens.x[gone], ens.v[gone] = xe, ve
    return len(gone)


def _snap_to_boundary(domain: Domain, x: np.ndarray) -> np.ndarray:
    """Project exit points (within roundoff of the wall) onto the closed box."""
    return np.clip(x, domain.lo_arr, domain.hi_arr)


@dataclass
class KineticMoments:
    """Grid moments of the alive particles.

    ``rho``/``j`` are cell-centred; ``rho_face``/``j_face`` sit on the faces
    of each velocity component and use the same stencil as the field gather.
    """

    grid: MACGrid
    rho: np.ndarray
    j: tuple[np.ndarray, ...]
    rho_face: tuple[np.ndarray, ...]
    j_face: tuple[np.ndarray, ...]
    moments: dict[float, float]
    nq: float = float("nan")

    @property
    def rho_sup(self) -> float:
        return float(self.rho.max()) if self.rho.size else 0.0

    @property
    def j_sup(self) -> float:
        return float(np.sqrt(sum(a * a for a in self.j)).max())


def deposit_moments(ens: ParticleEnsemble, grid: MACGrid, alphas=(1, 2, 6),
                    q: float | None = None, nq_points: int = 1000) -> KineticMoments:
    """Cloud-in-cell density and current, velocity moments and optionally ``N_q``."""
    _, x, v, w = ens.alive_view()
    vol = grid.cell_volume
    d = grid.dim
    rho = grid.deposit(None, x, w) / vol
    j = tuple(grid.deposit(None, x, w * v[:, c]) / vol for c in range(d))
    rho_face = tuple(grid.deposit(c, x, w) / vol for c in range(d))
    j_face = tuple(grid.deposit(c, x, w * v[:, c]) / vol for c in range(d))
    speed = np.linalg.norm(v, axis=1)
    mom = {0: float(w.sum())}
    for a in alphas:
        mom[a] = float(np.sum(w * speed ** a))
    nq = kde_weighted_sup(x, v, w, q, nq_points) if q is not None else float("nan")
    return KineticMoments(grid, rho, j, rho_face, j_face, mom, nq)


def kde_weighted_sup(x, v, w, q: float, n_eval: int = 1000, chunk: int = 256) -> float:
    """``max_i (1 + |v_i|^q) f_hat(x_i, v_i)`` with a Gaussian product kernel.

    Bandwidths follow the per-axis normal-reference rule.  A degenerate axis
    (zero spread) makes the density estimate infinite.
    """
    n = len(w)
    if n == 0:
        return 0.0
    z = np.concatenate([x, v], axis=1)
    D = z.shape[1]
    W = w.sum()
    mean = (w[:, None] * z).sum(0) / W
    sd = np.sqrt((w[:, None] * (z - mean) ** 2).sum(0) / W)
    if np.any(sd <= 1e-14 * (1 + np.abs(mean))):
        return float("inf")
    bw = sd * (4.0 / ((D + 2) * n)) ** (1.0 / (D + 4))
    step = max(1, n // n_eval)
    ev = np.arange(0, n, step)
    norm = W / (np.prod(bw) * (2 * np.pi) ** (D / 2))
    zs = z / bw
    best = 0.0
    for s in range(0, len(ev), chunk):
        pts = zs[ev[s:s + chunk]]
        d2 = ((pts[:, None, :] - zs[None, :, :]) ** 2).sum(-1)
        dens = (np.exp(-0.5 * d2) @ (w / W)) * norm
        sp = np.linalg.norm(v[ev[s:s + chunk]], axis=1)
        best = max(best, float(((1 + sp ** q) * dens).max()))
    return best


def brinkman_force(mom: KineticMoments, fluid: FluidState) -> ForceField:
    """Drag force on the fluid, ``F = j - rho u``, on the faces."""
    f = []
    for c in range(fluid.grid.dim):
        fc = mom.j_face[c] - mom.rho_face[c] * fluid.u[c]
        sl = [slice(None)] * fc.ndim
        sl[c] = [0, -1]
        fc[tuple(sl)] = 0.0
        f.append(fc)
    return ForceField(fluid.grid, tuple(f))


def representation_eval(spec: InitialDataSpec, series, t: float, x, v,
                        domain: Domain) -> np.ndarray:
    """Evaluate ``f(t, x, v)`` by backward characteristics.

    Points whose backward trajectory leaves the domain before reaching time 0
    get value 0; otherwise ``e^{d t} f0`` at the foot of the characteristic.
    """
    from .flowmap import backward_to_zero

    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))
    x0, v0, ok = backward_to_zero(series, t, x, v, domain)
    out = np.zeros(len(x))
    if ok.any():
        out[ok] = math.exp(x.shape[1] * t) * spec.density(x0[ok], v0[ok])
    return out
