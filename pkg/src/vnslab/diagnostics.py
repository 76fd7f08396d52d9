"""Per-step monitors: energy balance, moments, norms and smallness budgets."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .asymptotics import energy_and_dissipation
from .fluid import FluidState, ForceField
from .geometry import MACGrid
from .kinetic import KineticMoments, ParticleEnsemble, unit_ball_volume, unit_sphere_area


@dataclass
class DiagnosticsRecord:
    t: float
    E: float
    D: float
    mass_alive: float
    mass_absorbed: float
    M1: float
    M2: float
    M6: float
    Nq: float
    rho_sup: float
    j_sup: float
    u_L2: float
    grad_u_L2: float
    u_Linf: float
    grad_u_Linf: float
    int_grad_u_Linf: float
    int_F_L2sq: float
    energy_residual: float


COLUMNS = [f.name for f in fields(DiagnosticsRecord)]


@dataclass
class History:
    records: list[DiagnosticsRecord] = field(default_factory=list)
    int_D: float = 0.0
    int_u_Linf: float = 0.0
    interp_ratio: list[float] = field(default_factory=list)
    _last: tuple | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> DiagnosticsRecord:
        return self.records[i]


def record_step(history: History, t: float, ens: ParticleEnsemble, fluid: FluidState | None,
                moments: KineticMoments, force: ForceField | None) -> DiagnosticsRecord:
    """Append one record; time integrals use the trapezoid rule between records."""
    E, D = energy_and_dissipation(ens, fluid)
    if fluid is not None:
        f = fluid.field()
        ul2, gl2, uinf, ginf = f.l2_norm(), f.grad_l2_norm(), f.sup_norm, f.grad_sup
    else:
        ul2 = gl2 = uinf = ginf = 0.0
    F2 = force.l2_sq() if force is not None else 0.0
    if history._last is None:
        igrad = iF = 0.0
    else:
        t0, D0, g0, F0, u0 = history._last
        dt = t - t0
        prev = history.records[-1]
        history.int_D += 0.5 * dt * (D0 + D)
        history.int_u_Linf += 0.5 * dt * (u0 + uinf)
        igrad = prev.int_grad_u_Linf + 0.5 * dt * (g0 + ginf)
        iF = prev.int_F_L2sq + 0.5 * dt * (F0 + F2)
    E0 = history.records[0].E if history.records else E
    mom = moments.moments
    rec = DiagnosticsRecord(
        t=t, E=E, D=D, mass_alive=ens.mass_alive, mass_absorbed=ens.mass_absorbed,
        M1=mom.get(1, math.nan), M2=mom.get(2, math.nan), M6=mom.get(6, math.nan),
        Nq=moments.nq, rho_sup=moments.rho_sup, j_sup=moments.j_sup,
        u_L2=ul2, grad_u_L2=gl2, u_Linf=uinf, grad_u_Linf=ginf,
        int_grad_u_Linf=igrad, int_F_L2sq=iF, energy_residual=E + history.int_D - E0)
    history.records.append(rec)
    history._last = (t, D, ginf, F2, uinf)
    return rec


def write_timeseries(history: History, path: str | Path) -> Path:
    """CSV with one column per record field, 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in history.records:
            w.writerow([f"{getattr(r, c):.17g}" for c in COLUMNS])
    return path


def read_timeseries(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in COLUMNS}


def trapezoid_between(t: np.ndarray, y: np.ndarray, t0: float, t1: float = math.inf) -> float:
    sel = (t >= t0) & (t <= t1)
    ts, ys = t[sel], y[sel]
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(ts))) if len(ts) > 1 else 0.0


@dataclass
class SmallnessReport:
    C1: float
    C2: float
    delta: float
    strong_threshold: float
    strong_margin: float
    budget_anchor0: float
    budget_anchor1: float
    delta_margin: float
    t_star: float
    brinkman_ratio: float
    initial: dict

    def to_dict(self) -> dict:
        return asdict(self)


def smallness_report(history: History, C1: float = 1.0, C2: float = 1.0,
                     delta: float = 0.1) -> SmallnessReport:
    """Evaluate the smallness and budget conditions along a recorded run.

    The strong-existence margin is ``1/sqrt(8 C1 C2) - (|grad u0|^2 + C1 int |F|^2)``.
    The gradient budget is reported from both anchors ``t = 0`` and ``t = 1``;
    ``delta_margin`` uses the ``t = 1`` anchor.  ``t_star`` is the first record
    where either condition fails (``inf`` if none).  The Brinkman ratio is
    ``int |F|^2 / (sup rho E(0))``, which the drag estimate bounds by one.
    """
    t = history.t
    r0 = history.records[0]
    thr = 1.0 / math.sqrt(8.0 * C1 * C2)
    strong = r0.grad_u_L2 ** 2 + C1 * history.column("int_F_L2sq")
    g = history.column("grad_u_Linf")
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(t))])
    anchor1 = np.where(t >= 1.0, cum - np.interp(1.0, t, cum), 0.0) if t[-1] >= 1.0 else np.zeros_like(t)
    fail = (strong > thr) | (anchor1 > delta)
    t_star = float(t[np.argmax(fail)]) if fail.any() else math.inf
    rho_sup = float(history.column("rho_sup").max())
    denom = rho_sup * r0.E
    ratio = float(history.records[-1].int_F_L2sq / denom) if denom > 0 else 0.0
    return SmallnessReport(
        C1, C2, delta, thr, float(thr - strong[-1]), float(cum[-1]), float(anchor1[-1]),
        float(delta - anchor1[-1]), t_star, ratio,
        {"E0": r0.E, "u0_H1": math.sqrt(r0.u_L2 ** 2 + r0.grad_u_L2 ** 2), "Nq0": r0.Nq, "M6_0": r0.M6})


def _ball_moment(k: int, speed: np.ndarray, r: float, d: int) -> np.ndarray:
    """``E |v + r U|^k`` for ``U`` uniform in the unit ball, ``k`` in {0, 2, 4}."""
    s2 = speed * speed
    if k == 0:
        return np.ones_like(speed)
    m2 = r * r * d / (d + 2)
    if k == 2:
        return s2 + m2
    if k == 4:
        return s2 * s2 + r * r * s2 * (d / (d + 2)) * (2 + 4 / d) + r ** 4 * d / (d + 4)
    raise ValueError("moment order must be 0, 2 or 4")


def interpolation_constant(d: int, k: float, ell: float) -> float:
    """Constant of ``m_ell <= C ||g||_inf^(1-theta) m_k^theta`` with ``theta = (ell+d)/(k+d)``.

    Obtained by splitting the velocity integral at the optimal radius.
    """
    if k == ell:
        return 1.0
    theta = (ell + d) / (k + d)
    r = (k - ell) / (ell + d)
    return (unit_sphere_area(d) / (ell + d)) ** (1 - theta) * (r ** theta + r ** (theta - 1))


def interpolation_rhs(g_sup: float, m_k: float, d: int, k: float = 2, ell: float = 0) -> float:
    theta = (ell + d) / (k + d)
    return (g_sup + 1.0) * interpolation_constant(d, k, ell) * m_k ** theta


@dataclass
class AuditReport:
    max_ratio: float
    ratios: np.ndarray
    g_sup: float


def moment_interpolation_audit(ens: ParticleEnsemble, grid: MACGrid, k: int = 2, ell: int = 0,
                               smoothing: float | None = None) -> AuditReport:
    """Cellwise check of the moment interpolation inequality.

    The particle density is smoothed into a function ``g`` that is constant
    in ``x`` on each cell and a sum of uniform velocity balls of radius
    ``smoothing``.  Its moments are exact; ``||g||_inf`` is replaced by the
    upper bound ``sum w / (|cell| |B_r|)``.
    """
    _, x, v, w = ens.alive_view()
    d = grid.dim
    n = int(np.prod(grid.shape))
    if len(w) == 0:
        return AuditReport(0.0, np.zeros(grid.shape), 0.0)
    if smoothing is None:
        spread = float(np.sqrt(np.average(np.sum(v * v, axis=1), weights=w)))
        smoothing = max(0.5 * spread * len(w) ** (-1.0 / (d + 4)), 1e-6)
    lo, h = grid.domain.lo_arr, grid.spacing
    cell = np.clip(np.floor((x - lo) / h).astype(int), 0, np.asarray(grid.shape) - 1)
    flat = np.ravel_multi_index(tuple(cell.T), grid.shape)
    speed = np.linalg.norm(v, axis=1)
    vol = grid.cell_volume
    ml = np.bincount(flat, weights=w * _ball_moment(ell, speed, smoothing, d), minlength=n) / vol
    mk = np.bincount(flat, weights=w * _ball_moment(k, speed, smoothing, d), minlength=n) / vol
    mass = np.bincount(flat, weights=w, minlength=n) / vol
    g_sup = float(mass.max()) / (unit_ball_volume(d) * smoothing ** d)
    rhs = interpolation_rhs(g_sup, mk, d, k, ell)
    ratio = np.where(ml > 0, ml / np.where(rhs > 0, rhs, 1.0), 0.0)
    return AuditReport(float(ratio.max()), ratio.reshape(grid.shape), g_sup)
