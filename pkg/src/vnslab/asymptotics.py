"""Energy, transport distances, decay fits and the limiting spatial profile.

The limit of the spatial density is obtained in two independent ways: by
pushing sampled initial data through the asymptotic map ``X_inf`` and by the
change of variables that inverts ``X_inf`` for each fixed velocity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import (InversionError, MassMismatchError, NumericalError,
                     TailNotControllableError, ValidationError)
from .fluid import FluidState, poisson_solve_dirichlet
from .flowmap import FlowSnapshotSeries, exit_time_forward, flow
from .geometry import MACGrid, distance_to_boundary
from .kinetic import InitialDataSpec, ParticleEnsemble, sample_initial


def energy_and_dissipation(ens: ParticleEnsemble, fluid: FluidState | None) -> tuple[float, float]:
    """``E = |u|^2/2 + M_2/2`` and ``D = sum w |u(x) - v|^2 + |grad u|^2``."""
    _, x, v, w = ens.alive_view()
    kin = 0.5 * float(np.sum(w * np.sum(v * v, axis=1)))
    if fluid is None:
        return kin, float(np.sum(w * np.sum(v * v, axis=1)))
    f = fluid.field()
    rel = f.sample(x) - v
    return (0.5 * f.l2_norm() ** 2 + kin,
            float(np.sum(w * np.sum(rel * rel, axis=1))) + f.grad_l2_norm() ** 2)


def w1_monokinetic(ens: ParticleEnsemble) -> float:
    """Transport distance from ``f`` to ``rho_f (x) delta_0(v)``: the first velocity moment."""
    _, _, v, w = ens.alive_view()
    return float(np.sum(w * np.linalg.norm(v, axis=1)))


def w1_bound(energy: float, mass: float) -> float:
    """Cauchy-Schwarz bound ``M_1 <= sqrt(2 E M_0)``."""
    return math.sqrt(2.0 * max(energy, 0.0) * max(mass, 0.0))


@dataclass
class W1Result:
    cost: float
    plan: np.ndarray
    potentials: tuple[np.ndarray, np.ndarray]
    certificate_gap: float


def w1_empirical(xa, wa, xb, wb, mass_tol: float = 1e-12, cert_tol: float = 1e-9) -> W1Result:
    """Exact Euclidean transport cost between two weighted point clouds.

    Solves the transportation LP and checks the dual potentials: they must be
    feasible (``f_i + g_j <= |x_i - y_j|``) and reach the primal cost.
    """
    xa, xb = np.atleast_2d(np.asarray(xa, float)), np.atleast_2d(np.asarray(xb, float))
    wa, wb = np.asarray(wa, float).ravel(), np.asarray(wb, float).ravel()
    if abs(wa.sum() - wb.sum()) > mass_tol * max(1.0, wa.sum()):
        raise MassMismatchError(f"total masses differ: {wa.sum()} vs {wb.sum()}")
    if np.any(wa < 0) or np.any(wb < 0):
        raise ValidationError("weights must be non-negative")
    ka, kb = np.flatnonzero(wa > 0), np.flatnonzero(wb > 0)
    A, B = xa[ka], xb[kb]
    a, b = wa[ka], wb[kb] * (wa.sum() / wb.sum())
    n, m = len(a), len(b)
    C = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=-1)
    rows = np.concatenate([np.repeat(np.arange(n), m), n + np.tile(np.arange(m), n)])
    cols = np.concatenate([np.arange(n * m), np.arange(n * m)])
    # one marginal row is implied by the others; keeping it lets roundoff in the
    # totals make presolve report infeasibility
    Aeq = sp.csr_matrix((np.ones(2 * n * m), (rows, cols)), shape=(n + m, n * m))[:-1]
    res = linprog(C.ravel(), A_eq=Aeq, b_eq=np.concatenate([a, b])[:-1], bounds=(0, None),
                  method="highs")
    if res.status != 0:
        raise NumericalError(f"transport LP failed: {res.message}")
    dual = np.append(res.eqlin.marginals, 0.0)
    f, g = dual[:n], dual[n:]
    slack = (f[:, None] + g[None, :] - C).max()
    gap = abs(float(f @ a + g @ b) - res.fun)
    scale = max(1.0, abs(res.fun))
    if slack > cert_tol * scale or gap > cert_tol * scale:
        raise NumericalError("transport LP dual certificate failed")
    plan = np.zeros((len(wa), len(wb)))
    plan[np.ix_(ka, kb)] = res.x.reshape(n, m)
    fa, gb = np.zeros(len(wa)), np.zeros(len(wb))
    fa[ka], gb[kb] = f, g
    return W1Result(float(res.fun), plan, (fa, gb), max(gap, max(slack, 0.0)))


def hminus1_distance(grid: MACGrid, rho1: np.ndarray, rho2: np.ndarray | float = 0.0) -> float:
    """``||grad phi||`` with ``-Lap phi = rho1 - rho2``, ``phi = 0`` on the walls."""
    diff = np.asarray(rho1, float) - rho2
    phi = poisson_solve_dirichlet(grid, diff)
    return math.sqrt(max(float(np.sum(phi * diff)) * grid.cell_volume, 0.0))


@dataclass(frozen=True)
class DecayFit:
    rate: float
    prefactor: float
    r2: float
    t_start: float
    t_end: float
    n_points: int

    def predict(self, t):
        return self.prefactor * np.exp(-self.rate * np.asarray(t))


def fit_decay(t, values, window: tuple[float, float] | None = None, min_points: int = 10) -> DecayFit:
    """Least-squares fit of ``log values = log C - lambda t`` over a window.

    The default window is the second half of the time range.
    """
    t = np.asarray(t, float)
    y = np.asarray(values, float)
    if len(t) < min_points:
        raise ValidationError(f"decay fit needs at least {min_points} points")
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    sel = (t >= window[0]) & (t <= window[1])
    if sel.sum() < 3:
        raise ValidationError("fewer than three points in the fit window")
    ts, ys = t[sel], y[sel]
    if np.any(ys <= 0):
        raise ValidationError("decay fit requires positive values in the window")
    ly = np.log(ys)
    slope, icpt = np.polyfit(ts, ly, 1)
    resid = ly - (icpt + slope * ts)
    sst = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if sst <= 1e-28 * max(1.0, len(ly)) else 1.0 - float(np.sum(resid ** 2)) / sst
    rate = -float(slope)
    if abs(rate) < 1e-14:
        rate = 0.0
    return DecayFit(rate, float(math.exp(icpt)), r2, float(ts[0]), float(ts[-1]), int(sel.sum()))


def gronwall_audit(t, values, rate: float, window: tuple[float, float] | None = None) -> float:
    """Largest ``rate * int_t^T E / E(t)`` over the window (the variant bound predicts <= 1)."""
    t = np.asarray(t, float)
    y = np.asarray(values, float)
    if window is None:
        window = (t[0] + 0.5 * (t[-1] - t[0]), t[-1])
    seg = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
    tail = seg[-1] - seg
    sel = (t >= window[0]) & (t <= window[1]) & (y > 0)
    return float(np.max(rate * tail[sel] / y[sel])) if sel.any() else 0.0


def velocity_tail_bound(series: FlowSnapshotSeries) -> float:
    """Bound on ``int_T^inf ||u||_inf`` by exponential extrapolation of the snapshots."""
    times, _ = series.interval_bounds()
    sups = np.array([f.sup_norm for f in series.fields])
    if sups[-1] == 0.0:
        return 0.0
    half = times >= times[0] + 0.5 * (times[-1] - times[0])
    ts, ss = times[half], sups[half]
    if len(ts) < 2 or np.any(ss <= 0):
        raise TailNotControllableError("not enough positive velocity samples to extrapolate")
    slope, icpt = np.polyfit(ts, np.log(ss), 1)
    if slope >= 0:
        raise TailNotControllableError("velocity sup norm is not decaying")
    lam = -slope
    T = series.t_end
    # fitted envelope may sit below the last sample; use the larger of the two
    amp = max(math.exp(icpt - lam * T), sups[-1])
    return amp / lam


@dataclass
class XinftyResult:
    x_inf: np.ndarray
    survived: np.ndarray
    tail: float
    t_max: float
    tau: np.ndarray


def compute_Xinfty(series: FlowSnapshotSeries, x, v, tail_tol: float | None = None) -> XinftyResult:
    """Asymptotic positions ``X_inf = x + v + int_0^inf Pu(X) ds`` with survival flags.

    The flow is run to the end of the series, where ``X_T + V_T`` equals the
    truncated integral exactly; the remaining tail is bounded by
    :func:`velocity_tail_bound` and must stay below ``tail_tol``
    (default ``1e-4 diam``).  A point survives when it never exits and its
    limit lies inside the domain by more than the tail bound.
    """
    dom = series.domain
    tol = 1e-4 * dom.diameter if tail_tol is None else tail_tol
    tail = velocity_tail_bound(series)
    if tail > tol:
        raise TailNotControllableError(f"velocity tail {tail:.3e} exceeds {tol:.3e}; extend the series")
    ex = exit_time_forward(series, x, v, series.t_end - series.t_start, series.t_start)
    xinf = ex.x_end + ex.v_end
    surv = np.isnan(ex.tau) & (distance_to_boundary(dom, xinf) > tail)
    return XinftyResult(xinf, surv, tail, series.t_end, ex.tau)


def _xinf_raw(series, y, v):
    xT, vT = flow(series, series.t_start, series.t_end, y, v)
    return xT + vT


@dataclass
class ProfileEstimate:
    """Cell densities of the limit profile on a grid."""

    grid: MACGrid
    rho: np.ndarray
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(self.rho.sum() * self.grid.cell_volume)


def profile_pushforward(spec: InitialDataSpec, series: FlowSnapshotSeries, grid: MACGrid,
                        ensemble: ParticleEnsemble | None = None, deposit: str = "cic") -> ProfileEstimate:
    """Deposit surviving sample weights at their asymptotic positions."""
    ens = ensemble if ensemble is not None else sample_initial(spec, series.domain)
    w = ens.weights
    res = compute_Xinfty(series, ens.x_init, ens.v_init)
    keep = res.survived
    xs, ws = res.x_inf[keep], w[keep]
    rho = _deposit(grid, xs, ws, deposit)
    half = [_deposit(grid, xs[k::2], 2 * ws[k::2], deposit) for k in (0, 1)]
    return ProfileEstimate(grid, rho, "pushforward",
                           {"n_samples": len(w), "n_survived": int(keep.sum()), "tail": res.tail,
                            "halves": half, "points": xs, "weights": ws})


def _deposit(grid: MACGrid, x, w, how: str) -> np.ndarray:
    if how == "cic":
        return grid.deposit(None, x, w) / grid.cell_volume
    if how == "ngp":
        lo, h = grid.domain.lo_arr, grid.spacing
        k = np.clip(np.floor((x - lo) / h).astype(int), 0, np.asarray(grid.shape) - 1)
        flat = np.ravel_multi_index(tuple(k.T), grid.shape)
        return np.bincount(flat, weights=w, minlength=int(np.prod(grid.shape))).reshape(grid.shape) \
            / grid.cell_volume
    raise ValidationError(f"unknown deposit {how!r}")


def _velocity_nodes(spec: InitialDataSpec, n_v: int):
    d = spec.dim
    R = spec.v_radius
    if R <= 0:
        raise ValidationError("change of variables needs a velocity law with a density")
    axis = -R + (np.arange(n_v) + 0.5) * (2 * R / n_v)
    nodes = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
    g = np.asarray(spec.velocity.density(nodes))
    keep = g > 0
    if not keep.any():
        raise ValidationError("no velocity node falls in the support; raise n_v")
    # rescale the midpoint weight so the rule integrates the velocity law to one;
    # this removes the error from cells cut by the edge of the support
    wv = 1.0 / float(g[keep].sum())
    return nodes[keep], wv


def invert_xinf(series: FlowSnapshotSeries, x: np.ndarray, v: np.ndarray,
                tol: float = 1e-10, maxiter: int = 60) -> tuple[np.ndarray, int]:
    """Solve ``X_inf(y, v) = x`` for ``y`` by the fixed point ``y <- x - v - Delta(y)``."""
    y = x - v
    for it in range(1, maxiter + 1):
        disp = _xinf_raw(series, y, v) - y - v
        new = x - v - disp
        err = float(np.abs(new - y).max()) if len(y) else 0.0
        y = new
        if err <= tol:
            return y, it
    raise InversionError(f"inversion of the asymptotic map did not converge ({err:.2e})")


def profile_change_of_variables(spec: InitialDataSpec, series: FlowSnapshotSeries, grid: MACGrid,
                                n_v: int = 16, sub: int = 1, fd_step: float = 1e-6,
                                tol: float = 1e-10, maxiter: int = 60) -> ProfileEstimate:
    """``rho_inf(x) = int 1_U f0(X_inf,v^{-1}(x), v) |det D X_inf,v^{-1}(x)| dv``.

    Midpoint rule in velocity (``n_v`` nodes per axis on the support box),
    ``sub^d`` points per cell averaged in space, Jacobians by centred
    differences of the asymptotic map.
    """
    dom = series.domain
    d = grid.dim
    tail = velocity_tail_bound(series)
    if tail > 1e-4 * dom.diameter:
        raise TailNotControllableError("velocity tail too large for the profile")
    reach = series.integral("sup_norm", series.t_start, series.t_end) + tail
    vnodes, wv = _velocity_nodes(spec, n_v)
    h = grid.spacing
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    offs = np.stack(np.meshgrid(*[offs] * d, indexing="ij"), -1).reshape(-1, d) * h
    centers = grid.cell_centers().reshape(-1, d)
    pts = (centers[:, None, :] + offs[None, :, :]).reshape(-1, d)
    owner = np.repeat(np.arange(len(centers)), len(offs))
    sp_law = spec.spatial
    # keep (point, velocity) pairs whose preimage can reach the spatial support
    X, V, O = [], [], []
    for vv in vnodes:
        guess = pts - vv
        if sp_law.kind == "ball":
            gap = np.linalg.norm(guess - np.asarray(sp_law.center), axis=1) - sp_law.radius
        else:
            gap = np.linalg.norm(np.maximum(np.maximum(np.asarray(sp_law.lo) - guess,
                                                       guess - np.asarray(sp_law.hi)), 0), axis=1)
        sel = gap <= reach + 2 * float(np.max(h))
        X.append(pts[sel])
        V.append(np.broadcast_to(vv, (int(sel.sum()), d)))
        O.append(owner[sel])
    X, V, O = np.concatenate(X), np.concatenate(V), np.concatenate(O)
    rho = np.zeros(len(centers))
    iters = 0
    if len(X):
        y, iters = invert_xinf(series, X, V, tol, maxiter)
        f0 = spec.density(y, V)
        act = np.flatnonzero(f0 > 0)
        if act.size:
            ya, va = y[act], V[act]
            jac = np.empty((act.size, d, d))
            for e in range(d):
                step = np.zeros(d)
                step[e] = fd_step
                jac[:, :, e] = (_xinf_raw(series, ya + step, va) - _xinf_raw(series, ya - step, va)) / (2 * fd_step)
            det = np.abs(np.linalg.det(jac))
            surv = compute_Xinfty(series, ya, va).survived
            contrib = np.where(surv, f0[act] / det, 0.0) * wv
            np.add.at(rho, O[act], contrib / len(offs))
    return ProfileEstimate(grid, rho.reshape(grid.shape), "change_of_variables",
                           {"n_v": n_v, "sub": sub, "pairs": len(X), "iterations": iters})


def profile_w1(a: ProfileEstimate | np.ndarray, b: ProfileEstimate | np.ndarray, grid: MACGrid,
               normalize: bool = True) -> float:
    """W1 between two cell-density profiles placed at cell centres.

    With ``normalize`` both are rescaled to unit mass first.
    """
    ra = a.rho if isinstance(a, ProfileEstimate) else np.asarray(a)
    rb = b.rho if isinstance(b, ProfileEstimate) else np.asarray(b)
    ma = np.clip(ra.ravel(), 0, None) * grid.cell_volume
    mb = np.clip(rb.ravel(), 0, None) * grid.cell_volume
    if normalize:
        ma, mb = ma / ma.sum(), mb / mb.sum()
    c = grid.cell_centers().reshape(-1, grid.dim)
    return w1_empirical(c, ma, c, mb, mass_tol=1e-9).cost


@dataclass
class IndicatorReport:
    horizons: np.ndarray
    indicators: np.ndarray
    monotone: bool
    stabilized: bool


def indicator_limit_check(series: FlowSnapshotSeries, x, v, horizons) -> IndicatorReport:
    """Survival indicators ``1[tau+ > T]`` for increasing horizons ``T``."""
    horizons = np.sort(np.asarray(horizons, float))
    ex = exit_time_forward(series, x, v, float(horizons[-1]) - series.t_start, series.t_start)
    tau = np.where(np.isnan(ex.tau), np.inf, ex.tau)
    ind = np.stack([tau > T for T in horizons]).astype(int)
    mono = bool(np.all(np.diff(ind, axis=0) <= 0))
    stab = bool(np.array_equal(ind[-1], ind[-2])) if len(horizons) > 1 else True
    return IndicatorReport(horizons, ind, mono, stab)


__all__ = ["energy_and_dissipation", "w1_monokinetic", "w1_bound", "w1_empirical",
           "hminus1_distance", "fit_decay", "gronwall_audit", "compute_Xinfty",
           "profile_pushforward", "profile_change_of_variables", "profile_w1",
           "indicator_limit_check", "velocity_tail_bound", "invert_xinf", "DecayFit",
           "XinftyResult", "ProfileEstimate", "IndicatorReport", "W1Result"]
