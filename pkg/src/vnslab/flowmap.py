"""Characteristic flow of the extended field, its Jacobian and exit times.

The velocity history is a :class:`FlowSnapshotSeries`: piecewise constant in
time, each snapshot valid from its own time to the next (left endpoint rule).
Every snapshot interval is advanced in a fixed number of drag steps, so a
series captured from a coupled run at stride 1 reproduces the particle
trajectories of that run bit for bit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import integrator
from .errors import BudgetViolationError, CoverageError, ValidationError
from .geometry import Domain, PhaseClass, VelocityField, classify_phase, inside

_TIME_TOL = 1e-12


class FlowSnapshotSeries:
    """Piecewise-constant velocity history.

    Parameters
    ----------
    times : start time of each snapshot
    fields : velocity field valid on ``[times[k], times[k+1])``
    dts : drag step used inside snapshot ``k``
    counts : number of steps in snapshot ``k``
    """

    def __init__(self, times: Sequence[float], fields: Sequence[VelocityField],
                 dts: Sequence[float], counts: Sequence[int], domain: Domain):
        if not (len(times) == len(fields) == len(dts) == len(counts)) or len(times) == 0:
            raise ValidationError("snapshot series arrays must be non-empty and aligned")
        self.times = np.asarray(times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("snapshot times must increase")
        self.fields = list(fields)
        self.dts = np.asarray(dts, dtype=float)
        self.counts = np.asarray(counts, dtype=int)
        self.domain = domain
        starts, sizes, owner = [], [], []
        for k in range(len(self.times)):
            t = self.times[k]
            for _ in range(self.counts[k]):
                starts.append(t)
                sizes.append(self.dts[k])
                owner.append(k)
                t = t + self.dts[k]
        ends = np.asarray(starts[1:] + [t])
        self._starts = np.asarray(starts)
        self._ends = ends
        self._sizes = np.asarray(sizes)
        self._owner = np.asarray(owner)

    @classmethod
    def uniform(cls, domain: Domain, field: VelocityField | Callable[[float], VelocityField],
                t0: float, t1: float, dt: float) -> FlowSnapshotSeries:
        """Series with one snapshot per step of size ``dt`` on ``[t0, t1]``.

        ``field`` may be a fixed field or a function of time returning a field.
        """
        n = max(1, int(round((t1 - t0) / dt)))
        times, fields = [], []
        t = t0
        for _ in range(n):
            times.append(t)
            fields.append(field(t) if callable(field) and not isinstance(field, VelocityField) else field)
            t = t + dt
        return cls(times, fields, [dt] * n, [1] * n, domain)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self._ends[-1])

    def interval_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        ends = np.append(self.times[1:], self.t_end)
        return self.times, ends

    def field_at(self, t: float) -> VelocityField:
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        return self.fields[min(max(k, 0), len(self.fields) - 1)]

    def check_coverage(self, *ts: float) -> None:
        for t in ts:
            if t < self.t_start - _TIME_TOL or t > self.t_end + _TIME_TOL:
                raise CoverageError(f"time {t} outside [{self.t_start}, {self.t_end}]")

    def steps(self, t_from: float, t_to: float) -> list[tuple[float, float, VelocityField]]:
        """Forward steps ``(start, size, field)`` covering ``[t_from, t_to]``."""
        self.check_coverage(t_from, t_to)
        lo = int(np.searchsorted(self._ends, t_from, side="right"))
        hi = int(np.searchsorted(self._starts, t_to, side="left"))
        out = []
        for i in range(lo, hi):
            a, b = self._starts[i], self._ends[i]
            full = a >= t_from and b <= t_to
            s0, s1 = max(a, t_from), min(b, t_to)
            h = self._sizes[i] if full else s1 - s0
            if h <= _TIME_TOL * self._sizes[i]:
                continue
            out.append((float(s0), float(h), self.fields[self._owner[i]]))
        return out

    def integral(self, quantity: str, t_from: float, t_to: float) -> float:
        """Integral over ``[t_from, t_to]`` of ``sup_norm`` or ``grad_sup`` of the fields."""
        return float(sum(h * getattr(f, quantity) for _, h, f in self.steps(t_from, t_to)))


def flow(series: FlowSnapshotSeries, t: float, s: float, x, v):
    """Characteristic ``Z(s; t, x, v)`` of the extended field, forward or backward."""
    x = np.atleast_2d(np.array(x, dtype=float))
    v = np.atleast_2d(np.array(v, dtype=float))
    if s >= t:
        for _, h, f in series.steps(t, s):
            x, v, _ = integrator.step(x, v, f, h)
    else:
        for _, h, f in reversed(series.steps(s, t)):
            x, v, _ = integrator.step_inverse(x, v, f, h)
    return x, v


def _expm_small(A: np.ndarray) -> np.ndarray:
    """Batched matrix exponential by scaling and squaring with a Taylor kernel."""
    norm = np.abs(A).sum(axis=-1).max() if A.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.25))) if norm > 0.25 else 0)
    B = A / 2 ** s
    n = A.shape[-1]
    E = np.broadcast_to(np.eye(n), A.shape).copy()
    term = E.copy()
    for k in range(1, 13):
        term = term @ B / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def _generator(G: np.ndarray) -> np.ndarray:
    n, d, _ = G.shape
    M = np.zeros((n, 2 * d, 2 * d))
    M[:, :d, d:] = np.eye(d)
    M[:, d:, :d] = G
    M[:, d:, d:] = -np.eye(d)
    return M


def phase_jacobian(series: FlowSnapshotSeries, t: float, s: float, x, v,
                   return_path: bool = False):
    """Jacobian ``D Z(s; t, .)`` at ``(x, v)`` (shape ``(N, 2d, 2d)``).

    The linearized system is advanced with the same frozen-field exponential
    step as the flow, using the field gradient at the step's sampling point;
    its determinant is exactly ``e^{-d (s - t)}`` up to roundoff.
    """
    x = np.atleast_2d(np.array(x, dtype=float))
    v = np.atleast_2d(np.array(v, dtype=float))
    n, d = x.shape
    J = np.broadcast_to(np.eye(2 * d), (n, 2 * d, 2 * d)).copy()
    hist = [(t, x.copy(), v.copy(), np.linalg.det(J))] if return_path else None
    if s >= t:
        for t0, h, f in series.steps(t, s):
            c = integrator.coefficients(h)[3]
            G = f.gradient(x + c * v)
            J = _expm_small(h * _generator(G)) @ J
            x, v, _ = integrator.step(x, v, f, h)
            if hist is not None:
                hist.append((t0 + h, x.copy(), v.copy(), np.linalg.det(J)))
    else:
        for t0, h, f in reversed(series.steps(s, t)):
            x, v, _ = integrator.step_inverse(x, v, f, h)
            c = integrator.coefficients(h)[3]
            G = f.gradient(x + c * v)
            J = _expm_small(-h * _generator(G)) @ J
            if hist is not None:
                hist.append((t0, x.copy(), v.copy(), np.linalg.det(J)))
    if return_path:
        return J, hist
    return J


def write_trajectory(path: str | Path, hist, index: int = 0) -> Path:
    """CSV of ``(s, x..., v..., detJ)`` for one point of a recorded Jacobian path."""
    path = Path(path)
    d = hist[0][1].shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)] + ["detJ"])
        for s, x, v, det in hist:
            w.writerow([repr(float(s))] + [repr(float(a)) for a in x[index]]
                       + [repr(float(a)) for a in v[index]] + [repr(float(det[index]))])
    return path


@dataclass
class ExitResult:
    tau: np.ndarray
    x: np.ndarray
    v: np.ndarray
    classes: list
    x_end: np.ndarray
    v_end: np.ndarray


def exit_time_forward(series: FlowSnapshotSeries, x, v, horizon: float, t0: float = 0.0) -> ExitResult:
    """Forward exit times ``tau+`` (nan when no exit before ``t0 + horizon``).

    Exit points are classified on the boundary; by construction the class is
    outgoing or grazing.
    """
    x = np.atleast_2d(np.array(x, dtype=float))
    v = np.atleast_2d(np.array(v, dtype=float))
    dom = series.domain
    n = len(x)
    tau = np.full(n, np.nan)
    xe = np.full_like(x, np.nan)
    ve = np.full_like(v, np.nan)
    alive = inside(dom, x)
    tau[~alive] = t0
    xe[~alive], ve[~alive] = x[~alive], v[~alive]
    for ts, h, f in series.steps(t0, t0 + horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa, va = x[idx], v[idx]
        x1, v1, ub = integrator.step(xa, va, f, h)
        mask, sx = integrator.segment_exit(dom, xa, va, ub, h)
        if mask.any():
            k = idx[mask]
            tau[k] = ts + sx[mask]
            xe[k] = np.clip(integrator.path(xa[mask], va[mask], ub[mask], sx[mask]), dom.lo_arr, dom.hi_arr)
            ve[k] = integrator.path_velocity(va[mask], ub[mask], sx[mask])
            alive[k] = False
        x[idx], v[idx] = x1, v1
    classes: list = [None] * n
    hit = np.flatnonzero(np.isfinite(tau))
    if hit.size:
        cl = classify_phase(dom, xe[hit], ve[hit])
        for i, c in zip(hit, cl):
            classes[i] = c
    return ExitResult(tau, xe, ve, classes, x, v)


def backward_to_zero(series: FlowSnapshotSeries, t: float, x, v, domain: Domain):
    """Trace characteristics back to the series start.

    Returns the foot points and a mask of points whose backward path stayed
    inside the open domain.
    """
    x = np.atleast_2d(np.array(x, dtype=float))
    v = np.atleast_2d(np.array(v, dtype=float))
    ok = inside(domain, x)
    for _, h, f in reversed(series.steps(series.t_start, t)):
        xp, vp, ub = integrator.step_inverse(x, v, f, h)
        idx = np.flatnonzero(ok)
        if idx.size:
            mask, _ = integrator.segment_exit(domain, xp[idx], vp[idx], ub[idx], h)
            ok[idx[mask]] = False
        x, v = xp, vp
    return x, v, ok


def injectivity_margin(delta: float, t: float) -> float:
    """Lower bound on ``|Gamma(v1) - Gamma(v2)| / |v1 - v2|`` under a gradient budget ``delta``."""
    return (1.0 - 9.0 * delta * math.exp(delta)) * math.exp(t)


@dataclass
class StraighteningResult:
    gamma: np.ndarray
    jacobian: np.ndarray
    det: np.ndarray
    budget: float


def straightening_map(series: FlowSnapshotSeries, t: float, x, v) -> StraighteningResult:
    """``Gamma_{t,x}(v) = V(0; t, x, v)`` with its velocity Jacobian.

    Requires the measured budget ``delta = int_0^t ||grad u||_inf`` to satisfy
    ``delta e^delta <= 1/9``.
    """
    budget = series.integral("grad_sup", series.t_start, t)
    if budget * math.exp(budget) > 1.0 / 9.0:
        raise BudgetViolationError(f"gradient budget {budget:.4g} exceeds the injectivity bound")
    x = np.atleast_2d(np.array(x, dtype=float))
    v = np.atleast_2d(np.array(v, dtype=float))
    d = x.shape[1]
    J = phase_jacobian(series, t, series.t_start, x, v)
    _, v0 = flow(series, t, series.t_start, x, v)
    Jv = J[:, d:, d:]
    return StraighteningResult(v0, Jv, np.linalg.det(Jv), budget)


__all__ = ["FlowSnapshotSeries", "flow", "phase_jacobian", "exit_time_forward",
           "backward_to_zero", "straightening_map", "injectivity_margin", "write_trajectory",
           "ExitResult", "StraighteningResult", "PhaseClass"]
