"""Incompressible Navier-Stokes with unit viscosity on a MAC grid.

One time step is explicit upwind advection, explicit forcing, implicit
diffusion and a Chorin projection.  Diffusion uses TR-BDF2 (a trapezoidal
stage followed by BDF2), which is second order and L-stable; with
``gamma = 2 - sqrt(2)`` both stages share a single matrix.  Normal velocities on the walls are pinned
to zero; tangential no-slip is imposed through mirrored ghost values.  All
linear systems are sparse LU factorizations cached per grid and time step.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DivergenceError, PoissonConvergenceError, ValidationError
from .geometry import Domain, GridField, MACGrid

VISCOSITY = 1.0


class CFLWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class FluidParams:
    resolution: tuple[int, ...]
    dt: float
    div_tol: float = 1e-8
    poisson_tol: float = 1e-8
    poisson_maxiter: int = 5000
    solver: str = "direct"

    def __post_init__(self):
        res = tuple(int(n) for n in np.atleast_1d(self.resolution))
        object.__setattr__(self, "resolution", res)
        if min(res) < 4:
            raise ValidationError("resolution must be at least 4 per axis")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        if self.solver not in ("direct", "cg"):
            raise ValidationError(f"unknown Poisson solver {self.solver!r}")

    def grid(self, domain: Domain) -> MACGrid:
        res = self.resolution
        if len(res) == 1:
            res = res * domain.dim
        return MACGrid(domain, res)


@dataclass
class FluidState:
    grid: MACGrid
    u: tuple[np.ndarray, ...]
    p: np.ndarray
    t: float = 0.0

    @classmethod
    def zeros(cls, grid: MACGrid, t: float = 0.0) -> FluidState:
        u = tuple(np.zeros(grid.component_shape(c)) for c in range(grid.dim))
        return cls(grid, u, np.zeros(grid.shape), t)

    @classmethod
    def from_streamfunction(cls, grid: MACGrid, psi: Callable) -> FluidState:
        """Exactly divergence-free 2D field from a stream function sampled at nodes.

        ``psi`` must vanish on the boundary.
        """
        if grid.dim != 2:
            raise ValidationError("stream functions are two-dimensional")
        lo, h, n = grid.domain.lo_arr, grid.spacing, grid.shape
        xs = lo[0] + h[0] * np.arange(n[0] + 1)
        ys = lo[1] + h[1] * np.arange(n[1] + 1)
        P = psi(*np.meshgrid(xs, ys, indexing="ij"))
        ux = np.diff(P, axis=1) / h[1]
        uy = -np.diff(P, axis=0) / h[0]
        ux[0, :] = ux[-1, :] = 0.0
        uy[:, 0] = uy[:, -1] = 0.0
        return cls(grid, (ux, uy), np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: MACGrid, func: Callable[[np.ndarray], np.ndarray],
                      params: FluidParams | None = None) -> FluidState:
        """Sample ``func`` on faces, zero the normal trace and project."""
        comps = []
        for c in range(grid.dim):
            pts = grid.face_points(c)
            vals = func(pts.reshape(-1, grid.dim))[:, c].reshape(pts.shape[:-1])
            comps.append(_zero_normal(vals, c))
        tol, maxiter, solver = _solver_opts(params)
        proj, _ = _project(grid, comps, tol, maxiter, solver)
        return cls(grid, tuple(proj), np.zeros(grid.shape))

    def field(self) -> GridField:
        return GridField(self.grid, self.u)

    def copy(self) -> FluidState:
        return FluidState(self.grid, tuple(a.copy() for a in self.u), self.p.copy(), self.t)


@dataclass
class ForceField:
    grid: MACGrid
    f: tuple[np.ndarray, ...]

    @classmethod
    def zeros(cls, grid: MACGrid) -> ForceField:
        return cls(grid, tuple(np.zeros(grid.component_shape(c)) for c in range(grid.dim)))

    def l2_sq(self) -> float:
        return sum(float(np.sum(a[_interior(a.ndim, c)] ** 2)) for c, a in enumerate(self.f)) \
            * self.grid.cell_volume


@dataclass(frozen=True)
class FluidNorms:
    l2: float
    grad_l2: float
    linf: float
    grad_linf: float


def mode_streamfunction(domain: Domain, amplitude: float) -> Callable:
    """``A (sin(pi x) sin(pi y))^2`` scaled to the box; vanishes with its gradient on walls."""
    (x0, y0), (x1, y1) = domain.lo[:2], domain.hi[:2]

    def psi(x, y):
        sx = np.sin(np.pi * (x - x0) / (x1 - x0))
        sy = np.sin(np.pi * (y - y0) / (y1 - y0))
        return amplitude * (sx * sy) ** 2
    return psi


def initial_mode(grid: MACGrid, amplitude: float) -> FluidState:
    """Smooth divergence-free initial velocity with no-slip compatible trace."""
    if amplitude == 0.0:
        return FluidState.zeros(grid)
    if grid.dim == 2:
        return FluidState.from_streamfunction(grid, mode_streamfunction(grid.domain, amplitude))
    lo, L = grid.domain.lo_arr, grid.domain.lengths

    def func(p):
        s = np.sin(np.pi * (p - lo) / L)
        c = np.cos(np.pi * (p - lo) / L)
        # curl of (0, 0, psi) with psi = A (sx sy sz)^2
        psi_y = 2 * np.pi / L[1] * s[:, 0] ** 2 * s[:, 1] * c[:, 1] * s[:, 2] ** 2
        psi_x = 2 * np.pi / L[0] * s[:, 0] * c[:, 0] * s[:, 1] ** 2 * s[:, 2] ** 2
        return amplitude * np.stack([psi_y, -psi_x, np.zeros(len(p))], axis=1)
    return FluidState.from_function(grid, func)


def _sl(ndim: int, axis: int, s: slice) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = s
    return tuple(idx)


def _interior(ndim: int, c: int) -> tuple:
    return _sl(ndim, c, slice(1, -1))


def _zero_normal(u: np.ndarray, c: int) -> np.ndarray:
    u = np.array(u, dtype=float)
    u[_sl(u.ndim, c, slice(0, 1))] = 0.0
    u[_sl(u.ndim, c, slice(-1, None))] = 0.0
    return u


def _lap1d(n: int, h: float, kind: str) -> sp.csr_matrix:
    """1D second difference: 'dirichlet' (nodes, n-1 unknowns), 'ghost' (cells,
    mirrored wall) or 'neumann' (cells, zero flux)."""
    if kind == "dirichlet":
        m = n - 1
        diag = np.full(m, -2.0)
    else:
        m = n
        diag = np.full(m, -2.0)
        end = -3.0 if kind == "ghost" else -1.0
        diag[0] += end + 2.0
        diag[-1] += end + 2.0
    off = np.ones(m - 1)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csr") / (h * h)


def kron_sum(ops: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    """Sum of 1D operators acting along each axis of a C-ordered array."""
    sizes = [op.shape[0] for op in ops]
    total = None
    for e, op in enumerate(ops):
        term = sp.identity(1, format="csr")
        for a, n in enumerate(sizes):
            term = sp.kron(term, op if a == e else sp.identity(n), format="csr")
        total = term if total is None else total + term
    return total.tocsr()


@lru_cache(maxsize=32)
def component_laplacian(shape: tuple, spacing: tuple, c: int) -> sp.csr_matrix:
    ops = [_lap1d(n, h, "dirichlet" if e == c else "ghost")
           for e, (n, h) in enumerate(zip(shape, spacing))]
    return kron_sum(ops)


@lru_cache(maxsize=32)
def neumann_laplacian(shape: tuple, spacing: tuple) -> sp.csr_matrix:
    return kron_sum([_lap1d(n, h, "neumann") for n, h in zip(shape, spacing)])


@lru_cache(maxsize=32)
def dirichlet_cell_laplacian(shape: tuple, spacing: tuple) -> sp.csr_matrix:
    return kron_sum([_lap1d(n, h, "ghost") for n, h in zip(shape, spacing)])


GAMMA = 2.0 - math.sqrt(2.0)


@lru_cache(maxsize=32)
def _diffusion_lu(shape: tuple, spacing: tuple, c: int, dt: float):
    L = component_laplacian(shape, spacing, c)
    A = (sp.identity(L.shape[0], format="csc") - (0.5 * GAMMA * dt * VISCOSITY) * L).tocsc()
    return L, spla.splu(A)


def diffuse(grid: MACGrid, c: int, u: np.ndarray, dt: float) -> np.ndarray:
    """TR-BDF2 step of ``u' = Lap u`` for the interior unknowns of component ``c`` (flattened)."""
    L, lu = _diffusion_lu(*_key(grid), c, dt)
    g = GAMMA
    half = lu.solve(u + (0.5 * g * dt * VISCOSITY) * (L @ u))
    return lu.solve((half - (1 - g) ** 2 * u) / (g * (2 - g)))


@lru_cache(maxsize=32)
def _pinned_neumann_lu(shape: tuple, spacing: tuple):
    L = neumann_laplacian(shape, spacing).tolil()
    L[0, :] = 0.0
    L[0, 0] = 1.0
    return spla.splu(L.tocsc())


@lru_cache(maxsize=32)
def _dirichlet_lu(shape: tuple, spacing: tuple):
    return spla.splu((-dirichlet_cell_laplacian(shape, spacing)).tocsc())


def _key(grid: MACGrid):
    return grid.shape, tuple(float(h) for h in grid.spacing)


def divergence(grid: MACGrid, u: Sequence[np.ndarray]) -> np.ndarray:
    h = grid.spacing
    return sum(np.diff(u[c], axis=c) / h[c] for c in range(grid.dim))


def _solve_checked(A, lu, rhs: np.ndarray, tol: float, maxiter: int, solver: str,
                   pinned: bool = False) -> np.ndarray:
    b = rhs.ravel()
    scale = float(np.abs(b).max()) if b.size else 0.0
    if scale == 0.0:
        return np.zeros_like(b)
    if solver == "cg":
        # both operators here are passed as positive semidefinite
        x, info = spla.cg(A, b, rtol=tol * 1e-2, atol=0.0, maxiter=maxiter)
        if info != 0:
            raise PoissonConvergenceError(f"CG did not converge in {maxiter} iterations")
    else:
        bb = b.copy()
        if pinned:
            bb[0] = 0.0
        x = lu.solve(bb)
    res = float(np.abs(A @ x - b).max())
    if not res <= tol * scale:
        raise PoissonConvergenceError(f"Poisson residual {res:.3e} exceeds tolerance")
    return x


def _project(grid: MACGrid, u: Sequence[np.ndarray], tol: float, maxiter: int,
             solver: str) -> tuple[list[np.ndarray], np.ndarray]:
    shape, spacing = _key(grid)
    div = divergence(grid, u)
    # consistent right-hand side: remove roundoff in the mean
    div = div - div.mean()
    A = -neumann_laplacian(shape, spacing)
    lu = _pinned_neumann_lu(shape, spacing) if solver == "direct" else None
    if solver == "cg":
        phi = _solve_checked(A, None, -div, tol, maxiter, solver)
    else:
        phi = _solve_checked(-A, lu, div, tol, maxiter, solver, pinned=True)
    phi = phi.reshape(grid.shape)
    phi -= phi.mean()
    out = []
    for c in range(grid.dim):
        v = np.array(u[c], dtype=float)
        v[_interior(v.ndim, c)] -= np.diff(phi, axis=c) / grid.spacing[c]
        out.append(_zero_normal(v, c))
    return out, phi


def _solver_opts(params: FluidParams | None):
    if params is None:
        return 1e-8, 5000, "direct"
    return params.poisson_tol, params.poisson_maxiter, params.solver


def leray_project(grid: MACGrid, u: Sequence[np.ndarray],
                  params: FluidParams | None = None) -> tuple[np.ndarray, ...]:
    """Discrete Helmholtz-Leray projection onto divergence-free face fields."""
    tol, maxiter, solver = _solver_opts(params)
    out, _ = _project(grid, [_zero_normal(a, c) for c, a in enumerate(u)], tol, maxiter, solver)
    return tuple(out)


def poisson_solve_dirichlet(grid: MACGrid, rhs: np.ndarray,
                            params: FluidParams | None = None) -> np.ndarray:
    """Solve ``-Lap phi = rhs`` at cell centres with ``phi = 0`` on the walls."""
    tol, maxiter, solver = _solver_opts(params)
    shape, spacing = _key(grid)
    A = -dirichlet_cell_laplacian(shape, spacing)
    lu = _dirichlet_lu(shape, spacing) if solver == "direct" else None
    return _solve_checked(A, lu, np.asarray(rhs, float), tol, maxiter, solver).reshape(grid.shape)


def advection(grid: MACGrid, u: Sequence[np.ndarray]) -> list[np.ndarray]:
    """First-order upwind ``(u . grad) u_c`` at the interior faces of each component."""
    d, h = grid.dim, grid.spacing
    out = []
    for c in range(d):
        uc = u[c]
        inner = _interior(d, c)
        acc = np.zeros_like(uc[inner])
        for e in range(d):
            if e == c:
                a = uc[inner]
                gi = uc
            else:
                ue = u[e]
                lo_c, hi_c = _sl(d, c, slice(None, -1)), _sl(d, c, slice(1, None))
                lo_e, hi_e = _sl(d, e, slice(None, -1)), _sl(d, e, slice(1, None))
                a = 0.25 * (ue[lo_c][lo_e] + ue[hi_c][lo_e] + ue[lo_c][hi_e] + ue[hi_c][hi_e])
                first = -uc[_sl(d, e, slice(0, 1))]
                last = -uc[_sl(d, e, slice(-1, None))]
                g = np.concatenate([first, uc, last], axis=e)
                gi = g[inner]
            mid = gi[_sl(d, e, slice(1, -1))]
            back = (mid - gi[_sl(d, e, slice(None, -2))]) / h[e]
            fwd = (gi[_sl(d, e, slice(2, None))] - mid) / h[e]
            acc += np.where(a > 0, a * back, a * fwd)
        out.append(acc)
    return out


def step_fluid(state: FluidState, force: ForceField | None, params: FluidParams) -> FluidState:
    """Advance one time step: advection, forcing, implicit diffusion, projection."""
    grid, dt = state.grid, params.dt
    d = grid.dim
    shape, spacing = _key(grid)
    umax = max(float(np.abs(a).max()) for a in state.u)
    if umax * dt > grid.hmin:
        warnings.warn(f"CFL number {umax * dt / grid.hmin:.2f} exceeds 1", CFLWarning)
    adv = advection(grid, state.u)
    star = []
    for c in range(d):
        inner = _interior(d, c)
        rhs = state.u[c][inner] - dt * adv[c]
        if force is not None:
            rhs = rhs + dt * force.f[c][inner]
        sol = diffuse(grid, c, rhs.ravel(), dt)
        full = np.zeros(grid.component_shape(c))
        full[inner] = sol.reshape(rhs.shape)
        star.append(full)
    new_u, phi = _project(grid, star, params.poisson_tol, params.poisson_maxiter, params.solver)
    div = divergence(grid, new_u)
    ref = float(np.abs(divergence(grid, star)).max())
    if float(np.abs(div).max()) > params.div_tol * (1.0 + ref):
        raise DivergenceError("projection left a divergence above tolerance")
    return FluidState(grid, tuple(new_u), phi / dt, state.t + dt)


def fluid_norms(state: FluidState) -> FluidNorms:
    f = state.field()
    return FluidNorms(f.l2_norm(), f.grad_l2_norm(), f.sup_norm, f.grad_sup)


def poincare_eigenvalue(grid: MACGrid) -> float:
    """Smallest eigenvalue of the discrete vector Laplacian with no-slip walls."""
    return float(sum(4.0 / h ** 2 * math.sin(math.pi / (2 * n)) ** 2
                     for n, h in zip(grid.shape, grid.spacing)))


def poincare_constant(grid: MACGrid) -> float:
    """``C_P`` with ``||u||^2 <= C_P ||grad u||^2`` on the grid."""
    return 1.0 / poincare_eigenvalue(grid)


def write_field(path_prefix: str | Path, state: FluidState) -> list[Path]:
    """Dump each component as little-endian float64 (row-major) with a JSON sidecar."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    files = []
    for c, a in enumerate(state.u):
        data = prefix.with_name(f"{prefix.name}_c{c}.bin")
        np.ascontiguousarray(a, dtype="<f8").tofile(data)
        meta = {"dim": state.grid.dim, "shape": list(a.shape), "component": c,
                "time": state.t, "dx": [float(h) for h in state.grid.spacing]}
        side = data.with_suffix(".json")
        side.write_text(json.dumps(meta, indent=2))
        files += [data, side]
    return files


def read_field(path_prefix: str | Path, grid: MACGrid) -> FluidState:
    prefix = Path(path_prefix)
    comps, t = [], 0.0
    for c in range(grid.dim):
        data = prefix.with_name(f"{prefix.name}_c{c}.bin")
        meta = json.loads(data.with_suffix(".json").read_text())
        comps.append(np.fromfile(data, dtype="<f8").reshape(meta["shape"]))
        t = meta["time"]
    return FluidState(grid, tuple(comps), np.zeros(grid.shape), t)
