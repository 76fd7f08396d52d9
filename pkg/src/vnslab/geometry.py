"""Box domains, phase-space boundary classes and staggered-grid fields.

A velocity field on the MAC grid stores component ``c`` on the faces normal
to axis ``c``.  Extension to all of space is the multilinear interpolant of
the face values together with zero values on the walls, set to zero outside
the domain.  That extension is continuous and Lipschitz with constant bounded
by the largest discrete difference quotient, which is what the flow-map code
relies on.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

GRAZING_TOL = 1e-12


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``prod_c (lo_c, hi_c)``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    ref_point: tuple[float, ...] | None = None

    def __post_init__(self):
        lo = tuple(float(a) for a in self.lo)
        hi = tuple(float(b) for b in self.hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ValidationError("domain must have dimension 2 or 3")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValidationError("domain needs lo < hi on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.ref_point is not None:
            a = tuple(float(c) for c in self.ref_point)
            if len(a) != len(lo):
                raise ValidationError("reference point has the wrong dimension")
            object.__setattr__(self, "ref_point", a)
            if not inside(self, a):
                raise ValidationError("reference point must lie inside the domain")

    @classmethod
    def unit(cls, dim: int = 2, ref_point=None) -> Domain:
        if ref_point is None:
            ref_point = (0.5,) * dim
        return cls((0.0,) * dim, (1.0,) * dim, ref_point)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @cached_property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo)

    @cached_property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi)

    @property
    def lengths(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.lengths))

    @property
    def a(self) -> np.ndarray:
        if self.ref_point is None:
            return 0.5 * (self.lo_arr + self.hi_arr)
        return np.asarray(self.ref_point)

    @cached_property
    def circumradius(self) -> float:
        """Largest distance from the reference point to the closure of the box."""
        a = self.a
        far = np.maximum(np.abs(a - self.lo_arr), np.abs(self.hi_arr - a))
        return float(np.linalg.norm(far))


def _points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def inside(domain: Domain, x) -> np.ndarray | bool:
    """Strict interior membership."""
    p, single = _points(x)
    res = np.all((p > domain.lo_arr) & (p < domain.hi_arr), axis=-1)
    return bool(res[0]) if single else res


def distance_to_boundary(domain: Domain, x) -> np.ndarray | float:
    """Signed Euclidean distance to the boundary, positive inside."""
    p, single = _points(x)
    lo, hi = domain.lo_arr, domain.hi_arr
    interior = np.minimum(p - lo, hi - p).min(axis=-1)
    excess = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    exterior = np.linalg.norm(excess, axis=-1)
    res = np.where(exterior > 0.0, -exterior, interior)
    return float(res[0]) if single else res


def boundary_normal(domain: Domain, x, tol: float = 1e-8) -> np.ndarray:
    """Outward unit normal of the nearest face.

    Ties between faces (edges and corners) go to the lowest axis index.
    Raises ValidationError when a point is farther than ``tol`` from the
    boundary.
    """
    p, single = _points(x)
    d = domain.dim
    gaps = np.empty((p.shape[0], 2 * d))
    gaps[:, 0::2] = np.abs(p - domain.lo_arr)
    gaps[:, 1::2] = np.abs(domain.hi_arr - p)
    face = np.argmin(gaps, axis=1)
    dist = np.abs(distance_to_boundary(domain, p))
    if np.any(dist > tol):
        raise ValidationError("point is not on the boundary")
    n = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    n[rows, face // 2] = np.where(face % 2 == 0, -1.0, 1.0)
    return n[0] if single else n


class PhaseClass(enum.Enum):
    OUTGOING = "+"
    INCOMING = "-"
    GRAZING = "0"


def classify_phase(domain: Domain, x, v, tol: float = 1e-8):
    """Outgoing, incoming or grazing class of boundary phase points.

    Grazing means ``|v.n| <= 1e-12 (1 + |v|)``.
    """
    p, single = _points(x)
    vel = np.atleast_2d(np.asarray(v, dtype=float))
    n = np.atleast_2d(boundary_normal(domain, p, tol))
    vn = np.sum(vel * n, axis=-1)
    graze = np.abs(vn) <= GRAZING_TOL * (1.0 + np.linalg.norm(vel, axis=-1))
    out = []
    for g, s in zip(graze, vn):
        if g:
            out.append(PhaseClass.GRAZING)
        else:
            out.append(PhaseClass.OUTGOING if s > 0 else PhaseClass.INCOMING)
    return out[0] if single else out


@dataclass(frozen=True)
class MACGrid:
    """Uniform cell grid on a box with face-staggered velocity storage."""

    domain: Domain
    shape: tuple[int, ...]

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != self.domain.dim:
            raise ValidationError("grid shape does not match the domain dimension")
        if min(shape) < 4:
            raise ValidationError("grid resolution must be at least 4 per axis")
        object.__setattr__(self, "shape", shape)

    @classmethod
    def uniform(cls, domain: Domain, n: int) -> MACGrid:
        return cls(domain, (n,) * domain.dim)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @cached_property
    def spacing(self) -> np.ndarray:
        return self.domain.lengths / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def hmin(self) -> float:
        return float(self.spacing.min())

    def component_shape(self, c: int) -> tuple[int, ...]:
        s = list(self.shape)
        s[c] += 1
        return tuple(s)

    def axis_nodes(self, c: int | None, e: int) -> np.ndarray:
        """Coordinates along axis ``e`` of the storage nodes of component ``c``."""
        lo, h, n = self.domain.lo[e], self.spacing[e], self.shape[e]
        if c == e:
            return lo + h * np.arange(n + 1)
        return lo + h * (np.arange(n) + 0.5)

    def cell_centers(self) -> np.ndarray:
        axes = [self.axis_nodes(None, e) for e in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def face_points(self, c: int) -> np.ndarray:
        axes = [self.axis_nodes(c, e) for e in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def stencil(self, c: int | None, x: np.ndarray):
        """Multilinear stencil of points ``x`` (N, d).

        For a face component the array is padded with one wall node on both
        ends of every tangential axis; the returned indices address that
        padded array.  ``c=None`` gives the cell-centred stencil with weights
        beyond the outermost centres folded back onto them.

        Returns per-axis lower index, fraction and node spacing, plus the
        padded shape.
        """
        lo, h = self.domain.lo_arr, self.spacing
        idx, frac, span = [], [], []
        pshape = []
        for e in range(self.dim):
            n = self.shape[e]
            s = (x[:, e] - lo[e]) / h[e]
            if c == e:
                k = np.clip(np.floor(s), 0, n - 1).astype(np.int64)
                f = s - k
                w = np.full_like(s, h[e])
                pshape.append(n + 1)
            elif c is None:
                t = s - 0.5
                k = np.floor(t)
                f = t - k
                k = k.astype(np.int64)
                w = np.full_like(s, h[e])
                pshape.append(n)
            else:
                t = s - 0.5
                k = np.floor(t).astype(np.int64) + 1
                low = s < 0.5
                high = s >= n - 0.5
                k = np.where(low, 0, np.where(high, n, k))
                left = np.where(k == 0, 0.0, k - 0.5)
                right = np.where(k == n, float(n), k + 0.5)
                f = (s - left) / (right - left)
                w = (right - left) * h[e]
                pshape.append(n + 2)
            idx.append(k)
            frac.append(f)
            span.append(w)
        return idx, frac, span, tuple(pshape)

    def corners(self, c: int | None, x: np.ndarray):
        """Yield flat indices into the padded array and weights, per corner."""
        idx, frac, _, pshape = self.stencil(c, x)
        d = self.dim
        for bits in range(1 << d):
            ind = []
            w = np.ones(x.shape[0])
            for e in range(d):
                b = (bits >> e) & 1
                k = idx[e] + b
                if c is None:
                    k = np.clip(k, 0, pshape[e] - 1)
                ind.append(k)
                w = w * (frac[e] if b else 1.0 - frac[e])
            yield np.ravel_multi_index(tuple(ind), pshape), w, pshape

    def deposit(self, c: int | None, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Transpose of interpolation: scatter weights onto grid nodes.

        For face components the weight landing on wall nodes is dropped.
        """
        total = None
        pshape = None
        for flat, cw, pshape in self.corners(c, x):
            part = np.bincount(flat, weights=w * cw, minlength=int(np.prod(pshape)))
            total = part if total is None else total + part
        arr = total.reshape(pshape)
        if c is None:
            return arr
        crop = tuple(slice(None) if e == c else slice(1, -1) for e in range(self.dim))
        return np.ascontiguousarray(arr[crop])

    def pad_component(self, c: int, u: np.ndarray) -> np.ndarray:
        pad = [(0, 0) if e == c else (1, 1) for e in range(self.dim)]
        return np.pad(u, pad)


class VelocityField:
    """Interface: ``sample(x)``, ``gradient(x)``, ``sup_norm``, ``grad_sup``."""

    dim: int

    def sample(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class GridField(VelocityField):
    """Extended velocity field backed by MAC face arrays."""

    def __init__(self, grid: MACGrid, components: Sequence[np.ndarray]):
        self.grid = grid
        self.dim = grid.dim
        self.components = tuple(np.asarray(u, dtype=float) for u in components)
        for c, u in enumerate(self.components):
            if u.shape != grid.component_shape(c):
                raise ValidationError(f"component {c} has shape {u.shape}")
        self._padded = [
            grid.pad_component(c, u).ravel() for c, u in enumerate(self.components)
        ]

    def sample(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        mask = inside(self.grid.domain, x)
        if not mask.any():
            return out
        xi = x[mask] if not mask.all() else x
        vals = np.zeros_like(xi)
        for c in range(self.dim):
            acc = np.zeros(xi.shape[0])
            for flat, w, _ in self.grid.corners(c, xi):
                acc += w * self._padded[c][flat]
            vals[:, c] = acc
        out[mask] = vals
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """Exact derivative of the multilinear interpolant, ``[..., c, e] = d u_c / d x_e``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        out = np.zeros((x.shape[0], d, d))
        mask = inside(self.grid.domain, x)
        if not mask.any():
            return out
        xi = x[mask]
        g = np.zeros((xi.shape[0], d, d))
        for c in range(d):
            idx, frac, span, pshape = self.grid.stencil(c, xi)
            for bits in range(1 << d):
                ind = []
                wts = []
                for e in range(d):
                    b = (bits >> e) & 1
                    ind.append(idx[e] + b)
                    wts.append(frac[e] if b else 1.0 - frac[e])
                val = self._padded[c][np.ravel_multi_index(tuple(ind), pshape)]
                for e in range(d):
                    sign = 1.0 if (bits >> e) & 1 else -1.0
                    w = sign / span[e]
                    for e2 in range(d):
                        if e2 != e:
                            w = w * wts[e2]
                    g[:, c, e] += w * val
        out[mask] = g
        return out

    def differences(self):
        """Discrete difference quotients ``D[c][e]`` and their spacings along ``e``."""
        grid = self.grid
        h = grid.spacing
        res = []
        for c, u in enumerate(self.components):
            row = []
            for e in range(self.dim):
                if e == c:
                    diff = np.diff(u, axis=e) / h[e]
                    sp = np.full(grid.shape[e], h[e])
                else:
                    padded = np.pad(u, [(1, 1) if a == e else (0, 0) for a in range(self.dim)])
                    sp = np.full(grid.shape[e] + 1, h[e])
                    sp[0] = sp[-1] = 0.5 * h[e]
                    shape = [1] * self.dim
                    shape[e] = -1
                    diff = np.diff(padded, axis=e) / sp.reshape(shape)
                row.append((diff, sp))
            res.append(row)
        return res

    @cached_property
    def sup_norm(self) -> float:
        """Upper bound of ``sup |Pu|`` (Euclidean norm of per-component maxima)."""
        m = [np.abs(u).max() if u.size else 0.0 for u in self.components]
        return float(np.sqrt(np.sum(np.square(m))))

    @cached_property
    def grad_sup(self) -> float:
        """Upper bound of ``sup |D(Pu)|`` in Frobenius norm."""
        tot = 0.0
        for row in self.differences():
            for diff, _ in row:
                tot += float(np.abs(diff).max()) ** 2
        return math.sqrt(tot)

    def l2_norm(self) -> float:
        vol = self.grid.cell_volume
        return math.sqrt(sum(float(np.sum(u * u)) for u in self.components) * vol)

    def grad_l2_norm(self) -> float:
        """``||grad u||`` matching the discrete Dirichlet energy ``<u, -L u>``."""
        h = self.grid.spacing
        tot = 0.0
        for row in self.differences():
            for e, (diff, sp) in enumerate(row):
                shape = [1] * self.dim
                shape[e] = -1
                other = float(np.prod(np.delete(h, e)))
                tot += float(np.sum(diff * diff * sp.reshape(shape))) * other
        return math.sqrt(tot)


class FunctionField(VelocityField):
    """Analytic velocity field restricted to the domain (zero outside)."""

    def __init__(self, domain: Domain, func: Callable[[np.ndarray], np.ndarray],
                 grad: Callable[[np.ndarray], np.ndarray] | None = None,
                 sup_norm: float | None = None, grad_sup: float | None = None):
        self.domain = domain
        self.dim = domain.dim
        self.func = func
        self.grad = grad
        self._sup = sup_norm
        self._grad_sup = grad_sup

    def sample(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        mask = inside(self.domain, x)
        if mask.any():
            out[mask] = self.func(x[mask])
        return out

    def gradient(self, x, eps: float = 1e-6):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = self.dim
        out = np.zeros((x.shape[0], d, d))
        mask = inside(self.domain, x)
        if not mask.any():
            return out
        xi = x[mask]
        if self.grad is not None:
            out[mask] = self.grad(xi)
            return out
        g = np.zeros((xi.shape[0], d, d))
        for e in range(d):
            step = np.zeros(d)
            step[e] = eps
            g[:, :, e] = (self.func(xi + step) - self.func(xi - step)) / (2 * eps)
        out[mask] = g
        return out

    def _probe(self, n=41):
        axes = [np.linspace(lo, hi, n) for lo, hi in zip(self.domain.lo, self.domain.hi)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.dim)
        return pts[inside(self.domain, pts)]

    @cached_property
    def sup_norm(self) -> float:
        if self._sup is not None:
            return float(self._sup)
        return float(np.linalg.norm(self.func(self._probe()), axis=-1).max())

    @cached_property
    def grad_sup(self) -> float:
        if self._grad_sup is not None:
            return float(self._grad_sup)
        g = self.gradient(self._probe())
        return float(np.sqrt(np.sum(g * g, axis=(1, 2))).max())


@dataclass
class ZeroField(VelocityField):
    dim: int
    sup_norm: float = field(default=0.0, init=False)
    grad_sup: float = field(default=0.0, init=False)

    def sample(self, x):
        return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=float)))

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros((x.shape[0], self.dim, self.dim))


def extend_field(u: VelocityField, x) -> np.ndarray:
    """Evaluate the zero-extended field at arbitrary points."""
    p, single = _points(x)
    out = u.sample(p)
    return out[0] if single else out
