"""The coupled fluid-particle time loop.

Per step, in this order: deposit moments from the current ensemble, form the
drag force, advance the fluid, push and absorb particles with the pre-step
velocity, record diagnostics.  The moments and force formed for the record
at the end of a step are reused by the next step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import History, moment_interpolation_audit, record_step
from .fluid import FluidParams, FluidState, step_fluid
from .flowmap import FlowSnapshotSeries
from .geometry import Domain, GridField, MACGrid
from .kinetic import (KineticMoments, ParticleEnsemble, absorb, brinkman_force,
                      deposit_moments, push_particles)


@dataclass
class LoopOptions:
    snapshot_stride: int | None = 1
    kinetic_only: bool = False
    q: float | None = 4.0
    nq_every: int = 25
    nq_points: int = 400
    audit_every: int = 1
    rho_every: int | None = None
    ref_point: tuple[float, ...] | None = None


class CoupledSolver:
    def __init__(self, fluid: FluidState, ensemble: ParticleEnsemble, params: FluidParams,
                 domain: Domain, options: LoopOptions | None = None):
        self.fluid = fluid
        self.ens = ensemble
        self.params = params
        self.domain = domain
        self.grid: MACGrid = fluid.grid
        self.opt = options or LoopOptions()
        self.nstep = 0
        self.t = fluid.t
        self.history = History()
        self.support_radius: list[float] = []
        self.rho_snapshots: list[tuple[float, np.ndarray]] = []
        self._snap_steps: list[int] = []
        self._snap_times: list[float] = []
        self._snap_fields: list[GridField] = []
        self._last_nq = math.nan
        self._observe()

    def _moments(self) -> KineticMoments:
        o = self.opt
        want_nq = o.q is not None and o.nq_every > 0 and self.nstep % o.nq_every == 0
        mom = deposit_moments(self.ens, self.grid, q=o.q if want_nq else None, nq_points=o.nq_points)
        if want_nq:
            self._last_nq = mom.nq
        else:
            mom.nq = self._last_nq
        return mom

    def _observe(self) -> None:
        self.moments = self._moments()
        self.force = None if self.opt.kinetic_only else brinkman_force(self.moments, self.fluid)
        record_step(self.history, self.t, self.ens, None if self.opt.kinetic_only else self.fluid,
                    self.moments, self.force)
        if self.opt.audit_every and self.nstep % self.opt.audit_every == 0:
            self.history.interp_ratio.append(moment_interpolation_audit(self.ens, self.grid).max_ratio)
        if self.opt.ref_point is not None:
            self.support_radius.append(self.ens.support_radius(self.opt.ref_point))
        if self.opt.rho_every and self.nstep % self.opt.rho_every == 0:
            self.rho_snapshots.append((self.t, self.moments.rho.copy()))

    def step(self) -> None:
        dt = self.params.dt
        stride = self.opt.snapshot_stride
        field = self.fluid.field()
        if stride and self.nstep % stride == 0:
            self._snap_steps.append(self.nstep)
            self._snap_times.append(self.t)
            self._snap_fields.append(field)
        if self.opt.kinetic_only:
            new_fluid = FluidState(self.grid, self.fluid.u, self.fluid.p, self.t + dt)
        else:
            new_fluid = step_fluid(self.fluid, self.force, self.params)
        push_particles(self.ens, field, dt)
        absorb(self.ens, self.domain)
        self.fluid = new_fluid
        self.t = self.ens.t
        self.fluid.t = self.t
        self.nstep += 1
        self._observe()

    def run(self, horizon: float | None = None, nsteps: int | None = None, callback=None) -> History:
        if nsteps is None:
            nsteps = int(round(horizon / self.params.dt))
        for _ in range(nsteps):
            self.step()
            if callback is not None:
                callback(self)
        return self.history

    def series(self) -> FlowSnapshotSeries:
        """Snapshot series covering ``[t0, t]`` with the solver's own step size."""
        if not self._snap_steps:
            raise ValueError("no snapshots recorded")
        bounds = self._snap_steps + [self.nstep]
        counts = [b - a for a, b in zip(bounds[:-1], bounds[1:])]
        keep = [i for i, c in enumerate(counts) if c > 0]
        return FlowSnapshotSeries([self._snap_times[i] for i in keep],
                                  [self._snap_fields[i] for i in keep],
                                  [self.params.dt] * len(keep), [counts[i] for i in keep],
                                  self.domain)
