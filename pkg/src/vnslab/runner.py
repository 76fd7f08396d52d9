"""Run configuration, the end-to-end run, artifact manifest and replay tasks.

A run directory is self-contained: ``replay`` only reads files listed in its
``manifest.json``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .asymptotics import (compute_Xinfty, fit_decay, hminus1_distance, profile_change_of_variables,
                          profile_pushforward, profile_w1)
from .coupling import CoupledSolver, LoopOptions
from .diagnostics import read_timeseries, smallness_report, write_timeseries
from .errors import ConfigError, ValidationError, VNSLabError
from .fluid import FluidParams, initial_mode, write_field
from .flowmap import FlowSnapshotSeries
from .geometry import Domain, GridField, MACGrid
from .kinetic import (InitialDataSpec, Mixture, ParticleEnsemble, SpatialLaw, VelocityLaw,
                      representation_eval, sample_initial)
from .scenarios import (ScenarioConfig, build_confinement, build_escape, build_mixed, evaluate)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict[str, Any] = {
    "domain": {"dim": 2, "lo": [0.0, 0.0], "hi": [1.0, 1.0], "ref_point_a": [0.5, 0.5]},
    "fluid": {"resolution": 64, "dt": 4e-3, "div_tol": 1e-8, "poisson_tol": 1e-8,
              "poisson_maxiter": 5000, "solver": "direct", "u0_amplitude": 0.0,
              "kinetic_only": False},
    "particles": {"count": 10000, "seed": 0},
    "initial_data": {"spatial": "ball", "center": [0.5, 0.5], "radius": 0.2,
                     "velocity": "ball", "v_radius": 0.1, "v_inner": 0.0},
    "run": {"horizon": 1.0, "snapshot_stride": 1, "output_dir": "vnslab_out", "deterministic": True},
    "monitors": {"C1": 1.0, "C2": 1.0, "delta": 0.1, "q": 4.0, "nq_every": 25},
    "metrics": {"profiles": False, "profile_resolution": 24, "n_v": 16, "hminus1_every": 10,
                "representation_time": 0.1},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        unknown = set(data) - set(DEFAULTS) - {"scenario"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            if path.suffix == ".json":
                data = json.loads(path.read_text())
            else:
                data = tomllib.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def __getitem__(self, key: str) -> dict:
        return self.raw[key]

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def domain(self) -> Domain:
        d = self["domain"]
        dom = Domain(tuple(d["lo"]), tuple(d["hi"]), tuple(d["ref_point_a"]))
        if dom.dim != int(d["dim"]):
            raise ConfigError("domain.dim disagrees with lo/hi")
        return dom

    def fluid_params(self) -> FluidParams:
        f = self["fluid"]
        res = f["resolution"]
        res = tuple(res) if isinstance(res, (list, tuple)) else (int(res),) * int(self["domain"]["dim"])
        return FluidParams(res, float(f["dt"]), float(f["div_tol"]), float(f["poisson_tol"]),
                           int(f["poisson_maxiter"]), f["solver"])

    def scenario(self) -> ScenarioConfig | None:
        sc = self.raw.get("scenario")
        if not sc:
            return None
        dom = self.domain()
        a = sc.get("a", self["domain"]["ref_point_a"])
        n, seed = int(self["particles"]["count"]), int(self["particles"]["seed"])
        amp = float(self["fluid"]["u0_amplitude"])
        kind = sc.get("kind")
        if kind == "confinement":
            return build_confinement(dom, a, float(sc["epsilon"]), float(sc["R"]), n, seed, amp)
        if kind == "escape":
            return build_escape(dom, a, float(sc["epsilon"]), float(sc.get("T", 1.0)), n, seed, amp)
        if kind == "mixed":
            return build_mixed(dom, a, float(sc["epsilon"]), float(sc["alpha"]), float(sc.get("T", 1.0)),
                               sc.get("R1"), n, seed, amp)
        raise ConfigError(f"unknown scenario kind {kind!r}")

    def initial_spec(self) -> InitialDataSpec:
        sc = self.scenario()
        if sc is not None:
            return sc.spec
        i = self["initial_data"]
        p = self["particles"]
        if i["spatial"] == "ball":
            sp_law = SpatialLaw("ball", tuple(i["center"]), float(i["radius"]))
        elif i["spatial"] == "box":
            sp_law = SpatialLaw("box", tuple(i["lo"]), 0.0, tuple(i["lo"]), tuple(i["hi"]))
        else:
            raise ConfigError(f"unknown spatial law {i['spatial']!r}")
        if i["velocity"] in ("ball", "annulus"):
            vel = VelocityLaw(float(i["v_radius"]), float(i.get("v_inner", 0.0)))
        elif i["velocity"] == "mixture":
            vel = Mixture(float(i["alpha"]), VelocityLaw(float(i["inner_radius"])),
                          VelocityLaw(float(i["outer_radius"]), float(i["outer_inner"])))
        else:
            raise ConfigError(f"unknown velocity law {i['velocity']!r}")
        return InitialDataSpec(sp_law, vel, int(p["count"]), int(p["seed"]))

    def validate(self) -> None:
        dom = self.domain()
        self.fluid_params().grid(dom)
        spec = self.initial_spec()
        if spec.dim != dom.dim:
            raise ConfigError("initial data dimension differs from the domain")
        if not spec.spatial.fits_in(dom):
            raise ConfigError("initial spatial support must lie inside the domain")
        r = self["run"]
        if not float(r["horizon"]) > 0:
            raise ConfigError("run.horizon must be positive")
        stride = r["snapshot_stride"]
        if stride is not None and int(stride) < 0:
            raise ConfigError("run.snapshot_stride must be non-negative")


@dataclass
class RunManifest:
    config_hash: str
    version: str
    started: float
    finished: float | None = None
    status: str = "running"
    files: list[dict] = field(default_factory=list)
    error: str | None = None

    def add(self, root: Path, path: Path) -> None:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        self.files.append({"path": str(path.relative_to(root)), "sha256": digest})

    def write(self, root: Path) -> Path:
        out = root / "manifest.json"
        data = {"config_hash": self.config_hash, "version": self.version, "started": self.started,
                "finished": self.finished,
                "elapsed": None if self.finished is None else self.finished - self.started,
                "status": self.status, "error": self.error, "files": self.files}
        out.write_text(json.dumps(data, indent=2))
        return out


def _save_series(path: Path, series: FlowSnapshotSeries) -> None:
    comps = {f"u{c}": np.stack([f.components[c] for f in series.fields]) for c in range(series.dim)}
    np.savez(path, times=series.times, dts=series.dts, counts=series.counts, **comps)


def load_series(path: Path, grid: MACGrid) -> FlowSnapshotSeries:
    with np.load(path) as z:
        comps = [z[f"u{c}"] for c in range(grid.dim)]
        fields = [GridField(grid, [comps[c][k] for c in range(grid.dim)]) for k in range(len(z["times"]))]
        return FlowSnapshotSeries(z["times"], fields, z["dts"], z["counts"], grid.domain)


def _write_scalar(prefix: Path, grid: MACGrid, rho: np.ndarray, t: float, name: str) -> list[Path]:
    """Scalar cell field in the field dump format."""
    data = prefix.with_suffix(".bin")
    np.ascontiguousarray(rho, dtype="<f8").tofile(data)
    meta = {"dim": grid.dim, "shape": list(rho.shape), "component": name, "time": t,
            "dx": [float(h) for h in grid.spacing]}
    side = prefix.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2))
    return [data, side]


def run(config: RunConfig, out_dir: str | Path | None = None) -> RunManifest:
    """Execute a configured run and write all artifacts."""
    root = Path(out_dir or config["run"]["output_dir"])
    root.mkdir(parents=True, exist_ok=True)
    man = RunManifest(config.hash(), __version__, time.time())
    try:
        _run_into(config, root, man)
        man.status = "ok"
    except VNSLabError as exc:
        man.status = "failed"
        man.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        man.finished = time.time()
        man.write(root)
    return man


def _run_into(config: RunConfig, root: Path, man: RunManifest) -> None:
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config.raw, indent=2, sort_keys=True))
    man.add(root, cfg_path)
    dom = config.domain()
    params = config.fluid_params()
    grid = params.grid(dom)
    spec = config.initial_spec()
    scen = config.scenario()
    mon, met, r = config["monitors"], config["metrics"], config["run"]
    ens = sample_initial(spec, dom)
    amp = float(config["fluid"]["u0_amplitude"])
    fluid = initial_mode(grid, amp)
    stride = r["snapshot_stride"]
    opts = LoopOptions(snapshot_stride=int(stride) if stride else None,
                       kinetic_only=bool(config["fluid"]["kinetic_only"]),
                       q=float(mon["q"]), nq_every=int(mon["nq_every"]),
                       rho_every=int(met["hminus1_every"]) or None, ref_point=tuple(dom.a))
    solver = CoupledSolver(fluid, ens, params, dom, opts)
    init = root / "initial.npz"
    np.savez(init, x=ens.x_init, v=ens.v_init, units=ens.units, unit_exp=ens.unit_exp,
             component=ens.component)
    man.add(root, init)
    solver.run(float(r["horizon"]))
    hist = solver.history
    for p in (write_timeseries(hist, root / "timeseries.csv"), ens.write_ledger(root / "ledger.csv")):
        man.add(root, p)
    for p in write_field(root / "fields" / "u_final", solver.fluid):
        man.add(root, p)
    small = smallness_report(hist, float(mon["C1"]), float(mon["C2"]), float(mon["delta"]))
    summary = {"smallness": small.to_dict(), "grazing_exits": ens.n_grazing,
               "max_interp_ratio": max(hist.interp_ratio) if hist.interp_ratio else 0.0}
    t, E, M1 = hist.t, hist.column("E"), hist.column("M1")
    fits = {}
    for name, y in (("E", E), ("W1", M1)):
        try:
            f = fit_decay(t, y)
            fits[name] = {"rate": f.rate, "prefactor": f.prefactor, "r2": f.r2,
                          "window": [f.t_start, f.t_end]}
        except ValidationError as exc:
            fits[name] = {"error": str(exc)}
    summary["decay_fits"] = fits
    # long-time profile from X_T + V_T of the alive particles, and its H^-1 series
    _, x, v, w = ens.alive_view()
    rho_lt = grid.deposit(None, x + v, w) / grid.cell_volume
    (root / "profiles").mkdir(exist_ok=True)
    for p in _write_scalar(root / "profiles" / "rho_longtime", grid, rho_lt, solver.t, "rho"):
        man.add(root, p)
    if solver.rho_snapshots:
        hm = root / "hminus1.csv"
        with hm.open("w") as fh:
            fh.write("t,hminus1_to_longtime\n")
            for ts, rho in solver.rho_snapshots:
                fh.write(f"{ts:.17g},{hminus1_distance(grid, rho, rho_lt):.17g}\n")
        man.add(root, hm)
    if scen is not None:
        rep = evaluate(scen, solver)
        man.add(root, rep.write(root / "scenario_report.json"))
        summary["scenario_pass"] = rep.passed
    if opts.snapshot_stride:
        snap = root / "snapshots.npz"
        _save_series(snap, solver.series())
        man.add(root, snap)
    if met["profiles"] and opts.snapshot_stride:
        summary["profiles"] = _profiles(config, root, man, solver.series(), spec, ens)
    sp = root / "summary.json"
    sp.write_text(_dump(summary))
    man.add(root, sp)


def _num(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _strict(o):
    """Replace non-finite floats by the strings ``inf``, ``-inf`` and ``nan`` so the output is strict JSON."""
    if isinstance(o, dict):
        return {k: _strict(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_strict(v) for v in o]
    if isinstance(o, (float, np.floating)):
        o = float(o)
        return o if math.isfinite(o) else str(o)
    if isinstance(o, (np.integer, np.bool_)):
        return o.item()
    return o


def _dump(obj) -> str:
    return json.dumps(_strict(obj), indent=2, allow_nan=False, default=_num)


def _profiles(config: RunConfig, root: Path, man: RunManifest, series, spec, ens) -> dict:
    met = config["metrics"]
    pgrid = MACGrid.uniform(series.domain, int(met["profile_resolution"]))
    n_v = int(met["n_v"])
    push = profile_pushforward(spec, series, pgrid, ensemble=ens)
    cov = profile_change_of_variables(spec, series, pgrid, n_v=n_v)
    cov_coarse = profile_change_of_variables(spec, series, pgrid, n_v=max(2, n_v // 2))
    h0, h1 = push.meta["halves"]
    gap = profile_w1(push, cov, pgrid)
    mc = 0.5 * profile_w1(h0, h1, pgrid)
    quad = profile_w1(cov, cov_coarse, pgrid)
    (root / "profiles").mkdir(exist_ok=True)
    for est in (push, cov):
        for p in _write_scalar(root / "profiles" / f"rho_{est.method}", pgrid, est.rho, series.t_end, "rho"):
            man.add(root, p)
    rep = {"w1_gap": gap, "mc_error": mc, "quadrature_error": quad, "combined_error": mc + quad,
           "agree": gap <= 3 * (mc + quad), "mass_pushforward": push.mass,
           "mass_change_of_variables": cov.mass}
    rp = root / "profiles_report.json"
    rp.write_text(_dump(rep))
    man.add(root, rp)
    return rep


def _load_run(manifest_path: str | Path):
    mp = Path(manifest_path)
    root = mp.parent
    try:
        man = json.loads(mp.read_text())
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read manifest {mp}: {exc}") from exc
    names = {f["path"] for f in man["files"]}
    for need in ("config.json", "initial.npz", "snapshots.npz"):
        if need not in names:
            raise ValidationError(f"run directory lacks {need}; snapshots are required for replay")
    for f in man["files"]:
        digest = hashlib.sha256((root / f["path"]).read_bytes()).hexdigest()
        if digest != f["sha256"]:
            raise ValidationError(f"checksum mismatch for {f['path']}")
    config = RunConfig.from_dict(json.loads((root / "config.json").read_text()))
    grid = config.fluid_params().grid(config.domain())
    series = load_series(root / "snapshots.npz", grid)
    with np.load(root / "initial.npz") as z:
        ens = ParticleEnsemble(z["x"], z["v"], z["units"], unit_exp=int(z["unit_exp"]),
                               component=z["component"], domain=grid.domain)
    return root, config, grid, series, ens


def replay(manifest_path: str | Path, task: str) -> dict:
    """Post-process a finished run from its manifest: ``xinfty``, ``profiles`` or ``representation-check``."""
    root, config, grid, series, ens = _load_run(manifest_path)
    spec = config.initial_spec()
    out = root / "replay"
    out.mkdir(exist_ok=True)
    if task == "xinfty":
        res = compute_Xinfty(series, ens.x_init, ens.v_init)
        d = grid.dim
        header = ",".join([f"x{i}" for i in range(d)] + [f"v{i}" for i in range(d)]
                          + [f"xinf{i}" for i in range(d)] + ["survived"])
        table = np.column_stack([ens.x_init, ens.v_init, res.x_inf, res.survived.astype(float)])
        np.savetxt(out / "xinfty.csv", table, delimiter=",", header=header, comments="", fmt="%.17g")
        w = ens.weights
        report = {"survival_fraction": float(res.survived.mean()),
                  "surviving_mass": float(w[res.survived].sum()), "tail_bound": res.tail,
                  "t_max": res.t_max}
    elif task == "profiles":
        man = RunManifest(config.hash(), __version__, time.time())
        report = _profiles(config, out, man, series, spec, ens)
    elif task == "representation-check":
        report = representation_check(config, root, series, spec)
    else:
        raise ValidationError(f"unknown replay task {task!r}")
    (out / f"{task}.json").write_text(_dump(report))
    return report


def representation_mass(spec: InitialDataSpec, series: FlowSnapshotSeries, t: float,
                        n_x: int, n_v: int, v_radius: float) -> float:
    """Midpoint quadrature of ``f(t, x, v)`` from the representation formula."""
    dom = series.domain
    d = dom.dim
    xs = [lo + (np.arange(n_x) + 0.5) * (hi - lo) / n_x for lo, hi in zip(dom.lo, dom.hi)]
    X = np.stack(np.meshgrid(*xs, indexing="ij"), -1).reshape(-1, d)
    vax = -v_radius + (np.arange(n_v) + 0.5) * (2 * v_radius / n_v)
    Vn = np.stack(np.meshgrid(*[vax] * d, indexing="ij"), -1).reshape(-1, d)
    wx = dom.volume / n_x ** d
    wv = (2 * v_radius / n_v) ** d
    total = 0.0
    for v in Vn:
        vals = representation_eval(spec, series, t, X, np.broadcast_to(v, X.shape), dom)
        total += float(vals.sum())
    return total * wx * wv


def representation_check(config: RunConfig, root: Path, series: FlowSnapshotSeries,
                         spec: InitialDataSpec, n_x: int = 24, n_v: int = 12) -> dict:
    """Compare quadrature of the representation formula with the particle mass at time t."""
    t_req = float(config["metrics"]["representation_time"])
    ts = read_timeseries(root / "timeseries.csv")
    k = int(np.argmin(np.abs(ts["t"] - t_req)))
    t = float(ts["t"][k])
    particle = float(ts["mass_alive"][k])
    reach = series.integral("sup_norm", series.t_start, t)
    vr = spec.v_radius + reach
    fine = representation_mass(spec, series, t, n_x, n_v, vr)
    coarse = representation_mass(spec, series, t, n_x // 2, n_v // 2, vr)
    n = spec.n_particles
    mc = 3.0 * math.sqrt(max(particle * (1 - particle), 1.0 / n) / n)
    quad = abs(fine - coarse)
    tol = mc + quad
    return {"t": t, "particle_mass": particle, "quadrature_mass": fine, "quadrature_coarse": coarse,
            "tolerance": tol, "agree": abs(fine - particle) <= tol}
