"""Energy-balance residual and decay rates under grid and time-step refinement.

Runs the confinement scenario at several resolutions with dt proportional to h
and prints the worst relative residual |E(t) + int D - E(0)| / E(0).

    python scripts/refinement_study.py --horizon 1 --particles 10000
"""
import argparse

import numpy as np

from vnslab.asymptotics import fit_decay
from vnslab.coupling import LoopOptions
from vnslab.fluid import FluidParams
from vnslab.scenarios import default_scenario, make_solver


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=float, default=1.0)
    ap.add_argument("--particles", type=int, default=10000)
    ap.add_argument("--resolutions", type=int, nargs="+", default=[32, 64, 128])
    args = ap.parse_args()
    print(f"{'n':>5} {'dt':>9} {'residual/E0':>12} {'lambda_E':>9} {'lambda_W1':>9}")
    for n in args.resolutions:
        dt = 0.256 / n
        cfg = default_scenario("confinement", n_particles=args.particles)
        s = make_solver(cfg, FluidParams((n, n), dt), LoopOptions(q=None, snapshot_stride=None))
        h = s.run(args.horizon)
        res = float(np.abs(h.column("energy_residual")).max() / h[0].E)
        le = fit_decay(h.t, h.column("E")).rate
        lw = fit_decay(h.t, h.column("M1")).rate
        print(f"{n:>5} {dt:>9.2e} {res:>12.3e} {le:>9.4f} {lw:>9.4f}")


if __name__ == "__main__":
    main()
