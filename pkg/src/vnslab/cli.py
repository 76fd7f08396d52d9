"""Command line entry point ``vnslab``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import NumericalError, ValidationError
from .runner import RunConfig, replay, run

SCENARIO_DEFAULTS = {
    "confinement": {"epsilon": 0.2, "R": 0.1},
    "escape": {"epsilon": 0.1, "T": 1.0},
    "mixed": {"epsilon": 0.2, "T": 1.0, "alpha": 0.3},
}


def scenario_config(kind: str, alpha: float | None = None, out: str | None = None,
                    horizon: float | None = None) -> RunConfig:
    sc = dict(SCENARIO_DEFAULTS[kind], kind=kind)
    if alpha is not None:
        if kind != "mixed":
            raise ValidationError("--alpha only applies to the mixed scenario")
        sc["alpha"] = alpha
    data = {"scenario": sc, "fluid": {"u0_amplitude": 0.02},
            "run": {"horizon": horizon or (2.0 if kind == "confinement" else 1.5),
                    "output_dir": out or f"vnslab_{kind}"}}
    return RunConfig.from_dict(data)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vnslab", description="Particle-fluid drag simulations with absorbing walls")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run from a TOML or JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override run.output_dir")
    s = sub.add_parser("scenario", help="run a built-in scenario")
    s.add_argument("kind", choices=sorted(SCENARIO_DEFAULTS))
    s.add_argument("--alpha", type=float)
    s.add_argument("--out")
    s.add_argument("--horizon", type=float)
    rp = sub.add_parser("replay", help="post-process a finished run")
    rp.add_argument("--manifest", required=True)
    rp.add_argument("--task", required=True, choices=["xinfty", "profiles", "representation-check"])
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = RunConfig.load(args.config)
            man = run(cfg, args.out)
            print(f"run finished: {man.status}, {len(man.files)} files")
        elif args.command == "scenario":
            cfg = scenario_config(args.kind, args.alpha, args.out, args.horizon)
            man = run(cfg)
            print(f"scenario {args.kind} finished: {man.status}")
        else:
            report = replay(args.manifest, args.task)
            print(json.dumps(report, indent=2, default=str))
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
