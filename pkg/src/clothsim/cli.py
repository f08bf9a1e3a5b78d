"""Command-line entry points.

The <config> argument is a YAML scene file path, or the name of a bundled
scene (wind, slope, napkin-bowl, sphere-sysid, wind-sysid).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import SceneConfig, parse_config
from .errors import ClothSimError
from .runners import run_benchmark, run_gradcheck, run_optimize, run_simulate
from .scenes import bundled_config, bundled_scene_names


def _load_config(spec: str) -> SceneConfig:
    path = Path(spec)
    if path.exists():
        return parse_config(path.read_text(encoding="utf-8"))
    if spec in bundled_scene_names():
        return bundled_config(spec)
    raise ClothSimError(
        f"{spec!r} is neither a config file nor a bundled scene {bundled_scene_names()}"
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="clothsim",
        description="Differentiable cloth simulation with dry frictional contact.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="roll a scene forward and write outputs")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.add_argument("--write-objs", action="store_true", help="write one OBJ per frame")

    p = sub.add_parser("gradcheck", help="compare adjoint gradients with finite differences")
    p.add_argument("config")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.add_argument("--out", default=None)
    p.add_argument("--params", default=None, help="comma-separated parameter names")
    p.add_argument("--tolerance", type=float, default=1e-2, help="relative-error bound for the exit code")

    p = sub.add_parser("benchmark", help="iterative vs direct adjoint solver timings")
    p.add_argument("config")
    p.add_argument("--resolutions", default="12,24,48")
    p.add_argument("--epsilons", default="1e-4,1e-6")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("optimize", help="system identification against a synthetic target")
    p.add_argument("config")
    p.add_argument("--task", required=True, choices=["friction_sysid", "wind_material_sysid"])
    p.add_argument("--method", default="both", choices=["lbfgsb", "es", "both"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        if args.command == "simulate":
            out = run_simulate(config, out_dir=args.out, write_objs=args.write_objs)
            print(
                f"{out['name']}: {out['steps']} steps, final area ratio "
                f"{out['final_area_ratio']:.4f}, max complementarity "
                f"{out['max_complementarity']:.2e}, converged={out['all_converged']}"
            )
            return 0
        if args.command == "gradcheck":
            params = args.params.split(",") if args.params else None
            report = run_gradcheck(config, params=params, fd_step=args.fd_step, out_dir=args.out)
            for row in report["rows"]:
                print(
                    f"{row['parameter']:>24s}  adjoint={row['grad_adjoint_1e6']:+.6e}  "
                    f"fd={row['grad_fd']:+.6e}  rel={row['rel_error']:.2e}  "
                    f"stable={row['case_stable']}"
                )
            print(f"max relative error: {report['max_rel_error']:.3e}")
            bad = report["max_rel_error"] > args.tolerance or not report["all_stable"]
            return 1 if bad else 0
        if args.command == "benchmark":
            resolutions = [int(r) for r in args.resolutions.split(",")]
            epsilons = [float(e) for e in args.epsilons.split(",")]
            rows = run_benchmark(
                config, resolutions=resolutions, epsilons=epsilons, steps=args.steps, out_dir=args.out
            )
            for r in rows:
                eps = f"{r.epsilon:g}" if r.epsilon else "-"
                speed = f"{r.speedup:.1f}x" if r.speedup else "-"
                print(
                    f"{r.resolution:>3d}x{r.resolution:<3d} {r.solver:>7s}({eps:>5s})  "
                    f"{r.backprop_time_s:8.3f}s  dP {r.share_delta_P:5.1f}%  "
                    f"jac {r.share_jacobi:5.1f}%  dir {r.share_direct:5.1f}%  "
                    f"contact {r.share_contact:5.1f}%  other {r.share_other:5.1f}%  "
                    f"fail {r.failure_pct:4.1f}%  speedup {speed}"
                )
            return 0
        if args.command == "optimize":
            res = run_optimize(
                config, task=args.task, method=args.method, seed=args.seed, out_dir=args.out
            )
            for name in ("lbfgsb", "es"):
                if name in res:
                    r = res[name]
                    print(
                        f"{name}: loss {r['loss']:.6e}  evals {r['evaluations']}  "
                        f"forward {r['forward_steps']}  backward {r['backward_steps']}"
                    )
                    for k, v in r["theta"].items():
                        print(f"    {k} = {v:+.6g}   (truth {res['truth'][k]:+.6g})")
            return 0
    except ClothSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
