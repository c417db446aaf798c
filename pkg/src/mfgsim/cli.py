"""Command-line entry point.

One binary with a subcommand per experiment kind; every subcommand accepts
``--config FILE`` plus flag overrides (flags win).  The default output
directory comes from ``MFGSIM_OUTPUT_DIR`` when set.  Exit codes: 0 on
success, 2 on configuration/validation errors, 3 on numerical aborts.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import ConfigError, ExperimentAbort, ExperimentConfig, run
from .particle_sim import NumericalAbort


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its keys")
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--threads", type=int, dest="threads")


def _add_grid(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--horizon", type=float, dest="horizon")
    parser.add_argument("--n-steps", type=int, dest="n_steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgsim",
        description="Monte Carlo experiments for regime-modulated mean-field "
                    "dynamics and games",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("chain", help="sample chain paths or state frequencies")
    p.add_argument("--generator", help="JSON file holding the rate matrix")
    p.add_argument("--i0", type=int, dest="i0")
    p.add_argument("--horizon", type=float, dest="horizon")
    p.add_argument("--samples", type=int, dest="samples")
    p.add_argument("--aggregate", action="store_const", const=True, dest="aggregate")
    p.add_argument("--grid-points", type=int, dest="grid_points")
    _add_common(p)

    model = sub.add_parser("model", help="model file utilities")
    model_sub = model.add_subparsers(dest="model_command", required=True)
    p = model_sub.add_parser("check", help="run the assumption spot checks")
    p.add_argument("--model", dest="model")
    p.add_argument("--sample-budget", type=int, dest="sample_budget")
    p.add_argument("--horizon", type=float, dest="horizon")
    _add_common(p)

    p = sub.add_parser("particles", help="simulate the interacting particle system")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--n", type=int, dest="n")
    p.add_argument("--replications", type=int, dest="replications")
    p.add_argument("--summary", action="store_const", const=True, dest="summary")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("meanfield", help="solve the mean-field fixed point")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--tol", type=float, dest="tol")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--damping", type=float, dest="damping")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("chaos", help="coupled convergence-rate ladder")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--ladder", type=_int_list, dest="ladder",
                   help="comma-separated population sizes")
    p.add_argument("--replications", type=int, dest="replications")
    p.add_argument("--curves-M", type=int, dest="curves_M")
    p.add_argument("--curves-tol", type=float, dest="curves_tol")
    p.add_argument("--bootstrap", type=int, dest="bootstrap")
    p.add_argument("--plot", action="store_const", const=True, dest="plot")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("adjoint", help="solve the backward costate equation")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--curves-M", type=int, dest="curves_M")
    p.add_argument("--curves-tol", type=float, dest="curves_tol")
    p.add_argument("--basis-degree", type=int, dest="basis_degree")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("verify-mp", help="verify the sufficient optimality conditions")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--M", type=int, dest="M")
    p.add_argument("--curves-M", type=int, dest="curves_M")
    p.add_argument("--curves-tol", type=float, dest="curves_tol")
    p.add_argument("--comparisons", type=int, dest="comparisons")
    p.add_argument("--comparison-scale", type=float, dest="comparison_scale")
    p.add_argument("--hamiltonian-samples", type=int, dest="hamiltonian_samples")
    p.add_argument("--cost-paths", type=int, dest="cost_paths")
    p.add_argument("--violation-tolerance", type=float, dest="violation_tolerance")
    p.add_argument("--basis-degree", type=int, dest="basis_degree")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("lq-oracle", help="closed-form benchmark gains and value")
    p.add_argument("--model", dest="model")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("nash", help="unilateral deviation gap experiments")
    p.add_argument("--model", dest="model")
    p.add_argument("--control", dest="control")
    p.add_argument("--n", type=int, dest="n")
    p.add_argument("--ladder", type=_int_list, dest="ladder")
    p.add_argument("--replications", type=int, dest="replications")
    p.add_argument("--deviation-shift", type=float, dest="deviation_shift")
    p.add_argument("--deviation-grid-points", type=int, dest="deviation_grid_points")
    _add_grid(p)
    _add_common(p)

    p = sub.add_parser("run", help="run any experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--threads", type=int, dest="threads")

    return parser


_KIND_BY_COMMAND = {
    "chain": "chain",
    "particles": "particles",
    "meanfield": "meanfield",
    "chaos": "chaos",
    "adjoint": "adjoint",
    "verify-mp": "verify-mp",
    "lq-oracle": "lq-oracle",
    "nash": "nash",
}


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    skip = {"command", "model_command", "config"}
    overrides = {k: v for k, v in vars(args).items() if k not in skip and v is not None}
    if args.command == "run":
        return ExperimentConfig.load(args.config, overrides)
    if args.command == "model":
        kind = "model-check"
    else:
        kind = _KIND_BY_COMMAND[args.command]
    if getattr(args, "config", None):
        with open(args.config) as f:
            doc = json.load(f)
        doc.update(overrides)
    else:
        doc = overrides
    doc["kind"] = kind
    return ExperimentConfig.from_dict(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    try:
        manifest = run(config)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (NumericalAbort, ExperimentAbort, FloatingPointError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    outdir = config.output_dir
    print(f"wrote {len(manifest.outputs)} output file(s) to {outdir}")
    for name in manifest.outputs:
        print(f"  {name}")
    print(f"  manifest.json (config {manifest.config_hash[:12]})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
