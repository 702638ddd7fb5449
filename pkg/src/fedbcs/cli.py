"""Command line front end: runs, gradient audits, clustering, calculators.

Config files are flat "key = value" text with two sections, [federation]
for the run parameters and [output] for the artifact directory. Exit codes:
0 success, 2 config or usage error, 3 numerical failure, 4 theory-regime
rejection.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import os
import sys

import numpy as np

from .checkpoint import save_checkpoint
from .errors import (ConfigError, ContractError, DimensionError,
                     EstimationError, NumericsError, SpectralConsistencyError,
                     TheoryRegimeError, TrainingError)
from .federation import (FederationConfig, MetricsSink, TheoryParams,
                         lambda_c_bound_convergence, lambda_c_bound_descent,
                         lr_upper_bound, rounds_to_epsilon, run_experiment)
from .gradcheck import run_all
from .server import finch_cluster

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REGIME = 4

_NUMERIC_ERRORS = (NumericsError, TrainingError, SpectralConsistencyError,
                   DimensionError, ContractError)


@dataclasses.dataclass
class RunConfig:
    federation: FederationConfig
    out_dir: str = "runs/latest"


def _field_types() -> dict:
    probe = FederationConfig()
    return {f.name: type(getattr(probe, f.name))
            for f in dataclasses.fields(FederationConfig)}


def _line_of(text: str, key: str, section: str) -> int:
    """Best-effort line number of `key` inside `section` for diagnostics."""
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1]
        elif current == section and stripped.split("=")[0].strip() == key:
            return lineno
    return 0


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    known = {"federation", "output", parser.default_section}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    types = _field_types()
    kwargs = {}
    if parser.has_section("federation"):
        for key, raw in parser.items("federation"):
            if key not in types:
                line = _line_of(text, key, "federation")
                raise ConfigError(f"line {line}: unknown field {key!r}")
            try:
                if types[key] is bool:
                    kwargs[key] = parser.getboolean("federation", key)
                else:
                    kwargs[key] = types[key](raw)
            except ValueError as exc:
                line = _line_of(text, key, "federation")
                raise ConfigError(
                    f"line {line}: field {key!r}: bad value {raw!r} "
                    f"(expected {types[key].__name__})") from exc
    federation = FederationConfig(**kwargs)
    federation.validate()

    out_dir = "runs/latest"
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "directory":
                line = _line_of(text, key, "output")
                raise ConfigError(f"line {line}: unknown field {key!r}")
            out_dir = raw
    return RunConfig(federation, out_dir)


def serialize_config(config: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser.add_section("federation")
    for f in dataclasses.fields(FederationConfig):
        value = getattr(config.federation, f.name)
        parser.set("federation", f.name, repr(value) if isinstance(value, float)
                   else str(value))
    parser.add_section("output")
    parser.set("output", "directory", config.out_dir)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def _dice_table(per_domain: dict, mean_dice: float, method: str) -> str:
    """Final-score table: one method row, per-domain columns plus average."""
    domains = sorted(per_domain)
    header = f"{'method':<16s}" + "".join(
        f"{'domain ' + str(d):>10s}" for d in domains) + f"{'avg':>10s}"
    row = f"{method:<16s}" + "".join(
        f"{100.0 * per_domain[d]:>10.2f}" for d in domains)
    row += f"{100.0 * mean_dice:>10.2f}"
    return header + "\n" + row


def cmd_run(args) -> int:
    config = load_config(args.config) if args.config else RunConfig(FederationConfig())
    fed = config.federation
    if args.seed is not None:
        fed.seed = args.seed
    if args.rounds is not None:
        fed.rounds = args.rounds
    if args.method is not None:
        fed.method = args.method
    if args.parallel is not None:
        fed.parallel = args.parallel
    if args.checked is not None:
        fed.checked = args.checked
    fed.validate()
    out_dir = os.environ.get("FEDBCS_OUT") or args.out or config.out_dir

    with MetricsSink(out_dir) as sink:
        result = run_experiment(fed, sink=sink)
    save_checkpoint(os.path.join(out_dir, "final.fbcs1"), result.final_state)
    last = result.reports[-1]
    print(f"finished {fed.rounds} rounds of {fed.method} "
          f"(seed {fed.seed}); dice in percent")
    print(_dice_table(last.per_domain_dice, last.mean_dice, fed.method))
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_all(tolerance=args.tolerance)
    for r in results:
        print(f"{'pass' if r.passed else 'FAIL'}  {r.name:<22s} "
              f"max rel err {r.max_rel_err:.3e}")
    failed = sum(1 for r in results if not r.passed)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_finch(args) -> int:
    try:
        points = np.loadtxt(args.points, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read points file {args.points!r}: {exc}")
    partition = finch_cluster(points, metric=args.metric, levels=args.levels)
    print(f"{points.shape[0]} points -> {len(partition)} clusters "
          f"({args.metric}, {args.levels} level{'s' if args.levels > 1 else ''})")
    for k, members in enumerate(partition):
        print(f"cluster {k}: {' '.join(str(m) for m in members)}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    theory = TheoryParams(
        L_sm=args.l_sm, sigma_sq=args.sigma_sq, G=args.g, tau=args.tau,
        lambda_c=args.lambda_c, local_steps=args.local_steps, eta=args.eta,
        delta=args.delta, epsilon=args.epsilon)
    if args.grad_sq_sum is not None:
        eta_max, note = lr_upper_bound(theory, args.grad_sq_sum)
        print(f"eta_max = {eta_max:.6g}" + (f"  ({note})" if note else ""))
        lam_desc = lambda_c_bound_descent(theory, args.grad_sq_sum)
        print(f"lambda_c_max (descent) = {lam_desc:.6g}")
    if args.epsilon is not None:
        lam_conv = lambda_c_bound_convergence(theory)
        print(f"lambda_c_max (convergence) = {lam_conv:.6g}")
    if args.delta is not None and args.epsilon is not None:
        rounds = rounds_to_epsilon(theory)
        print(f"T = {rounds}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    defaults = FederationConfig()
    parser = argparse.ArgumentParser(
        prog="fedbcs",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="run defaults: " + ", ".join(
            f"{f.name}={getattr(defaults, f.name)}"
            for f in dataclasses.fields(FederationConfig)))
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a federated experiment")
    run.add_argument("--config", help="config file ([federation]/[output] sections)")
    run.add_argument("--seed", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--method",
                     choices=("fedbcs", "fedavg", "fedbcs-no-fsr", "fedbcs-no-cdpa"))
    run.add_argument("--out", help="output directory (FEDBCS_OUT overrides)")
    run.add_argument("--parallel", action=argparse.BooleanOptionalAction)
    run.add_argument("--checked", action=argparse.BooleanOptionalAction)
    run.set_defaults(func=cmd_run)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    grad.add_argument("--tolerance", type=float, default=1e-3)
    grad.set_defaults(func=cmd_gradcheck)

    finch = sub.add_parser("finch", help="cluster a whitespace-separated points file")
    finch.add_argument("points")
    finch.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    finch.add_argument("--levels", type=int, default=1)
    finch.set_defaults(func=cmd_finch)

    bounds = sub.add_parser("bounds", help="learning-rate / round-count calculators")
    bounds.add_argument("--l-sm", type=float, required=True)
    bounds.add_argument("--sigma-sq", type=float, required=True)
    bounds.add_argument("--g", type=float, required=True)
    bounds.add_argument("--tau", type=float, required=True)
    bounds.add_argument("--lambda-c", type=float, required=True)
    bounds.add_argument("--local-steps", type=int, default=1)
    bounds.add_argument("--eta", type=float, default=0.01)
    bounds.add_argument("--delta", type=float)
    bounds.add_argument("--epsilon", type=float)
    bounds.add_argument("--grad-sq-sum", type=float)
    bounds.set_defaults(func=cmd_bounds)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TheoryRegimeError, EstimationError) as exc:
        print(f"theory regime violated: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
