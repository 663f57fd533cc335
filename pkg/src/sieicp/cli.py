"""Command-line front end: ``register``, ``fit`` and ``simulate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import simulation as sim
from .costs import CostKind, WeightFunction
from .fileio import FormatError, read_cloud, read_residuals
from .geometry import DegenerateGeometryError, ResidualMatrix, ResidualMode, RigidTransform
from .histogram import EmptyHistogramError, HistogramConfig
from .registration import RegistrationConfig, register
from .sie import SIEConfig, fit_inlier_model

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOT_CONVERGED = 2

log = logging.getLogger("sieicp")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class InputError(Exception):
    """Bad arguments, unreadable files or malformed configuration."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for non-convergence here.
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def read_config(path: str | Path) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise InputError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config values as parser defaults so that explicit flags still win."""
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, val in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise InputError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            low = val.lower()
            if low not in _TRUE | _FALSE:
                raise InputError(f"config key {key!r} expects true or false")
            defaults[key] = low in _TRUE
        else:
            # String defaults are converted by argparse with the option's type.
            defaults[key] = val
    parser.set_defaults(**defaults)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def format_matrix(t: RigidTransform) -> str:
    return "\n".join(" ".join(_fmt(v) for v in row) for row in t.matrix()) + "\n"


def _parse_init(text: str) -> RigidTransform:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--init expects six numbers, got {text!r}") from None
    if len(vals) != 6 or not np.all(np.isfinite(vals)):
        raise InputError(f"--init expects six finite numbers tx,ty,tz,rx,ry,rz, got {text!r}")
    return RigidTransform.from_params(*vals)


def _positive(kind):
    def conv(s):
        v = kind(s)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {s}")
        return v
    conv.__name__ = kind.__name__
    return conv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of key = value lines; flags override it")
    p.add_argument("--seed", type=int, default=0)


def _add_sie_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p", type=_positive(float), default=None,
                   help="exponent for lp and sie costs (default 2 for sie)")
    p.add_argument("--estimate-p", action="store_true", help="sie: estimate p from the residuals")
    p.add_argument("--prob-cap", type=float, default=0.99)
    p.add_argument("--smoothing", type=float, default=HistogramConfig.smoothing_fraction,
                   help="histogram kernel std as a fraction of the range width")


def _sie_config(args) -> SIEConfig:
    p = None if args.estimate_p else (2.0 if args.p is None else args.p)
    try:
        return SIEConfig(p=p, prob_cap=args.prob_cap,
                         histogram=HistogramConfig(smoothing_fraction=args.smoothing))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sieicp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    reg = sub.add_parser("register", help="register a source cloud onto a target cloud")
    _add_common(reg)
    reg.add_argument("--source", required=True, help="PLY or CSV point file")
    reg.add_argument("--target", required=True, help="PLY or CSV point file")
    reg.add_argument("--cost", default="sie", choices=["sie", "trunc-l2", "truncated-l2", "lp", "t-dist"])
    reg.add_argument("--threshold", type=_positive(float), default=None, help="truncated-l2 cut-off")
    reg.add_argument("--nu", type=_positive(float), default=5.0, help="t-dist degrees of freedom")
    reg.add_argument("--mode", default="point-to-point",
                     choices=["point-to-point", "point-to-plane", "norm"])
    reg.add_argument("--init", default=None, help="initial guess tx,ty,tz,rx,ry,rz (rotation vector)")
    reg.add_argument("--max-matches", type=_positive(int), default=2000)
    reg.add_argument("--icp-max-iters", type=_positive(int), default=100)
    reg.add_argument("--irls-max-iters", type=_positive(int), default=10)
    reg.add_argument("--max-iters-per-level", type=_positive(int), default=10,
                     help="sie: outer iterations before the regularizer is halved regardless")
    reg.add_argument("--tolerance", type=_positive(float), default=1e-6,
                     help="convergence threshold on translation and rotation change")
    reg.add_argument("--beta-stop-ratio", type=float, default=0.01)
    reg.add_argument("--resample-matches", action="store_true",
                     help="draw a new match subset every iteration instead of a fixed one")
    reg.add_argument("--trace", default=None, help="write the per-iteration trace CSV here")
    _add_sie_options(reg)

    fit = sub.add_parser("fit", help="fit the inlier noise model to a residual file")
    _add_common(fit)
    fit.add_argument("--input", required=True, help="CSV with one row per correspondence")
    fit.add_argument("--output", required=True, help="model text file")
    fit.add_argument("--curves", default=None,
                     help="prefix for per-column histogram/curve CSVs (<prefix>_<j>.csv)")
    fit.add_argument("--folded", action="store_true",
                     help="treat a single column as non-negative residual norms")
    _add_sie_options(fit)

    simp = sub.add_parser("simulate", help="run the synthetic benchmark")
    _add_common(simp)
    simp.add_argument("--cases", default="easy,medium,hard", help="case names or k:n pairs")
    simp.add_argument("--sweep", default="translation", choices=["translation", "rotation", "both"])
    simp.add_argument("--steps", type=int, default=11)
    simp.add_argument("--costs", default="all", help="comma list; 'all' and 'p-variants' expand")
    simp.add_argument("--instances", type=_positive(int), default=100)
    simp.add_argument("--sigma", type=_positive(float), default=0.01)
    simp.add_argument("--noise", default="gaussian", choices=["gaussian", "laplacian"])
    simp.add_argument("--metric", default=None, choices=["rms", "mae"],
                      help="default: mae for laplacian noise, rms otherwise")
    simp.add_argument("--match", action="store_true",
                      help="re-match nearest neighbours instead of using the known pairs")
    simp.add_argument("--threads", type=_positive(int), default=None,
                      help=f"worker processes (default ${sim.THREADS_ENV} or 1)")
    simp.add_argument("--out", default=None, help="results CSV (default: standard output)")
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, values)
        args = parser.parse_args(argv)
    return args


def _weight_function(args) -> WeightFunction:
    cost = args.cost
    try:
        if cost == "sie":
            return WeightFunction(CostKind.SIE, p=None if args.estimate_p else (args.p or 2.0))
        if cost in ("trunc-l2", "truncated-l2"):
            if args.threshold is None:
                raise InputError("--cost trunc-l2 needs --threshold")
            return WeightFunction(CostKind.TRUNCATED_L2, threshold=args.threshold)
        if cost == "lp":
            if args.p is None:
                raise InputError("--cost lp needs --p")
            return WeightFunction(CostKind.LP, p=args.p)
        return WeightFunction(CostKind.T_DIST, nu=args.nu)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_register(args) -> int:
    try:
        source = read_cloud(args.source)
        target = read_cloud(args.target)
    except FormatError as exc:
        raise InputError(str(exc)) from None
    mode = ResidualMode.parse(args.mode)
    if mode is ResidualMode.POINT_TO_PLANE and target.normals is None:
        raise InputError("point-to-plane needs target normals")
    t0 = _parse_init(args.init) if args.init else None
    try:
        config = RegistrationConfig(
            cost=_weight_function(args), mode=mode, max_matches=args.max_matches,
            irls_max_iters=args.irls_max_iters, icp_max_iters=args.icp_max_iters,
            translation_tol=args.tolerance, rotation_tol=args.tolerance,
            beta_stop_ratio=args.beta_stop_ratio, seed=args.seed, sie=_sie_config(args),
            max_iters_per_level=args.max_iters_per_level, resample_matches=args.resample_matches)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        result = register(source, target, t0, config)
    except (DegenerateGeometryError, EmptyHistogramError) as exc:
        raise InputError(f"registration failed: {exc}") from None
    sys.stdout.write(format_matrix(result.transform))
    if args.trace:
        Path(args.trace).write_text(result.trace_csv())
    if not result.converged:
        print(f"not converged after {result.iterations} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_fit(args) -> int:
    try:
        values = read_residuals(args.input)
    except FormatError as exc:
        raise InputError(str(exc)) from None
    m = values.shape[1]
    if args.folded:
        if m != 1:
            raise InputError("--folded needs a single residual column")
        mode = ResidualMode.NORM
    elif m == 1:
        mode = ResidualMode.POINT_TO_PLANE
    elif m == 3:
        mode = ResidualMode.POINT_TO_POINT
    else:
        raise InputError(f"residual file needs 1 or 3 columns, got {m}")
    if values.shape[0] < 2 or np.ptp(values, axis=0).min() == 0:
        raise InputError("residual columns need at least two distinct values")
    try:
        model = fit_inlier_model(ResidualMatrix(values, mode), _sie_config(args))
    except ValueError as exc:
        raise InputError(f"fit failed: {exc}") from None
    Path(args.output).write_text(model.to_text())
    if args.curves:
        for j in range(model.m):
            Path(f"{args.curves}_{j}.csv").write_text(model.curves_csv(j))
    sys.stdout.write(model.to_text())
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cases = tuple(sim.parse_cases(args.cases))
        costs = tuple(sim.expand_costs(args.costs.split(",")))
        axes = ("translation", "rotation") if args.sweep == "both" else (args.sweep,)
        sim.sweep_magnitudes(axes[0], args.steps)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    cfg = sim.ExperimentConfig(
        cases=cases, axes=axes, steps=args.steps, costs=costs, instances_per_cell=args.instances,
        sigma=args.sigma, noise=sim.NoiseKind(args.noise),
        metric=None if args.metric is None else sim.Metric(args.metric),
        seed=args.seed, match=args.match)
    records = sim.run_experiment(cfg, workers=args.threads)
    text = sim.records_to_csv(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"register": cmd_register, "fit": cmd_fit, "simulate": cmd_simulate}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
