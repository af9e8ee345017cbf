"""Command-line front end.

Every subcommand writes one plot-ready table, either CSV or JSON. A CSV file
starts with a ``#`` manifest line holding the resolved configuration, so the
``replay`` subcommand can reproduce the table from the file alone.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import io
import json
import math
import os
import sys
import tempfile
from typing import Callable, Optional, Sequence

import numpy as np

from eoc_lowrank import __version__
from eoc_lowrank import lowrank_sim as sim
from eoc_lowrank import meanfield as mf
from eoc_lowrank import rmt
from eoc_lowrank.activations import ACTIVATIONS
from eoc_lowrank.config import ENSEMBLE_ALIASES, NetworkConfig
from eoc_lowrank.errors import DomainError, EocError, NonPositiveLogArgument, UnsupportedDerivative
from eoc_lowrank.quadrature import DEFAULT_ORDER, get_rule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
MANIFEST_PREFIX = "# manifest: "


class UsageError(Exception):
    """Flag values that parse but make no sense together."""


class Table:
    """Column names plus rows of plain numbers or strings."""

    def __init__(self, columns: Sequence[str], rows: Optional[list] = None):
        self.columns = list(columns)
        self.rows = rows if rows is not None else []

    def add(self, *values):
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))


def format_value(v) -> str:
    """CSV text for one cell; floats round-trip and use ``inf``/``nan`` literals."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else format_value(v)
    return v


def render(table: Table, manifest: dict, fmt: str) -> str:
    if fmt == "json":
        doc = {
            "manifest": manifest,
            "columns": table.columns,
            "rows": [[_json_value(v) for v in row] for row in table.rows],
        }
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"
    buf = io.StringIO()
    buf.write(MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True, allow_nan=False) + "\n")
    buf.write(",".join(table.columns) + "\n")
    for row in table.rows:
        buf.write(",".join(format_value(v) for v in row) + "\n")
    return buf.getvalue()


def write_atomic(text: str, out: str) -> None:
    """Write to ``out`` via a temporary sibling and rename; ``-`` means stdout."""
    if out in ("-", "", None):
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    directory = os.path.dirname(os.path.abspath(out))
    fd, tmp = tempfile.mkstemp(prefix=".eoc-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------- parsing


def float_list(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:num`` (inclusive linear grid)."""
    text = text.strip()
    try:
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise ValueError
            start, stop, num = float(parts[0]), float(parts[1]), int(parts[2])
            if num < 1:
                raise ValueError
            return [float(x) for x in np.linspace(start, stop, num)]
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list or start:stop:num, got {text!r}") from None


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma list of integers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser, **defaults) -> None:
    d = {"gamma": 1.0, "sigma_alpha2": 1.0, "sigma_b2": 0.0, "depth": 10, "width": 1000,
         "trials": 5, "activation": "tanh", "ensemble": "lowrank_gaussian"}
    d.update(defaults)
    p.add_argument("--gamma", type=float, default=d["gamma"], help="rank ratio r/N in (0, 1]")
    p.add_argument("--sigma-alpha2", type=float, default=d["sigma_alpha2"], help="coefficient variance scale")
    p.add_argument("--sigma-b2", type=float, default=d["sigma_b2"], help="bias variance")
    p.add_argument("--activation", choices=sorted(ACTIVATIONS), default=d["activation"])
    p.add_argument("--ensemble", choices=sorted(ENSEMBLE_ALIASES), default=d["ensemble"])
    p.add_argument("--depth", type=int, default=d["depth"])
    p.add_argument("--width", type=int, default=d["width"])
    p.add_argument("--trials", type=int, default=d["trials"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quad-order", type=int, default=DEFAULT_ORDER)
    p.add_argument("--bias-mode", choices=sim.BIAS_MODES, default=sim.DEFAULT_BIAS_MODE,
                   help="one shared bias scalar per layer, or one per frame direction")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default="-", help="output path, '-' for stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eoc-lowrank",
        description="Mean-field theory and Monte-Carlo checks for wide low-rank networks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixed-point", help="q*, c*, chi, phase and depth scales")
    _add_common(p)
    p.add_argument("--q-init", type=float, default=1.0)
    p.set_defaults(handler=cmd_fixed_point)

    p = sub.add_parser("eoc-curve", help="edge-of-chaos curve parametrised by q*")
    _add_common(p)
    p.add_argument("--q-grid", type=float_list, default=float_list("0.01:5:50"),
                   help="q* values, comma list or start:stop:num")
    p.set_defaults(handler=cmd_eoc_curve)

    p = sub.add_parser("depth-scales", help="depth scales over a grid of weight and bias variances")
    _add_common(p, gamma=0.25)
    p.add_argument("--weight-var-grid", type=float_list, default=float_list("0.5:3:26"),
                   help="values of gamma*sigma_alpha2")
    p.add_argument("--sigma-b2-list", type=float_list, default=None,
                   help="bias variances sigma_b2 (default: 0.01/gamma, 0.1/gamma, 0.3/gamma)")
    p.add_argument("--empirical", action="store_true",
                   help="also fit the correlation decay rate from simulation (ordered configs)")
    p.set_defaults(handler=cmd_depth_scales)

    p = sub.add_parser("jacobian-variance", help="variance of the J J^T spectrum")
    _add_common(p, activation="identity", width=1000)
    p.add_argument("--gamma-list", type=float_list, default=None, help="overrides --gamma")
    p.add_argument("--q-star", type=float, default=None,
                   help="input length (default 0.5 with --critical, else the solved q*)")
    p.add_argument("--critical", action="store_true",
                   help="pick sigma_alpha2, sigma_b2 on the edge of chaos at --q-star")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--analytic", dest="mode", action="store_const", const="analytic")
    mode.add_argument("--empirical", dest="mode", action="store_const", const="empirical")
    mode.add_argument("--both", dest="mode", action="store_const", const="both")
    p.set_defaults(handler=cmd_jacobian_variance, mode="both")

    p = sub.add_parser("correlation-dynamics", help="layerwise correlation of an input pair")
    _add_common(p, gamma=0.25, sigma_alpha2=8.0, sigma_b2=0.09, depth=20)
    p.add_argument("--c0", type=float_list, default=[0.2, 0.5, 0.8])
    p.add_argument("--layers", type=int, default=None, help="alias for --depth")
    p.set_defaults(handler=cmd_correlation_dynamics)

    p = sub.add_parser("gradient-propagation", help="layerwise gradient norms vs chi^(L-l)")
    _add_common(p, gamma=0.25, sigma_alpha2=4.0, sigma_b2=0.2, depth=50, width=500)
    p.set_defaults(handler=cmd_gradient_propagation)

    p = sub.add_parser("spectrum-dump", help="Jacobian singular values at chosen depths")
    _add_common(p, activation="identity", trials=1)
    p.add_argument("--record-layers", type=int_list, default=None, help="default: every layer")
    p.add_argument("--q-star", type=float, default=0.5, help="input length")
    p.set_defaults(handler=cmd_spectrum_dump)

    p = sub.add_parser("replay", help="re-run the command recorded in an output file")
    p.add_argument("manifest", help="CSV or JSON file written by this tool")
    p.add_argument("--out", default="-")
    p.set_defaults(handler=None)
    return parser


# -------------------------------------------------------------- commands


def _config(args, **overrides) -> NetworkConfig:
    kw = dict(gamma=args.gamma, sigma_alpha2=args.sigma_alpha2, sigma_b2=args.sigma_b2,
              depth=args.depth, width=args.width, activation=args.activation, ensemble=args.ensemble)
    kw.update(overrides)
    return NetworkConfig(**kw)


def _check_trials(args) -> None:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def cmd_fixed_point(args, rule) -> Table:
    cfg = _config(args)
    rep = mf.fixed_point(cfg, q_init=args.q_init, rule=rule)
    try:
        ds = mf.depth_scales(cfg, rep.q_star, rule)
        scales = (ds.xi_q, ds.xi_c, ds.xi_grad)
    except (UnsupportedDerivative, NonPositiveLogArgument) as exc:
        print(f"warning: depth scales unavailable: {exc}", file=sys.stderr)
        scales = (math.nan,) * 3
    t = Table(["q_star", "c_star", "chi", "phase", "xi_q", "xi_c", "xi_grad", "iterations", "residual"])
    t.add(rep.q_star, rep.c_star, rep.chi, rep.phase, *scales, rep.iterations, rep.residual)
    return t


def cmd_eoc_curve(args, rule) -> Table:
    if any(not q > 0 for q in args.q_grid):
        raise UsageError("--q-grid values must be positive")
    NetworkConfig(gamma=args.gamma)
    t = Table(["q_star", "gamma_sigma_alpha2", "gamma_sigma_b2"])
    for p in mf.eoc_curve(args.activation, args.gamma, args.q_grid, rule):
        t.add(p.q_star, p.weight_var, p.bias_var)
    return t


def cmd_depth_scales(args, rule) -> Table:
    sb2_list = args.sigma_b2_list or [0.01 / args.gamma, 0.1 / args.gamma, 0.3 / args.gamma]
    _check_trials(args)
    cols = ["gamma_sigma_alpha2", "sigma_b2", "xi_q", "xi_c", "q_star", "chi"]
    if args.empirical:
        cols += ["xi_c_empirical", "xi_c_empirical_std"]
    t = Table(cols)
    for sb2 in sb2_list:
        for wv in args.weight_var_grid:
            cfg = _config(args, sigma_alpha2=wv / args.gamma, sigma_b2=sb2)
            rep = mf.fixed_point(cfg, rule=rule)
            ds = mf.depth_scales(cfg, rep.q_star, rule)
            row = [wv, sb2, ds.xi_q, ds.xi_c, rep.q_star, rep.chi]
            if args.empirical:
                if rep.chi < 1.0:
                    rates = sim.run_trials(
                        lambda tr: sim.correlation_decay_rate(
                            cfg, 1.0, rep.q_star, seed=args.seed, trial=tr, bias_mode=args.bias_mode),
                        args.trials)
                    xis = [1.0 / r for r in rates if r > 0]
                    row += list(_mean_std(xis))
                else:
                    row += [math.nan, math.nan]
            t.add(*row)
    return t


def _spectrum_config(args, gamma: float, rule) -> tuple[NetworkConfig, float]:
    if args.critical:
        q = 0.5 if args.q_star is None else args.q_star
        pts = mf.eoc_curve(args.activation, gamma, [q], rule)
        if not pts:
            raise UsageError(f"no edge-of-chaos point with q*={q} for {args.activation}")
        pt = pts[0]
        return _config(args, gamma=gamma, sigma_alpha2=pt.weight_var / gamma,
                       sigma_b2=pt.bias_var / gamma), q
    cfg = _config(args, gamma=gamma)
    q = args.q_star if args.q_star is not None else mf.solve_q_star(cfg, rule=rule).q_star
    return cfg, q


def cmd_jacobian_variance(args, rule) -> Table:
    _check_trials(args)
    gammas = args.gamma_list or [args.gamma]
    t = Table(["gamma", "L", "analytic_variance", "empirical_mean", "empirical_std", "trials"])
    for g in gammas:
        cfg, q = _spectrum_config(args, g, rule)
        analytic = math.nan
        if args.mode in ("analytic", "both"):
            analytic = rmt.jacobian_moments_analytic(cfg, q, rule).variance
        mean = std = math.nan
        trials = 0
        if args.mode in ("empirical", "both"):
            res = sim.run_trials(
                lambda tr: sim.jacobian_spectrum(cfg, args.seed, tr, q0=q, bias_mode=args.bias_mode)[1],
                args.trials)
            mean, std = _mean_std([m.variance for m in res])
            trials = args.trials
        t.add(g, cfg.depth, analytic, mean, std, trials)
    return t


def cmd_correlation_dynamics(args, rule) -> Table:
    _check_trials(args)
    depth = args.layers if args.layers is not None else args.depth
    cfg = _config(args, depth=depth)
    if any(not -1.0 <= c <= 1.0 for c in args.c0):
        raise UsageError("--c0 values must lie in [-1, 1]")
    q = mf.solve_q_star(cfg, rule=rule).q_star
    if q == 0.0:
        raise UsageError("q* = 0: correlations are undefined (use a positive bias)")
    t = Table(["layer", "c0", "theory_c", "empirical_mean", "empirical_std"])
    for c0 in args.c0:
        theory = mf.correlation_trajectory(cfg, q, c0, depth, rule).values

        def one(tr, c0=c0):
            pair = sim.make_input_pair(cfg.width, q, c0, sim.substream(args.seed, tr, sim.INPUT_LAYER))
            return sim.forward_lengths(cfg, pair, args.seed, tr, args.bias_mode).correlation.values

        runs = np.array(sim.run_trials(one, args.trials))
        for l in range(depth + 1):
            mean, std = _mean_std(runs[:, l])
            t.add(l, c0, theory[l], mean, std)
    return t


def cmd_gradient_propagation(args, rule) -> Table:
    _check_trials(args)
    cfg = _config(args)
    q = mf.solve_q_star(cfg, rule=rule).q_star
    theory = mf.gradient_norm_theory(cfg, q, rule=rule)
    runs = sim.run_trials(
        lambda tr: sim.backprop_gradient_norms(cfg, args.seed, tr, q0=q, bias_mode=args.bias_mode).values,
        args.trials)
    runs = np.array(runs)
    last = runs[:, -1].mean()
    t = Table(["layer", "theory_ratio", "empirical_norm", "empirical_std", "empirical_ratio"])
    for i, l in enumerate(theory.layers):
        mean, std = _mean_std(runs[:, i])
        t.add(int(l), theory.values[i], mean, std, mean / last)
    return t


def cmd_spectrum_dump(args, rule) -> Table:
    _check_trials(args)
    cfg = _config(args)
    layers = args.record_layers or list(range(1, cfg.depth + 1))
    t = Table(["depth", "singular_value_index", "value", "trial"])
    for tr in range(args.trials):
        rec, _ = sim.jacobian_spectrum(cfg, args.seed, tr, q0=args.q_star,
                                       record_layers=layers, bias_mode=args.bias_mode)
        for l, sv in zip(rec.layers, rec.values):
            for i, v in enumerate(sv):
                t.add(int(l), i, float(v), tr)
    return t


# ------------------------------------------------------------------ driver


def _manifest(args, argv: Sequence[str]) -> dict:
    settings = {k: v for k, v in vars(args).items() if k not in ("handler", "out", "format")}
    return {
        "command": args.command,
        "argv": list(argv),
        "settings": settings,
        "seed": getattr(args, "seed", None),
        "quad_order": getattr(args, "quad_order", None),
        "trials": getattr(args, "trials", None),
        "format": args.format,
        "version": __version__,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def read_manifest(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.startswith(MANIFEST_PREFIX):
        return json.loads(text.splitlines()[0][len(MANIFEST_PREFIX):])
    return json.loads(text)["manifest"]


def _run(argv: Sequence[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "replay":
        try:
            manifest = read_manifest(args.manifest)
            recorded = list(manifest["argv"])
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot read manifest from {args.manifest}: {exc}", file=sys.stderr)
            return EXIT_USAGE
        return _run(_strip_out(recorded) + ["--out", args.out])
    rule = get_rule(args.quad_order)
    text = render(args.handler(args, rule), _manifest(args, argv), args.format)
    write_atomic(text, args.out)
    return EXIT_OK


def _strip_out(argv: list[str]) -> list[str]:
    out = []
    skip = False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags and 0 on --help/--version
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, DomainError, UnsupportedDerivative) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EocError as exc:
        diag = getattr(exc, "diagnostics", None)
        extra = f" {json.dumps(diag, default=str)}" if diag else ""
        print(f"numerical failure: {type(exc).__name__}: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
