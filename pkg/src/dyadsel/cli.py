"""Command-line front end: simulate, estimate, replicate-tables, verify-kernel.

Exit codes: 0 ok, 2 input error, 3 numerical failure, 4 results written but
a numerical guard was triggered.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import PanelError, load_panel, save_panel
from .estimator import PPMLError, SingularMomentsError
from .first_step import FirstStepError, FirstStepOptions
from .inference import InferenceConfig, run_inference_procedure
from .kernels import get_kernel, kernel_roughness, verify_kernel_order
from .montecarlo import DgpConfig, McResult, cell_filename, run_cell, simulate_panel, write_results

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_GUARD = 0, 2, 3, 4
THREADS_ENV = "DYADSEL_THREADS"


class InputError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=2, help="kernel order (default 2)")
    p.add_argument("--delta", type=float, default=0.4, help="pilot bandwidth exponent (default 0.4)")
    p.add_argument("--h-init", type=float, default=3.0, help="initial bandwidth constant (default 3.0)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--threads", type=int, default=None, help=f"worker processes (env {THREADS_ENV})")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--directed", action="store_true")
    p.add_argument("--format", choices=("csv", "json", "text"), default="text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadsel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw one synthetic panel and write it as CSV")
    _common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--theta", type=float, default=-2.0)
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("estimate", help="run the full inference procedure on a panel CSV")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("--kernel", default="biweight", help="registered kernel name, or 'flat'")
    p.add_argument("--column", action="append", default=[], metavar="CANON=NAME",
                   help="map a canonical column (i, j, t, d, y, w_1, r_1, ...) to a file column")

    p = sub.add_parser("replicate-tables", help="Monte Carlo grid and table rendering")
    _common(p)
    p.add_argument("--n", type=int, nargs="+", default=[50, 100, 150, 200])
    p.add_argument("--theta", type=float, nargs="+", default=[-0.3, -2.0, -3.0])
    p.add_argument("--sigma", type=float, nargs="+", default=[1.0, 0.0])
    p.add_argument("--no-ppml", action="store_true", help="skip the PPML comparator")

    p = sub.add_parser("verify-kernel", help="check kernel moment conditions")
    _common(p)
    p.add_argument("--kernel", default="biweight")
    p.add_argument("--tol", type=float, default=1e-8)
    return parser


def _inference_config(args, kernel="biweight") -> InferenceConfig:
    try:
        return InferenceConfig(
            k=args.k, delta=args.delta, h_init=args.h_init, alpha=args.alpha,
            kernel=None if kernel == "flat" else kernel, first_step=FirstStepOptions(),
        )
    except (ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None


def _versions() -> dict:
    return {
        "dyadsel": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.directed:
        raise InputError("the simulation design is undirected; drop --directed")
    try:
        cfg = DgpConfig(n=args.n, theta=args.theta, sigma=args.sigma, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    panel = simulate_panel(cfg)
    out = args.out
    if out.suffix == "":
        out.mkdir(parents=True, exist_ok=True)
        out = out / ("panel.json" if args.format == "json" else "panel.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        panel.save_json(out)
    else:
        save_panel(panel, out)
    print(f"wrote {out} ({panel.n_dyads} dyads, {panel.T} periods)")
    return EXIT_OK


def _first_step_listing(fit, names, fmt) -> str:
    if fmt == "csv":
        return "variable,gamma_hat\n" + "".join(f"{n},{g!r}\n" for n, g in zip(names, fit.gamma_hat.tolist()))
    width = max(len("variable"), *(len(n) for n in names))
    lines = [f"{'variable':<{width}}  {'gamma_hat':>10}"]
    lines += [f"{n:<{width}}  {g:>10.4f}" for n, g in zip(names, fit.gamma_hat)]
    lines.append(f"switchers: {fit.n_switchers}  iterations: {fit.iterations}  converged: {fit.converged}")
    return "\n".join(lines) + "\n"


def _estimate_listing(fit, fmt) -> str:
    names = list(fit.w_names) or [f"w_{k + 1}" for k in range(fit.beta_hat.size)]
    level = fit.ci[0].level if fit.ci else 1 - fit.config.alpha
    if fmt == "csv":
        head = "variable,beta_hat,se,beta_bc,ci_bc_lower,ci_bc_upper,ci_conv_lower,ci_conv_upper\n"
        body = "".join(
            f"{n},{b!r},{s!r},{bc!r},{c.lower!r},{c.upper!r},{cc.lower!r},{cc.upper!r}\n"
            for n, b, s, bc, c, cc in zip(names, fit.beta_hat.tolist(), fit.se.tolist(),
                                          fit.beta_bc.tolist(), fit.ci, fit.ci_conv)
        )
        return head + body
    width = max(len("variable"), *(len(n) for n in names))
    pct = f"{100 * level:g}%"
    lines = [f"{'variable':<{width}}  {'estimate':>10}  {'se':>10}  {'bias-corr':>10}  {pct + ' CI_bc':>24}"]
    for n, b, s, bc, c in zip(names, fit.beta_hat, fit.se, fit.beta_bc, fit.ci):
        lines.append(f"{n:<{width}}  {b:>10.4f}  {s:>10.4f}  {bc:>10.4f}  [{c.lower:>10.4f}, {c.upper:>10.4f}]")
    lines.append(f"n={fit.n}  N={fit.N}  rows={fit.n_rows}  in support={fit.rows_in_support}")
    lines.append(f"h_n={fit.h_n:.4g}  h_pilot={fit.h_pilot:.4g}  h*={fit.h_star_hat:.4g}  lambda={fit.lambda_n:.4g}")
    for w in fit.warnings:
        lines.append(f"warning: {w}")
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    cfg = _inference_config(args, args.kernel)
    schema = {}
    for item in args.column:
        if "=" not in item:
            raise InputError(f"--column expects CANON=NAME, got {item!r}")
        k, v = item.split("=", 1)
        schema[k.strip()] = v.strip()
    if not args.input.exists():
        raise InputError(f"no such file: {args.input}")
    try:
        panel = load_panel(args.input, schema=schema, directed=args.directed)
    except (PanelError, ValueError) as exc:
        raise InputError(str(exc)) from None
    fit = run_inference_procedure(panel, cfg)

    out = args.out
    listing_fmt = "csv" if args.format == "csv" else "text"
    _write(out / "fit.json", fit.to_json(indent=2))
    _write(out / f"first_step.{'csv' if listing_fmt == 'csv' else 'txt'}",
           _first_step_listing(fit.first_step, list(panel.r_names), listing_fmt))
    est = _estimate_listing(fit, listing_fmt)
    _write(out / f"estimates.{'csv' if listing_fmt == 'csv' else 'txt'}", est)
    if args.format == "json":
        sys.stdout.write(fit.to_json(indent=2) + "\n")
    else:
        sys.stdout.write(est)
    if fit.warnings:
        for w in fit.warnings:
            print(f"warning: {w}", file=sys.stderr)
        return EXIT_GUARD
    return EXIT_OK


def _manifest_config(args, cfg: InferenceConfig) -> dict:
    return {
        "grid": {"n": list(args.n), "theta": list(args.theta), "sigma": list(args.sigma)},
        "reps": args.reps,
        "base_seed": args.seed,
        "ppml": not args.no_ppml,
        "inference": cfg.to_dict(),
    }


def cmd_replicate_tables(args) -> int:
    cfg = _inference_config(args)
    if args.reps < 1:
        raise InputError("--reps must be at least 1")
    threads = args.threads or _default_threads()
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    config = _manifest_config(args, cfg)
    completed: list = []
    if mpath.exists():
        old = json.loads(mpath.read_text(encoding="utf-8"))
        if old.get("config") == config:
            completed = [tuple(c) for c in old.get("completed", [])]
        else:
            print("manifest config differs; starting over", file=sys.stderr)

    def save_manifest():
        _write(mpath, json.dumps({"config": config, "versions": _versions(), "completed": completed}, indent=2))

    save_manifest()
    results = {}
    for theta in args.theta:
        for sigma in args.sigma:
            for n in args.n:
                key = (theta, sigma, n)
                cell_path = out / cell_filename(theta, sigma, n)
                if key in completed and cell_path.exists():
                    results[key] = McResult.from_dict(json.loads(cell_path.read_text(encoding="utf-8")))
                    print(f"skip theta={theta:g} sigma={sigma:g} n={n} (done)")
                    continue
                try:
                    res = run_cell(n, theta, sigma, args.reps, args.seed, threads, cfg, not args.no_ppml)
                except ValueError as exc:
                    raise InputError(str(exc)) from None
                results[key] = res
                _write(cell_path, json.dumps(res.to_dict()))
                completed.append(key)
                save_manifest()
                print(f"done theta={theta:g} sigma={sigma:g} n={n}: failures={res.failures}")
    write_results(results, out)
    failed = sum(r.failures for r in results.values())
    if failed:
        print(f"{failed} replications failed and were excluded (see cell JSON)", file=sys.stderr)
    return EXIT_OK


def cmd_verify_kernel(args) -> int:
    try:
        spec = get_kernel(args.kernel)
    except KeyError as exc:
        raise InputError(str(exc)) from None
    rep = verify_kernel_order(spec, args.tol)
    rough = kernel_roughness(spec)
    if args.format == "json":
        print(json.dumps({"name": rep.name, "order": rep.order, "moments": list(rep.moments),
                          "passed": rep.passed, "moments_vanish_through_order": rep.vanishing_through_order,
                          "tol": rep.tol, "roughness": rough}))
    else:
        for k, m in enumerate(rep.moments):
            print(f"moment {k}: {m: .3e}")
        print(f"integral of K^2: {rough:.12f}")
        print(f"moments 1..{rep.order} all zero: {rep.vanishing_through_order}")
        print(f"{rep.name}: order {rep.order} {'PASS' if rep.passed else 'FAIL'} (tol {rep.tol:g})")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "replicate-tables": cmd_replicate_tables,
    "verify-kernel": cmd_verify_kernel,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FirstStepError, SingularMomentsError, PPMLError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
