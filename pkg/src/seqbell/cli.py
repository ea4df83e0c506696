"""Command-line front-end.

Exit codes: 0 success, 2 invalid arguments, 3 computation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
import tempfile
from fractions import Fraction
from typing import Sequence

from . import bell, lab, npa, protocol, sdp
from .errors import SeqBellError, SolverError

EXIT_OK, EXIT_ARGS, EXIT_FAIL = 0, 2, 3

_PI_FORM = re.compile(r"^\s*([0-9]*\.?[0-9]*)\s*\*?\s*pi\s*(?:/\s*([0-9]+))?\s*$")


class ArgError(ValueError):
    """Invalid configuration detected after parsing."""


def parse_angle(text: str) -> float:
    """Decimal radians or a multiple of pi such as ``pi/8``, ``3pi/8``, ``0.5*pi``."""
    m = _PI_FORM.match(text.lower())
    if m:
        num = Fraction(m.group(1)) if m.group(1) else Fraction(1)
        den = int(m.group(2)) if m.group(2) else 1
        if den == 0:
            raise argparse.ArgumentTypeError(f"bad angle {text!r}")
        return float(num / den) * math.pi
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad angle {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"bad angle {text!r}")
    return value


def parse_angle_list(text: str) -> list[float]:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("empty list")
    return [parse_angle(p) for p in parts]


def write_atomic(path: str, text: str) -> None:
    """Write UTF-8 text through a temporary file and rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(out, text)
    else:
        sys.stdout.write(text)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _method(args) -> lab.Method:
    return lab.Method.analytic() if args.method == "analytic" else lab.Method.npa(args.level)


def _params(args) -> bell.BellParams:
    try:
        return bell.BellParams(args.alpha, args.beta)
    except ValueError as exc:
        raise ArgError(str(exc)) from exc


# --- commands -----------------------------------------------------------------

def cmd_state_info(args) -> int:
    if not (0.0 < args.theta < math.pi / 2):
        raise ArgError("theta must lie in (0, pi/2)")
    beta = bell.beta_of_theta(args.theta)
    mu = bell.mu_of_theta(args.theta)
    i_max = math.sqrt(2.0 * (4.0 + beta * beta))  # alpha = 1
    rep = {"theta": args.theta, "beta": beta, "mu": mu, "i_max": i_max}
    if args.format == "json":
        emit(dump_json(rep), args.out)
    else:
        emit("".join(f"{k} {v:.6f}\n" for k, v in rep.items()), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    xis = args.xis
    if not (0.0 <= args.theta <= math.pi / 4):
        raise ArgError("theta must lie in [0, pi/4]")
    if any(not (0.0 <= x <= math.pi / 4) for x in xis):
        raise ArgError("every xi must lie in [0, pi/4]")
    if len(xis) > args.max_steps:
        raise ArgError(f"at most {args.max_steps} steps")
    tree, seq = protocol.run_sequence(args.theta, xis, max_steps=args.max_steps)
    settings = [{"step": s.step, "history": list(s.history), "k": s.k}
                for s in protocol.enumerate_alice_settings(len(xis))]
    if args.theta > 0.0:
        report = lab.sequence_report(args.theta, xis).to_json()
    else:
        report = {"theta1": args.theta, "xis": list(xis), "steps": [], "asymptotic_certificate_bits": 0.0}
    report["settings"] = settings
    if args.out_dir:
        write_atomic(os.path.join(args.out_dir, "tree.json"), protocol.tree_json(tree) + "\n")
        write_atomic(os.path.join(args.out_dir, "report.json"), dump_json(report))
        if args.distribution:
            write_atomic(os.path.join(args.out_dir, "distribution.csv"), seq.to_csv())
    else:
        emit(dump_json(report), None)
    return EXIT_OK


def cmd_certify(args) -> int:
    if not (0.0 < args.theta <= math.pi / 4):
        raise ArgError("theta must lie in (0, pi/4]")
    if not (0.0 <= args.xi <= math.pi / 4):
        raise ArgError("xi must lie in [0, pi/4]")
    method = _method(args)
    if args.export_sdpa:
        if method.kind != "npa":
            raise ArgError("--export-sdpa needs --method npa")
        g = npa.build_guessing_sdp(lab.observed_behaviour(args.theta, args.xi), 1,
                                   npa.build_basis(npa.Scenario(2, 2), method.level))
        with open(args.export_sdpa, "w", encoding="utf-8") as fh:
            sdp.write_sdpa(g.problem, fh)
    row = lab.certify_point(args.theta, args.xi, method)
    rep = {"theta": args.theta, "xi": row.xi, "method": row.method, "g_upper": row.g_upper, "bits": row.bits}
    emit(dump_json(rep) if args.format == "json" else f"{row.bits:.6f}\n", args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not (0.0 < args.theta <= math.pi / 4):
        raise ArgError("theta must lie in (0, pi/4]")
    if args.points < 2 or not (0.0 < args.xi_max <= math.pi / 4):
        raise ArgError("grid needs at least 2 points and 0 < xi_max <= pi/4")
    rows = lab.sweep_xi(args.theta, lab.table_grid(args.points, args.xi_max), _method(args))
    if args.format == "json":
        emit(dump_json([{"xi": r.xi, "bits": r.bits, "method": r.method, "failed": r.failed} for r in rows]),
             args.out)
    else:
        emit(lab.sweep_csv(rows), args.out)
    return EXIT_FAIL if any(r.failed for r in rows) else EXIT_OK


def cmd_threshold(args) -> int:
    if not (0.0 < args.theta <= math.pi / 4):
        raise ArgError("theta must lie in (0, pi/4]")
    if args.resolution < 1e-3:
        raise ArgError("resolution must be at least 1e-3")
    xi = lab.threshold_xi(args.theta, _method(args), args.resolution)
    rep = {"theta": args.theta, "method": _method(args).label, "xi_threshold": xi}
    emit(dump_json(rep) if args.format == "json" else f"{xi:.6f}\n", args.out)
    return EXIT_OK


def cmd_conjecture(args) -> int:
    if args.restarts < 1:
        raise ArgError("restarts must be at least 1")
    rep = lab.conjecture_search(_params(args), args.restarts, args.seed)
    emit(rep.dumps(), args.out)
    return EXIT_OK


def cmd_npa_bell(args) -> int:
    if args.theta is not None:
        if not (0.0 < args.theta <= math.pi / 4):
            raise ArgError("theta must lie in (0, pi/4]")
        params = bell.BellParams.for_theta(args.theta)
    else:
        params = _params(args)
    basis = npa.build_basis(npa.Scenario(2, 2), args.level)
    if args.export_sdpa:
        prob, _ = npa.build_bell_sdp(params, basis)
        with open(args.export_sdpa, "w", encoding="utf-8") as fh:
            sdp.write_sdpa(prob, fh)
    value = npa.bell_max_sdp(params, basis)
    rep = {"alpha": params.alpha, "beta": params.beta, "level": args.level, "npa_bound": value,
           "analytic_max": bell.quantum_max(params)}
    emit(dump_json(rep) if args.format == "json" else f"{value:.6f}\n", args.out)
    return EXIT_OK


def cmd_sdp_solve(args) -> int:
    try:
        with open(args.file, encoding="utf-8") as fh:
            prob = sdp.read_sdpa(fh)
    except (OSError, ValueError, IndexError) as exc:
        raise ArgError(f"cannot read {args.file}: {exc}") from exc
    sol = sdp.solve(prob)
    rep = {"status": sol.status.value, "primal_obj": sol.primal_obj, "dual_obj": sol.dual_obj,
           "gap": sol.gap, "primal_res": sol.primal_res, "dual_res": sol.dual_res,
           "iterations": sol.iterations}
    emit(dump_json(rep), args.out)
    return EXIT_OK if sol.optimal else EXIT_FAIL


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqbell", description="Sequential Bell tests and certified randomness.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="log to stderr (-vv for solver iterations)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, formats=("text", "json")):
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--format", choices=formats, default=formats[0])

    def method_opts(p, default="npa"):
        p.add_argument("--method", choices=("analytic", "npa"), default=default)
        p.add_argument("--level", type=int, choices=(1, 2, 3), default=2)

    p = sub.add_parser("state-info", help="tailored functional parameters for psi(theta)")
    p.add_argument("--theta", type=parse_angle, required=True)
    common(p)
    p.set_defaults(func=cmd_state_info)

    p = sub.add_parser("simulate", help="exact simulation of a measurement sequence")
    p.add_argument("--theta", type=parse_angle, required=True)
    p.add_argument("--xis", type=parse_angle_list, required=True, help="comma-separated weakness angles")
    p.add_argument("--out-dir", help="directory for tree.json and report.json (default: report to stdout)")
    p.add_argument("--distribution", action="store_true", help="also write distribution.csv")
    p.add_argument("--max-steps", type=int, default=protocol.DEFAULT_MAX_STEPS)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("certify", help="certified bits at one (theta, xi)")
    p.add_argument("--theta", type=parse_angle, required=True)
    p.add_argument("--xi", type=parse_angle, required=True)
    method_opts(p, default="analytic")
    p.add_argument("--export-sdpa", help="write the guessing SDP in SDPA sparse format")
    common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="certified bits along a xi grid")
    p.add_argument("--theta", type=parse_angle, required=True)
    method_opts(p)
    p.add_argument("--points", type=int, default=lab.XI_TABLE_POINTS)
    p.add_argument("--xi-max", type=parse_angle, default=lab.XI_TABLE_MAX)
    common(p, formats=("csv", "json"))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("threshold", help="smallest xi with no certified randomness")
    p.add_argument("--theta", type=parse_angle, required=True)
    method_opts(p)
    p.add_argument("--resolution", type=float, default=1e-3)
    common(p)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("conjecture", help="numerical search for violations of the quadratic inequality")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_conjecture)

    p = sub.add_parser("npa-bell", help="NPA bound on the maximum of the Bell functional")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--theta", type=parse_angle, help="use the functional tailored to psi(theta)")
    p.add_argument("--level", type=int, choices=(1, 2, 3), default=2)
    p.add_argument("--export-sdpa", help="write the SDP in SDPA sparse format")
    common(p)
    p.set_defaults(func=cmd_npa_bell)

    p = sub.add_parser("sdp-solve", help="solve an SDP given in SDPA sparse format")
    p.add_argument("file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sdp_solve)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with 2 on malformed arguments
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArgError as exc:
        ap.print_usage(sys.stderr)
        print(f"{ap.prog}: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (SolverError, SeqBellError, ValueError, LookupError, ArithmeticError, RuntimeError) as exc:
        print(f"{ap.prog}: computation failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
