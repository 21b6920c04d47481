"""
Command-line entry point: `vmiv estimate|diagnose|simulate|enumerate|serve`.

Exit codes: 0 success, 1 input or design errors, 2 weak identification.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from . import __version__, config
from .combinatorics import count_compliance_groups, enumerate_compliance_groups, group_label
from .errors import VmivError, WeakIdentificationError, InputError
from .report import RunConfig, diagnose, dumps_report, parse_estimand, run, write_csv
from .simulation import (
    ESTIMATORS,
    load_dgp_spec,
    run_monte_carlo,
    three_instrument_spec,
    two_instrument_spec,
)

log = logging.getLogger("vmiv")


# =========================
# ARGUMENTS
# =========================
def _add_roles(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file with a header row")
    p.add_argument("--outcome", help="outcome column")
    p.add_argument("--treatment", help="binary treatment column")
    p.add_argument("--instruments", default="", help="comma-separated binary instrument columns")
    p.add_argument("--controls", default="", help="comma-separated control columns")
    p.add_argument(
        "--discretize", action="append", default=[], metavar="COL:CUTS[:below|above]",
        help="threshold a multi-valued instrument; repeatable, appended after --instruments",
    )
    p.add_argument("--auto-orient", action="store_true", help="flip instruments with a negative first stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmiv", description="Multiple-instrument treatment effects under vector monotonicity")
    parser.add_argument("--version", action="version", version=f"vmiv {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate complier parameters from a CSV")
    _add_roles(est)
    est.add_argument("--estimand", action="append", default=[], help="acl | slate:1,2 | slatt:1 | slatu:1 | pte:1@z2=1 | custom:w1,..; repeatable")
    est.add_argument("--regularize", default="auto", help="auto | none | alpha=<x>")
    est.add_argument("--se", default="sandwich", help="sandwich | bootstrap:<B> | none")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--ylo", type=float, help="lower outcome bound for ATE/ATT/ATU bounds")
    est.add_argument("--yhi", type=float, help="upper outcome bound")
    est.add_argument("--cdf-grid", type=int, default=0, help="distributional effects on K outcome quantiles")
    est.add_argument("--config", help="rerun from a saved report's config echo")
    est.add_argument("--out", choices=("json", "csv", "pdf"), default="json")
    est.add_argument("--output", help="output path (stdout for json when omitted)")
    est.add_argument("--save", action="store_true", help="store the report in the run database")

    dia = sub.add_parser("diagnose", help="support and monotonicity diagnostics")
    _add_roles(dia)
    dia.add_argument("--output", help="output path (stdout when omitted)")

    sim = sub.add_parser("simulate", help="Monte Carlo comparison on a known design")
    sim.add_argument("--dgp", default="three:1", help="three:1 | three:2 | two | file:spec.json")
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--seed", type=int, default=42)
    sim.add_argument("--estimators", default=",".join(ESTIMATORS))
    sim.add_argument("--estimand", default="acl")
    sim.add_argument("--threads", type=int, default=None)
    sim.add_argument("--out", help="CSV path (stdout when omitted)")

    enu = sub.add_parser("enumerate", help="list compliance groups")
    enu.add_argument("--j", type=int, required=True)
    enu.add_argument("--count-only", action="store_true")

    srv = sub.add_parser("serve", help="run the HTTP service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    return parser


def _split(s: str) -> List[str]:
    return [t.strip() for t in (s or "").split(",") if t.strip()]


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = RunConfig.from_report(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        return replace(cfg, data=args.data) if args.data else cfg

    missing = [flag for flag, v in (("--data", args.data), ("--outcome", args.outcome), ("--treatment", args.treatment)) if not v]
    if missing:
        raise InputError(f"missing required options: {', '.join(missing)}")
    extra = {}
    if args.command == "estimate":
        extra = dict(
            estimands=tuple(args.estimand or ["acl"]),
            regularize=args.regularize,
            se=args.se,
            seed=args.seed,
            ylo=args.ylo,
            yhi=args.yhi,
            cdf_grid=args.cdf_grid,
        )
    return RunConfig(
        data=args.data,
        outcome=args.outcome,
        treatment=args.treatment,
        instruments=tuple(_split(args.instruments)),
        controls=tuple(_split(args.controls)),
        discretize=tuple(args.discretize),
        auto_orient=args.auto_orient,
        **extra,
    )


# =========================
# COMMANDS
# =========================
def _emit(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def cmd_estimate(args) -> int:
    report = run(_config(args))
    if args.save:
        from .db import SessionLocal, init_db
        from .models import save_report

        init_db()
        db = SessionLocal()
        try:
            report["run_id"] = save_report(db, report).id
        finally:
            db.close()

    if args.out == "json":
        _emit(dumps_report(report), args.output)
    elif args.out == "csv":
        if not args.output:
            raise InputError("--out csv needs --output")
        for path in write_csv(report, args.output):
            log.info("wrote %s", path)
    else:
        if not args.output:
            raise InputError("--out pdf needs --output")
        from .pdf_utils import build_report_pdf

        with open(args.output, "wb") as fh:
            fh.write(build_report_pdf(report))
    return 0


def cmd_diagnose(args) -> int:
    _emit(dumps_report(diagnose(_config(args))), args.output)
    return 0


def _dgp(text: str):
    if text.startswith("file:"):
        return load_dgp_spec(text[5:])
    if text == "two":
        return two_instrument_spec()
    if text.startswith("three:"):
        try:
            return three_instrument_spec(int(text[6:]))
        except ValueError as exc:
            raise InputError(f"bad design {text!r}") from exc
    raise InputError(f"unknown design {text!r}; use three:1, three:2, two or file:<path>")


def cmd_simulate(args) -> int:
    dgp = _dgp(args.dgp)
    spec = replace(parse_estimand(args.estimand, dgp.J), variance="sandwich")
    res = run_monte_carlo(dgp, _split(args.estimators), args.reps, args.seed, args.n, spec, args.threads)
    frame = res.to_frame()
    if args.out:
        frame.to_csv(args.out, index=False, float_format="%.17g")
    else:
        frame.to_csv(sys.stdout, index=False, float_format="%.17g")
    return 0


def cmd_enumerate(args) -> int:
    if args.count_only:
        sys.stdout.write(f"{count_compliance_groups(args.j)}\n")
        return 0
    for g in enumerate_compliance_groups(args.j):
        sys.stdout.write(group_label(g) + "\n")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("vmiv.main:app", host=args.host, port=args.port)
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "enumerate": cmd_enumerate,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: config.LOG_LEVEL, 1: "INFO"}.get(args.verbose, "DEBUG")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except WeakIdentificationError as exc:
        log.error("%s", exc)
        return 2
    except VmivError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
