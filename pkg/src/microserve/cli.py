"""Command-line entry point.

Exit codes: 0 on success, 1 for configuration or input errors, 2 when a run
trips an internal invariant.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import harness
from .compiler import compile_workflow, passes_from_config
from .errors import ConfigError, CorruptLog, InvariantViolation, MicroserveError
from .metrics import replay
from .profiles import load_profiles
from .sim import dumps_log
from .workflows import library
from .workload import dumps_trace


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Sequence[str]) -> dict:
    """``section.key=value`` pairs to a nested override document."""
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected section.key=value, got {pair!r}", "--set")
        path, value = pair.split("=", 1)
        parts = path.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def _write(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_compile(args) -> int:
    if args.workflow not in library():
        raise ConfigError(f"unknown workflow {args.workflow!r}", "workflow")
    passes = passes_from_config(_parse_value(args.passes) if args.passes.startswith("[")
                                else [p for p in args.passes.split(",") if p])
    cw = compile_workflow(library()[args.workflow], passes)
    _write(args.output, (cw.to_dot() if args.format == "dot" else cw.to_json()) + "\n")
    return 0


def cmd_trace_gen(args) -> int:
    exp = harness.load_config(args.config, _overrides(args.set))
    if exp.trace is None:
        raise ConfigError("trace-gen needs a generated trace, not a trace path", "trace.path")
    _write(args.output, dumps_trace(harness.build_trace(exp)))
    return 0


def cmd_run(args) -> int:
    exp = harness.load_config(args.config, _overrides(args.set))
    metrics, log = harness.run(exp)
    if args.log:
        Path(args.log).write_text(dumps_log(log))
    _write(args.output, json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_sweep(args) -> int:
    exp = harness.load_config(args.config, _overrides(args.set))
    values = [float(v) for v in args.values.split(",") if v]
    schedulers = [s for s in args.schedulers.split(",") if s]
    bad = [s for s in schedulers if s not in harness.SCHEDULERS]
    if bad:
        raise ConfigError(f"unknown scheduler {bad[0]!r}", "--schedulers")
    rows = harness.sweep(args.axis, values, exp.raw, schedulers)
    _write(args.csv, harness.rows_to_csv(rows))
    if args.png:
        from .report import plot_sweep
        plot_sweep(rows, args.png)
    return 0


def cmd_replay(args) -> int:
    metrics = replay(args.log)
    _write(args.output, json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_validate_profile(args) -> int:
    reg = load_profiles(args.profile)
    print(f"ok: {len(reg)} models")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="microserve", description="Micro-serving simulator for diffusion workflows")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a bundled workflow to JSON or DOT")
    c.add_argument("workflow")
    c.add_argument("--passes", default="loop_fusion", help="comma list or JSON array of pass configs")
    c.add_argument("--format", choices=("json", "dot"), default="json")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_compile)

    for name, func, help_ in (("trace-gen", cmd_trace_gen, "write a request trace as JSONL"),
                              ("run", cmd_run, "simulate one experiment and print metrics")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help=f"config JSON (default: ${harness.CONFIG_ENV})")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        s.add_argument("-o", "--output")
        if name == "run":
            s.add_argument("--log", help="write the event log (JSONL) here")
        s.set_defaults(func=func)

    w = sub.add_parser("sweep", help="sweep one axis across schedulers; CSV plus optional PNG")
    w.add_argument("--axis", required=True, choices=sorted(harness.SWEEP_AXES))
    w.add_argument("--values", required=True, help="comma-separated, ascending")
    w.add_argument("--schedulers", default=",".join(harness.SCHEDULERS))
    w.add_argument("--config")
    w.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    w.add_argument("--csv", default="-")
    w.add_argument("--png")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("replay", help="recompute metrics from an event log")
    r.add_argument("log")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_replay)

    v = sub.add_parser("validate-profile", help="check a latency profile document")
    v.add_argument("profile")
    v.set_defaults(func=cmd_validate_profile)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CorruptLog) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MicroserveError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
