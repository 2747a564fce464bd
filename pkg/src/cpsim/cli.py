"""Command line: ``cpsim run | mem | schedule | verify``.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import mem_model
from .engines import ModelConfig
from .engines.schedule import schedule_dump
from .experiment import (ConfigError, ConfigIOError, emit_report, parse_config, report_csv, report_json,
                         run_experiment)
from .verify import verify_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _add_run(sub):
    p = sub.add_parser("run", help="run one experiment and emit its report")
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--method", choices=("oracle", "ulysses", "ring", "upipe", "hybrid"))
    for name in ("S", "H_q", "H_kv", "d_head", "d_ff", "V", "L"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--ulysses-degree", type=int)
    p.add_argument("--ring-degree", type=int)
    p.add_argument("--bytes-per-element", type=int)
    p.add_argument("--U", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--causal", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--backward", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--gqa-schedule", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--output", help="report path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def _add_mem(sub):
    p = sub.add_parser("mem", help="analytical attention-block and stage memory")
    p.add_argument("--method", choices=mem_model.METHODS, default="ulysses")
    p.add_argument("--S", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--R", type=int, default=1)
    p.add_argument("--nu", type=int)
    p.add_argument("--pi", type=int)
    p.add_argument("--H-q", dest="H_q", type=int, help="with --d-head, --d-ff and --V adds the stage breakdown")
    p.add_argument("--d-head", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--V", type=int)
    p.add_argument("--bytes-per-element", type=int, default=2)


def _add_schedule(sub):
    p = sub.add_parser("schedule", help="grouped-query stage schedule with U == C")
    p.add_argument("--H-q", dest="H_q", type=int, required=True)
    p.add_argument("--H-kv", dest="H_kv", type=int, required=True)
    p.add_argument("--C", type=int, required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of text")


def _add_verify(sub):
    p = sub.add_parser("verify", help="run the verification grid")
    p.add_argument("--grid", choices=("small", "full"), default="small")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output", help="write the summary JSON here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpsim", description="Simulated context-parallel attention.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_mem(sub)
    _add_schedule(sub)
    _add_verify(sub)
    return parser


def _overrides(args) -> dict:
    model = {k: getattr(args, k) for k in ("S", "H_q", "H_kv", "d_head", "d_ff", "V", "L")}
    mesh = {"C": args.C, "ulysses_degree": args.ulysses_degree, "ring_degree": args.ring_degree,
            "bytes_per_element": args.bytes_per_element}
    top = {"method": args.method, "U": args.U, "seed": args.seed, "causal": args.causal,
           "backward": args.backward, "gqa_schedule": args.gqa_schedule, "output": args.output}
    return {"model": model, "mesh": mesh, **top}


def _write(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def cmd_run(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    report = run_experiment(cfg)
    if cfg.output:
        emit_report(report, cfg.output, args.format)
    else:
        _write(report_json(report) if args.format == "json" else report_csv(report), None)
    for name, ok in report.checks.items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_mem(args) -> int:
    kw = {"S": args.S, "C": args.C, "L": args.L, "R": args.R, "nu": args.nu, "pi": args.pi}
    out = {
        "units": "d_model elements per device",
        "forward": mem_model.attn_fwd_peak(args.method, **kw).to_dict(),
        "backward": mem_model.attn_bwd_peak(args.method, **kw).to_dict(),
    }
    if None not in (args.H_q, args.d_head, args.d_ff, args.V):
        model = ModelConfig(args.S, args.H_q, args.H_q, args.d_head, d_ff=args.d_ff, V=args.V)
        out["stages_bytes"] = {k: v.to_dict()
                               for k, v in mem_model.table1_breakdown(model, args.bytes_per_element).items()}
    _write(json.dumps(out, indent=2) + "\n", None)
    return EXIT_OK


def cmd_schedule(args) -> int:
    text, data = schedule_dump(args.H_q, args.H_kv, args.C)
    _write(json.dumps(data, indent=2) + "\n" if args.json else text + "\n", None)
    if data["fallback"]:
        print(f"warning: {data['warning']}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    summary = verify_suite(args.grid, jobs=args.jobs)
    text = json.dumps(summary, indent=2) + "\n"
    if args.output:
        _write(text, args.output)
    print(f"grid={summary['grid']} cases={summary['cases']} checks={summary['checks']} "
          f"passed={summary['passed']} failed={summary['failed']} "
          f"known_discrepancies={len(summary['known_discrepancies'])}")
    for f in summary["failures"]:
        print(f"FAIL {f['check']} {json.dumps(f['case'], sort_keys=True)}: {f['detail']}")
    return EXIT_OK if summary["ok"] else EXIT_FAIL


COMMANDS = {"run": cmd_run, "mem": cmd_mem, "schedule": cmd_schedule, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
