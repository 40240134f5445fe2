"""Command-line entry point.

Exit codes: 0 success, 1 findings (violations, denied pages, faults, audit
findings), 2 usage or input errors. Results go to stdout, diagnostics to
stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from dotenv import dotenv_values

from config import DEFAULT_FUEL, DEFAULT_TRAP_SYMBOL, PAGE_SIZE, VERSION
from isa.allowlist import Allowlist, load_allowlist
from security.audit import audit_isolation
from security.layout_file import format_layout, load_layout
from security.policy import (
    LaunchRequest,
    Mode,
    TaskKind,
    build_system_layout,
    configure_elevated,
    configure_legacy,
    task_state,
)
from security.scanner import scan_buffer, split_pages, vet_launch
from sim.attacks import load_script, run_attack
from sim.machine import Exited, FuelExhausted, format_trace, run, task_kind_of
from toolchain.asm_frontend import parse_file, print_program
from toolchain.rewriter import RewriteOptions, rewrite
from toolchain.verifier import POLICIES, verify

logger = logging.getLogger("inversim")


def _allowlist(args: argparse.Namespace) -> Optional[Allowlist]:
    return load_allowlist(Path(args.allowlist)) if getattr(args, "allowlist", None) else None


def _write_output(text: str, out: Optional[str]) -> None:
    if out and out != "-":
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ── Subcommands ────────────────────────────────────────────────────────

def cmd_scan(args: argparse.Namespace) -> int:
    data = Path(args.file).read_bytes()
    verdicts = scan_buffer(data, args.page_size, _allowlist(args))
    denied = 0
    for i, v in enumerate(verdicts):
        for viol in v.violations:
            print(f"page {i} offset {viol.offset:#x} {viol.cls.describe()}")
        denied += 0 if v.allowed else 1
    print(f"{len(verdicts)} page(s) scanned, {denied} denied", file=sys.stderr)
    return 1 if denied else 0


def _env(args: argparse.Namespace) -> Dict[str, str]:
    env: Dict[str, str] = {}
    if args.env_file:
        path = Path(args.env_file)
        if not path.exists():
            raise FileNotFoundError(f"Env file not found: {path}")
        env.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    for item in args.env or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--env expects KEY=VALUE, got '{item}'")
        env[key] = value
    return env


def cmd_launch(args: argparse.Namespace) -> int:
    data = Path(args.binary).read_bytes()
    req = LaunchRequest(_env(args), split_pages(data, args.page_size))
    decision = vet_launch(req, _allowlist(args))
    print(f"task {decision.kind.value}")
    for i, v in enumerate(decision.verdicts):
        for viol in v.violations:
            print(f"page {i} offset {viol.offset:#x} {viol.cls.describe()}")
    print("loadable" if decision.loadable else "denied")
    return 0 if decision.loadable else 1


def cmd_rewrite(args: argparse.Namespace) -> int:
    program = parse_file(Path(args.input))
    opts = RewriteOptions(
        enable_ss=not args.no_ss,
        enable_cfi=not args.no_cfi,
        enable_mask=not args.no_mask,
        trap_symbol=args.trap_symbol,
    )
    _write_output(print_program(rewrite(program, opts)), args.output)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    program = parse_file(Path(args.input))
    policy = replace(POLICIES[args.policy], trap_symbol=args.trap_symbol)
    allow = _allowlist(args)
    if allow is not None:
        policy = replace(policy, allow=allow)
    violations = verify(program, policy)
    for v in violations:
        print(v)
    return 1 if violations else 0


def cmd_sim(args: argparse.Namespace) -> int:
    program = parse_file(Path(args.program))
    lf = load_layout(Path(args.layout))
    kind = task_kind_of(lf.layout)
    state = lf.states.get(kind) or task_state(kind, lf.mode or Mode.Hpds)
    common = dict(
        entry=args.entry, fuel=args.fuel, kind=kind, state=state,
        allow_unverified=args.allow_unverified, allow=_allowlist(args),
    )
    try:
        if args.attack:
            outcome = run_attack(program, lf.layout, load_script(Path(args.attack)), **common)
        else:
            outcome = run(program, lf.layout, **common)
    except FuelExhausted as e:
        print(f"FuelExhausted({e.steps})")
        return 1
    if args.trace:
        _write_output(format_trace(outcome.trace), args.trace)
    print(outcome.result)
    return 0 if isinstance(outcome.result, Exited) else 1


def cmd_layout(args: argparse.Namespace) -> int:
    mode = Mode(args.mode)
    if args.task == "system":
        layout = build_system_layout(mode)
        states = {k: task_state(k, mode) for k in (TaskKind.Elevated, TaskKind.Legacy)}
    elif args.task == "elevated":
        layout, state = configure_elevated(mode=mode)
        states = {TaskKind.Elevated: state}
    else:
        layout, state = configure_legacy(mode=mode)
        states = {TaskKind.Legacy: state}
    _write_output(format_layout(layout, mode, states), args.output)
    return 0


def cmd_perms_audit(args: argparse.Namespace) -> int:
    lf = load_layout(Path(args.layout))
    mode = Mode(args.mode) if args.mode else (lf.mode or Mode.Hpds)
    report = audit_isolation(
        lf.layout, mode, lf.states.get(TaskKind.Elevated), lf.states.get(TaskKind.Legacy)
    )
    sys.stdout.write(report.format_matrix())
    sys.stdout.write(report.format_findings())
    return 0 if report.ok else 1


# ── Parser ─────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inversim", description="Privilege Inversion toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="Scan a code image for forbidden instructions")
    p.add_argument("file")
    p.add_argument("--page-size", type=int, default=PAGE_SIZE)
    p.add_argument("--allowlist", help="Operand allowlist file (default: data/allowlist_default.txt)")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("launch", help="Decide the task kind and vet the binary")
    p.add_argument("binary")
    p.add_argument("--env-file", help="dotenv-format launch environment")
    p.add_argument("--env", action="append", metavar="KEY=VALUE")
    p.add_argument("--page-size", type=int, default=PAGE_SIZE)
    p.add_argument("--allowlist")
    p.set_defaults(func=cmd_launch)

    p = sub.add_parser("rewrite", help="Instrument a program for an elevated task")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="Output file (default: stdout)")
    p.add_argument("--no-ss", action="store_true", help="Skip the shadow stack")
    p.add_argument("--no-cfi", action="store_true", help="Skip forward-edge CFI")
    p.add_argument("--no-mask", action="store_true", help="Skip bit-masking")
    p.add_argument("--trap-symbol", default=DEFAULT_TRAP_SYMBOL)
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("verify", help="Check a program against the instrumentation rules")
    p.add_argument("input")
    p.add_argument("--policy", choices=sorted(POLICIES), default="full")
    p.add_argument("--allowlist")
    p.add_argument("--trap-symbol", default=DEFAULT_TRAP_SYMBOL)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sim", help="Run a program on the simulator")
    p.add_argument("program")
    p.add_argument("--layout", required=True)
    p.add_argument("--attack", help="Attack script")
    p.add_argument("--fuel", type=int, default=DEFAULT_FUEL)
    p.add_argument("--trace", help="Write the event trace here ('-' for stdout)")
    p.add_argument("--entry", default="main")
    p.add_argument("--allow-unverified", action="store_true",
                   help="Run an elevated program even if it fails verification")
    p.add_argument("--allowlist")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("layout", help="Print a policy-built layout")
    p.add_argument("--task", choices=["elevated", "legacy", "system"], default="system")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.Hpds.value)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("perms", help="Permission-model tools")
    perms = p.add_subparsers(dest="perms_command", required=True)
    a = perms.add_parser("audit", help="Audit a layout for isolation findings")
    a.add_argument("layout")
    a.add_argument("--mode", choices=[m.value for m in Mode])
    a.set_defaults(func=cmd_perms_audit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
