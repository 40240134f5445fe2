"""Scripted memory-corruption attacks interleaved with execution.

Script lines::

    write <addr> <bytes>           arbitrary write (regular store, task privilege)
    read <addr> <len>              arbitrary read
    setreg x<N> <value>            overwrite a register
    resume-until <event>           ret | call | trace | fault | exit

Addresses and values are bare hex numbers, register offsets such as
``sp+0x10`` or ``x28-8`` (decimal unless prefixed), or ``&symbol`` for a
function address, optionally ``&symbol+4``. Bytes are a hex string, or a
``0x`` value or ``&symbol`` written as 8 little-endian bytes.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from config import DEFAULT_FUEL, DEFAULT_TRAP_SYMBOL, SVC_TRACE
from isa.allowlist import Allowlist
from security.perm_model import CpuSecState
from security.policy import MemoryLayout, TaskKind
from sim import SimError
from sim.machine import Machine, Outcome, prepare
from toolchain.ir import Imm, Program, parse_reg
from toolchain.verifier import FULL, VerifyPolicy

logger = logging.getLogger(__name__)

_EXPR_RE = re.compile(r"^(?P<base>&[A-Za-z_.$][\w.$]*|[a-z]+\d*)(?:(?P<sign>[+-])(?P<off>0x[0-9a-f]+|\d+))?$", re.IGNORECASE)


class AttackScriptError(SimError):
    def __init__(self, message: str, line: int = 0, source: str = "<script>"):
        super().__init__(f"{source}:{line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Expr:
    """``base + offset`` where base is a register, a symbol or nothing."""
    base: Optional[str]
    offset: int = 0

    def resolve(self, m: Machine) -> int:
        value = 0
        if self.base is not None and self.base.startswith("&"):
            name = self.base[1:]
            if name not in m.image.symbols:
                raise AttackScriptError(f"unknown symbol '{name}'")
            value = m.image.symbols[name]
        elif self.base is not None:
            reg = parse_reg(self.base)
            assert reg is not None
            value = m.read_reg(reg)
        return (value + self.offset) & ((1 << 64) - 1)

    def __str__(self) -> str:
        if self.base is None:
            return f"{self.offset:#x}"
        if not self.offset:
            return self.base
        sign = "-" if self.offset < 0 else "+"
        return f"{self.base}{sign}{abs(self.offset):#x}"


@dataclass(frozen=True)
class ArbitraryWrite:
    addr: Expr
    data: Union[bytes, Expr]


@dataclass(frozen=True)
class ArbitraryRead:
    addr: Expr
    length: int


@dataclass(frozen=True)
class RedirectReg:
    reg: str
    value: Expr


@dataclass(frozen=True)
class ResumeUntil:
    event: str


Step = Union[ArbitraryWrite, ArbitraryRead, RedirectReg, ResumeUntil]


@dataclass(frozen=True)
class AttackScript:
    steps: List[Step]
    source: str = "<script>"


def _at(mnemonics: tuple) -> Callable[[Machine], bool]:
    def pause(m: Machine) -> bool:
        instr = m.next_instr()
        return instr is not None and instr.mnemonic in mnemonics
    return pause


def _at_trace(m: Machine) -> bool:
    instr = m.next_instr()
    return instr is not None and instr.mnemonic == "svc" and instr.operands == (Imm(SVC_TRACE),)


PAUSES: Dict[str, Optional[Callable[[Machine], bool]]] = {
    "ret": _at(("ret",)),
    "call": _at(("bl", "blr")),
    "trace": _at_trace,
    "fault": None,
    "exit": None,
}


# ── Parsing ────────────────────────────────────────────────────────────

def parse_expr(text: str, line: int = 0, source: str = "<script>") -> Expr:
    t = text.strip()
    try:
        return Expr(None, int(t, 16))
    except ValueError:
        pass
    m = _EXPR_RE.match(t)
    if not m:
        raise AttackScriptError(f"malformed address or value '{text}'", line, source)
    base, sign, off = m.group("base"), m.group("sign"), m.group("off")
    if not base.startswith("&") and parse_reg(base) is None:
        raise AttackScriptError(f"unknown register '{base}'", line, source)
    offset = 0
    if off:
        offset = int(off, 16) if off.lower().startswith("0x") else int(off)
    return Expr(base, -offset if sign == "-" else offset)


def _parse_bytes(text: str, line: int, source: str) -> Union[bytes, Expr]:
    t = text.strip()
    if t.startswith("&") or t.lower().startswith("0x"):
        return parse_expr(t, line, source)
    try:
        data = bytes.fromhex(t)
    except ValueError:
        raise AttackScriptError(f"malformed byte string '{text}'", line, source) from None
    if not data:
        raise AttackScriptError("empty byte string", line, source)
    return data


def parse_script(text: str, source: str = "<script>") -> AttackScript:
    steps: List[Step] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        op, args = parts[0].lower(), parts[1:]
        if op == "write" and len(args) == 2:
            steps.append(ArbitraryWrite(parse_expr(args[0], lineno, source), _parse_bytes(args[1], lineno, source)))
        elif op == "read" and len(args) == 2:
            try:
                length = int(args[1], 0)
            except ValueError:
                raise AttackScriptError(f"malformed length '{args[1]}'", lineno, source) from None
            if length <= 0:
                raise AttackScriptError("read length must be positive", lineno, source)
            steps.append(ArbitraryRead(parse_expr(args[0], lineno, source), length))
        elif op == "setreg" and len(args) == 2:
            reg = parse_reg(args[0])
            if reg is None or reg.is_w or reg.is_sp or reg.is_zr:
                raise AttackScriptError(f"setreg needs an x register, got '{args[0]}'", lineno, source)
            steps.append(RedirectReg(reg.name, parse_expr(args[1], lineno, source)))
        elif op == "resume-until" and len(args) == 1:
            event = args[0].lower()
            if event not in PAUSES:
                raise AttackScriptError(
                    f"unknown event '{args[0]}' (expected {', '.join(PAUSES)})", lineno, source
                )
            steps.append(ResumeUntil(event))
        else:
            raise AttackScriptError(f"malformed step '{line}'", lineno, source)
    return AttackScript(steps, source)


def load_script(path: Path) -> AttackScript:
    return parse_script(Path(path).read_text(), source=str(path))


# ── Running ────────────────────────────────────────────────────────────

def apply_step(m: Machine, step: Step, fuel: int) -> None:
    if isinstance(step, ResumeUntil):
        m.run(fuel, until=PAUSES[step.event])
    elif isinstance(step, ArbitraryWrite):
        addr = step.addr.resolve(m)
        if isinstance(step.data, Expr):
            value = step.data.resolve(m)
            data = value.to_bytes(8, "little")
        else:
            data = step.data
        for i in range(0, len(data) - 7, 8):
            m.attacker_values.add(int.from_bytes(data[i:i + 8], "little"))
        m.attack_write(addr, data)
    elif isinstance(step, ArbitraryRead):
        m.attack_read(step.addr.resolve(m), step.length)
    elif isinstance(step, RedirectReg):
        value = step.value.resolve(m)
        reg = parse_reg(step.reg)
        assert reg is not None
        m.write_reg(reg, value)
        m.attacker_values.add(value)
        m.emit("attack", f"setreg {step.reg} {value:#x}")


def run_attack(
    program: Program,
    layout: MemoryLayout,
    script: AttackScript,
    entry: str = "main",
    fuel: int = DEFAULT_FUEL,
    kind: Optional[TaskKind] = None,
    state: Optional[CpuSecState] = None,
    allow_unverified: bool = False,
    allow: Optional[Allowlist] = None,
    policy: VerifyPolicy = FULL,
    trap_symbol: str = DEFAULT_TRAP_SYMBOL,
) -> Outcome:
    """Run ``program`` with the script's corruption steps interleaved."""
    m = prepare(program, layout, entry, kind, state, allow_unverified, allow, policy, trap_symbol)
    for step in script.steps:
        if m.result is not None:
            break
        apply_step(m, step, fuel)
    if m.result is None:
        m.run(fuel)
    assert m.result is not None
    logger.info("attack %s: %s", script.source, m.result)
    return Outcome(m.result, m.trace, m)
