"""Interpreter for instrumented programs.

Every instruction fetch, load and store goes through ``check_access`` for the
task's CPU state and the region the address falls in. Unmapped addresses
(including the gap between the halves) translate to an invalid descriptor.

The loader prepends a ``__start`` stub that calls the entry function and
exits with its X0. SVC immediates are hooks: exit, write-trace, setjmp and
longjmp.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Set, Tuple, Union

from config import (
    CONDITION_ALIASES,
    DEFAULT_FUEL,
    DEFAULT_TRAP_SYMBOL,
    NOP_ENCODING,
    PAGE_SIZE,
    SS_SLOT_SIZE,
    START_SYMBOL,
    SVC_EXIT,
    SVC_LONGJMP,
    SVC_SETJMP,
    SVC_TRACE,
)
from isa.allowlist import Allowlist
from isa.decoder import Tag, decode
from security.perm_model import (
    AccessKind,
    AccessRequest,
    CpuSecState,
    ExceptionLevel,
    FaultReason,
    Half,
    LeafAttrs,
    Verdict,
    Via,
    WalkPath,
    check_access,
)
from security.policy import MemoryLayout, Region, Role, TaskKind, region_at, task_state
from security.scanner import default_allowlist, scan_buffer
from sim import SimError
from toolchain.assembler import Image, Located, assemble
from toolchain.ir import Block, Function, Imm, Instr, Label, Mem, Program, Reg, Sym, ins
from toolchain.rewriter import BTI_C
from toolchain.verifier import FULL, VerifyPolicy, verify

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
UNDEFINED = Verdict(False, FaultReason.UndefinedInstruction)
_UNMAPPED = WalkPath((), LeafAttrs(valid=False))
JMPBUF_FIELDS = ("pc", "sp", "x29", "x28", "shadow_top")


# ── Errors ─────────────────────────────────────────────────────────────

class FuelExhausted(SimError):
    def __init__(self, steps: int):
        super().__init__(f"fuel exhausted after {steps} steps")
        self.steps = steps


class UnverifiedProgram(SimError):
    def __init__(self, violations: list):
        super().__init__(
            f"program fails verification with {len(violations)} violation(s), first: {violations[0]}"
        )
        self.violations = violations


class LoadError(SimError):
    pass


class ShadowStackUnderflow(SimError):
    def __init__(self, address: int, verdict: Verdict):
        super().__init__(f"shadow stack underflow at {address:#x} ({verdict})")
        self.address = address
        self.verdict = verdict


# ── Outcomes ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Exited:
    code: int

    def __str__(self) -> str:
        return f"Exited({self.code})"


@dataclass(frozen=True)
class Neutralized:
    reason: str

    def __str__(self) -> str:
        return f"Neutralized({self.reason})"


@dataclass(frozen=True)
class Hijacked:
    pc: int

    def __str__(self) -> str:
        return f"Hijacked({self.pc:#x})"


@dataclass(frozen=True)
class Faulted:
    verdict: Verdict
    pc: int
    address: Optional[int] = None

    @property
    def reason(self) -> FaultReason:
        return self.verdict.fault_reason  # type: ignore[return-value]

    def __str__(self) -> str:
        where = f" at {self.address:#x}" if self.address is not None else ""
        return f"Faulted({self.verdict}, pc={self.pc:#x}{where})"


Result = Union[Exited, Neutralized, Hijacked, Faulted]


class TraceEvent(NamedTuple):
    step: int
    kind: str
    pc: int
    detail: str = ""

    def format(self) -> str:
        return f"{self.step} {self.kind} {self.pc:#x} {self.detail}".rstrip()


def format_trace(events: List[TraceEvent]) -> str:
    return "".join(e.format() + "\n" for e in events)


class _Fault(Exception):
    def __init__(self, verdict: Verdict, address: Optional[int] = None):
        super().__init__(str(verdict))
        self.verdict = verdict
        self.address = address


def _mask(width: int) -> int:
    return (1 << width) - 1


def _width(reg: Reg) -> int:
    return 32 if reg.is_w else 64


# ── Machine ────────────────────────────────────────────────────────────

class Machine:
    def __init__(
        self,
        layout: MemoryLayout,
        state: CpuSecState,
        image: Image,
        kind: TaskKind,
        allow: Allowlist,
        trap_symbol: str = DEFAULT_TRAP_SYMBOL,
    ):
        self.layout = layout
        self.state = state
        self.image = image
        self.kind = kind
        self.allow = allow
        self.x: List[int] = [0] * 31
        self.sp = 0
        self.pc = image.symbols.get(START_SYMBOL, image.base)
        self.next_pc = self.pc
        self.nzcv = (False, False, False, False)
        self.mem: Dict[str, bytearray] = {r.name: bytearray(r.size) for r in layout if r.path.leaf.valid}
        self.sysregs: Dict[str, int] = {}
        self.trace: List[TraceEvent] = []
        self.outputs: List[int] = []
        self.steps = 0
        self.result: Optional[Result] = None
        self.exec_denied: Set[int] = set()
        self.lr_slots: Dict[int, int] = {}  # stack address -> LR value a program store put there
        self.corrupted: Dict[int, int] = {}  # LR slots overwritten by an attack step
        self.attacker_values: Set[int] = set()
        self.trap_address = image.symbols.get(trap_symbol)
        self.shadow: Optional[Region] = next(iter(layout.by_role(Role.ShadowStack)), None)

    # -- registers --

    def read_reg(self, reg: Reg) -> int:
        if reg.is_zr:
            return 0
        if reg.is_sp:
            return self.sp
        value = self.x[reg.index]
        return value & 0xFFFFFFFF if reg.is_w else value

    def write_reg(self, reg: Reg, value: int) -> None:
        if reg.is_zr:
            return
        value &= _mask(_width(reg))
        if reg.is_sp:
            self.sp = value
        else:
            self.x[reg.index] = value

    @property
    def privileged(self) -> bool:
        return self.state.el != ExceptionLevel.EL0

    # -- memory --

    def _region(self, addr: int, size: int) -> Optional[Region]:
        region = region_at(self.layout, addr)
        if region is None or addr + size > region.end:
            return None
        return region

    def check(self, addr: int, size: int, kind: AccessKind, via: Via = Via.Regular) -> Verdict:
        region = self._region(addr, size)
        path = region.path if region is not None else _UNMAPPED
        half = Half.Upper if addr >> 63 else Half.Lower
        verdict = check_access(self.state, path, AccessRequest(kind, self.privileged, via, half))
        if verdict.allow and kind == AccessKind.InstrFetch and addr & ~(PAGE_SIZE - 1) in self.exec_denied:
            return Verdict(False, FaultReason.PxnFault)
        return verdict

    def read_bytes(self, addr: int, size: int, via: Via = Via.Regular) -> bytes:
        verdict = self.check(addr, size, AccessKind.Read, via)
        if not verdict.allow:
            raise _Fault(verdict, addr)
        region = self._region(addr, size)
        assert region is not None
        off = addr - region.base
        return bytes(self.mem[region.name][off:off + size])

    def write_bytes(self, addr: int, data: bytes, via: Via = Via.Regular) -> None:
        verdict = self.check(addr, len(data), AccessKind.Write, via)
        if not verdict.allow:
            raise _Fault(verdict, addr)
        region = self._region(addr, len(data))
        assert region is not None
        off = addr - region.base
        self.mem[region.name][off:off + len(data)] = data

    def load(self, addr: int, size: int, via: Via = Via.Regular) -> int:
        return int.from_bytes(self.read_bytes(addr, size, via), "little")

    def store(self, addr: int, size: int, value: int, via: Via = Via.Regular) -> None:
        self.write_bytes(addr, (value & _mask(size * 8)).to_bytes(size, "little"), via)

    def peek(self, addr: int, size: int) -> Optional[bytes]:
        """Raw bytes without a permission check (inspection only)."""
        region = self._region(addr, size)
        if region is None or region.name not in self.mem:
            return None
        off = addr - region.base
        return bytes(self.mem[region.name][off:off + size])

    def _track_store(self, addr: int, size: int, reg: Optional[Reg]) -> None:
        for slot in [s for s in self.lr_slots if s < addr + size and addr < s + 8]:
            del self.lr_slots[slot]
            self.corrupted.pop(slot, None)
        if reg is not None and reg.x == Reg("x30") and size == 8:
            self.lr_slots[addr] = self.x[30]

    def attack_write(self, addr: int, data: bytes) -> None:
        """Arbitrary-write primitive: a regular store with the task's privilege."""
        self.emit("attack", f"write {addr:#x} {data.hex()}")
        try:
            self.write_bytes(addr, data)
        except _Fault as f:
            self.finish(Faulted(f.verdict, self.pc, f.address), "fault", f"{f.verdict} at {addr:#x}")
            return
        for slot, legit in self.lr_slots.items():
            if slot < addr + len(data) and addr < slot + 8:
                now = int.from_bytes(self.peek(slot, 8) or b"", "little")
                if now != legit:
                    self.corrupted[slot] = now

    def attack_read(self, addr: int, size: int) -> Optional[bytes]:
        try:
            data = self.read_bytes(addr, size)
        except _Fault as f:
            self.emit("attack", f"read {addr:#x} {size}")
            self.finish(Faulted(f.verdict, self.pc, f.address), "fault", f"{f.verdict} at {addr:#x}")
            return None
        self.emit("attack", f"read {addr:#x} {data.hex()}")
        return data

    # -- trace / status --

    def emit(self, kind: str, detail: str = "") -> None:
        self.trace.append(TraceEvent(self.steps, kind, self.pc, detail))

    def finish(self, result: Result, kind: str, detail: str = "") -> None:
        self.emit(kind, detail)
        self.result = result
        if isinstance(result, Exited):
            logger.debug("exited with %d after %d steps", result.code, self.steps)
        else:
            logger.info("%s at pc=%#x after %d steps", result, self.pc, self.steps)

    def next_instr(self) -> Optional[Instr]:
        loc = self.image.located.get(self.pc)
        return loc.instr if loc is not None else None

    # -- execution --

    def run(self, fuel: int = DEFAULT_FUEL, until: Optional[Callable[["Machine"], bool]] = None) -> None:
        """Step until a result, or until ``until`` holds before an instruction."""
        first = True
        while self.result is None:
            if until is not None and not first and until(self):
                return
            first = False
            if self.steps >= fuel:
                raise FuelExhausted(self.steps)
            self.step()

    def step(self) -> None:
        if self.result is not None:
            return
        pc = self.pc
        try:
            self._step()
        except _Fault as f:
            self.pc = pc
            where = f" at {f.address:#x}" if f.address is not None else ""
            self.finish(Faulted(f.verdict, pc, f.address), "fault", f"{f.verdict}{where}")

    def _step(self) -> None:
        pc = self.pc
        if self.trap_address is not None and pc == self.trap_address:
            self.finish(Neutralized("CFI trap"), "cfi-trap")
            return
        verdict = self.check(pc, 4, AccessKind.InstrFetch)
        if not verdict.allow:
            raise _Fault(verdict, pc)
        if pc in self.attacker_values:
            self.finish(Hijacked(pc), "hijacked")
            return
        loc = self.image.located.get(pc)
        if loc is None:
            raise _Fault(UNDEFINED, pc)
        self.steps += 1
        self.next_pc = (pc + 4) & MASK64
        self._execute(loc)
        if self.result is None:
            self.pc = self.next_pc & MASK64

    def _target(self, label: str, fn: str) -> int:
        addr = self.image.blocks.get((fn, label))
        return addr if addr is not None else self.image.symbols[label]

    def _operand(self, op: object, width: int) -> int:
        if isinstance(op, Imm):
            return (op.value << op.shift) & _mask(width)
        assert isinstance(op, Reg)
        return self.read_reg(op)

    def _address(self, mem: Mem) -> Tuple[int, Optional[int]]:
        base = self.read_reg(mem.base)
        if mem.index is not None:
            return (base + self.read_reg(mem.index)) & MASK64, None
        moved = (base + mem.offset) & MASK64
        if mem.mode == "post":
            return base, moved
        return moved, moved if mem.mode == "pre" else None

    def _set_flags_sub(self, a: int, b: int, width: int) -> None:
        mask = _mask(width)
        result = (a - b) & mask
        top = width - 1
        n = bool(result >> top & 1)
        z = result == 0
        c = a >= b
        v = bool(((a ^ b) & (a ^ result)) >> top & 1)
        self.nzcv = (n, z, c, v)

    def condition(self, cond: str) -> bool:
        n, z, c, v = self.nzcv
        cond = CONDITION_ALIASES.get(cond, cond)
        table = {
            "eq": z, "ne": not z, "cs": c, "cc": not c, "mi": n, "pl": not n,
            "vs": v, "vc": not v, "hi": c and not z, "ls": not (c and not z),
            "ge": n == v, "lt": n != v, "gt": not z and n == v, "le": not (not z and n == v),
            "al": True, "nv": True,
        }
        return table[cond]

    def _execute(self, loc: Located) -> None:
        instr = loc.instr
        m = instr.mnemonic
        ops = instr.operands
        pc = self.pc

        if m in ("nop", "bti"):
            return
        if m in ("add", "sub"):
            rd, rn = ops[0], ops[1]
            width = _width(rd)  # type: ignore[arg-type]
            b = self._operand(ops[2], width)
            a = self.read_reg(rn)  # type: ignore[arg-type]
            self.write_reg(rd, a + b if m == "add" else a - b)  # type: ignore[arg-type]
        elif m == "cmp":
            width = _width(ops[0])  # type: ignore[arg-type]
            self._set_flags_sub(self.read_reg(ops[0]), self._operand(ops[1], width), width)  # type: ignore[arg-type]
        elif m == "mul":
            self.write_reg(ops[0], self.read_reg(ops[1]) * self.read_reg(ops[2]))  # type: ignore[arg-type]
        elif m == "and":
            width = _width(ops[0])  # type: ignore[arg-type]
            self.write_reg(ops[0], self.read_reg(ops[1]) & self._operand(ops[2], width))  # type: ignore[arg-type]
        elif m == "mov":
            self.write_reg(ops[0], self._operand(ops[1], 64))  # type: ignore[arg-type]
        elif m == "movz":
            imm = ops[1]
            assert isinstance(imm, Imm)
            self.write_reg(ops[0], imm.value << imm.shift)  # type: ignore[arg-type]
        elif m == "movk":
            imm = ops[1]
            assert isinstance(imm, Imm)
            old = self.read_reg(ops[0])  # type: ignore[arg-type]
            self.write_reg(ops[0], (old & ~(0xFFFF << imm.shift)) | (imm.value << imm.shift))  # type: ignore[arg-type]
        elif m == "adr":
            self.write_reg(ops[0], self._target(instr.label() or "", loc.function))  # type: ignore[arg-type]
        elif m in ("ldr", "str", "ldtr", "sttr"):
            self._load_store(instr)
        elif m in ("ldp", "stp"):
            self._pair(instr)
        elif m == "b":
            target = self._target(instr.label() or "", loc.function)
            if (loc.function, instr.label()) not in self.image.blocks:
                self.emit("tail", f"{target:#x}")
            self.next_pc = target
        elif m.startswith("b."):
            if self.condition(m[2:]):
                self.next_pc = self._target(instr.label() or "", loc.function)
        elif m == "bl":
            target = self._target(instr.label() or "", loc.function)
            self.x[30] = (pc + 4) & MASK64
            self.emit("call", f"{target:#x}")
            self.next_pc = target
        elif m == "blr":
            target = self.read_reg(instr.branch_reg())
            self.x[30] = (pc + 4) & MASK64
            self.emit("call", f"{target:#x}")
            self.next_pc = target
        elif m == "br":
            target = self.read_reg(instr.branch_reg())
            if instr.tail:
                self.emit("tail", f"{target:#x}")
            self.next_pc = target
        elif m == "ret":
            self._ret(self.read_reg(instr.branch_reg()))
        elif m == "svc":
            self._svc(ops[0].value)  # type: ignore[union-attr]
        elif m in ("hvc", "smc", "eret"):
            raise _Fault(UNDEFINED, pc)
        elif m == "mrs":
            self._mrs(instr)
        elif m == "msr":
            self._msr(instr)
        elif m == ".word":
            word = ops[0].value  # type: ignore[union-attr]
            if word != NOP_ENCODING and decode(word).tag != Tag.BtiLabel:
                raise _Fault(UNDEFINED, pc)
        else:
            raise _Fault(UNDEFINED, pc)

    def _load_store(self, instr: Instr) -> None:
        rt, mem = instr.operands[0], instr.operands[1]
        assert isinstance(rt, Reg) and isinstance(mem, Mem)
        via = Via.Lsu if instr.mnemonic in ("ldtr", "sttr") else Via.Regular
        size = 4 if rt.is_w else 8
        addr, writeback = self._address(mem)
        if instr.mnemonic in ("ldr", "ldtr"):
            self.write_reg(rt, self.load(addr, size, via))
        else:
            self.store(addr, size, self.read_reg(rt), via)
            if via == Via.Regular:
                self._track_store(addr, size, rt)
        if writeback is not None:
            self.write_reg(mem.base, writeback)

    def _pair(self, instr: Instr) -> None:
        r1, r2, mem = instr.operands
        assert isinstance(r1, Reg) and isinstance(r2, Reg) and isinstance(mem, Mem)
        size = 4 if r1.is_w else 8
        addr, writeback = self._address(mem)
        if instr.mnemonic == "ldp":
            first, second = self.load(addr, size), self.load(addr + size, size)
            self.write_reg(r1, first)
            self.write_reg(r2, second)
        else:
            first, second = self.read_reg(r1), self.read_reg(r2)
            self.store(addr, size, first)
            self.store(addr + size, size, second)
            self._track_store(addr, size, r1)
            self._track_store(addr + size, size, r2)
        if writeback is not None:
            self.write_reg(mem.base, writeback)

    def _ret(self, target: int) -> None:
        for slot, value in self.corrupted.items():
            if self.lr_slots.get(slot) == target and value != target:
                self.emit("ret", f"{target:#x}")
                self.finish(Neutralized("return uses shadow copy"), "neutralized",
                            f"stack slot {slot:#x} holds {value:#x}")
                return
        self.emit("ret", f"{target:#x}")
        self.next_pc = target

    # -- system instructions --

    def _sysreg_ok(self, name: str, write: bool) -> bool:
        return self.privileged or self.allow.allows_sysreg(name, write)

    def _mrs(self, instr: Instr) -> None:
        rt, sym = instr.operands
        assert isinstance(rt, Reg) and isinstance(sym, Sym)
        if not self._sysreg_ok(sym.name, write=False):
            raise _Fault(UNDEFINED, self.pc)
        if sym.name == "NZCV":
            n, z, c, v = self.nzcv
            value = (n << 31) | (z << 30) | (c << 29) | (v << 28)
        else:
            value = self.sysregs.get(sym.name, 0)
        self.write_reg(rt, value)

    def _msr(self, instr: Instr) -> None:
        sym, src = instr.operands
        assert isinstance(sym, Sym)
        if isinstance(src, Imm):
            if not self.privileged:
                raise _Fault(UNDEFINED, self.pc)
            if sym.name == "PAN":
                self.state = replace(self.state, pan=bool(src.value))
            elif sym.name == "UAO":
                self.state = replace(self.state, uao=bool(src.value))
            self.sysregs[sym.name] = src.value
            self.emit("pstate", f"{sym.name}={src.value}")
            return
        if not self._sysreg_ok(sym.name, write=True):
            raise _Fault(UNDEFINED, self.pc)
        value = self.read_reg(src)  # type: ignore[arg-type]
        if sym.name == "NZCV":
            self.nzcv = tuple(bool(value >> bit & 1) for bit in (31, 30, 29, 28))  # type: ignore[assignment]
        else:
            self.sysregs[sym.name] = value

    def _svc(self, number: int) -> None:
        if number == SVC_EXIT:
            self.finish(Exited(self.x[0]), "exit", str(self.x[0]))
        elif number == SVC_TRACE:
            self.outputs.append(self.x[0])
            self.emit("trace", f"{self.x[0]:#x}")
        elif number == SVC_SETJMP:
            self._setjmp()
        elif number == SVC_LONGJMP:
            self._longjmp()
        else:
            raise _Fault(UNDEFINED, self.pc)

    def _setjmp(self) -> None:
        buf = self.x[0]
        x28, top = 0, 0
        if self.shadow is not None:
            x28 = self.x[28]
            if x28 > self.shadow.base:
                top = self.load(x28 - SS_SLOT_SIZE, SS_SLOT_SIZE, Via.Lsu)
        values = ((self.pc + 4) & MASK64, self.sp, self.x[29], x28, top)
        for i, value in enumerate(values):
            self.store(buf + 8 * i, 8, value)
        self.emit("setjmp", f"buf={buf:#x} ra={top:#x}")
        self.x[0] = 0

    def _longjmp(self) -> None:
        buf, val = self.x[0], self.x[1]
        pc, sp, fp, saved_x28, target = (self.load(buf + 8 * i, 8) for i in range(len(JMPBUF_FIELDS)))
        if self.shadow is not None:
            try:
                self.x[28] = longjmp_unwind(self, target, saved_x28)
            except ShadowStackUnderflow as e:
                self.emit("unwind", f"underflow at {e.address:#x}")
                raise _Fault(e.verdict, e.address) from None
        self.emit("longjmp", f"{pc:#x} val={val}")
        self.sp = sp
        self.x[29] = fp
        self.x[0] = val or 1
        self.next_pc = pc


def longjmp_unwind(m: Machine, target_ra: int, saved_x28: int) -> int:
    """Walk X28 down one slot at a time until the slot below it holds ``target_ra``.

    Reads go through LSU like the epilogue's reload, so running into the low
    guard raises ``ShadowStackUnderflow``. ``saved_x28`` is only reported.
    """
    candidate = m.x[28]
    steps = 0
    while True:
        slot = candidate - SS_SLOT_SIZE
        verdict = m.check(slot, SS_SLOT_SIZE, AccessKind.Read, Via.Lsu)
        if not verdict.allow:
            raise ShadowStackUnderflow(slot, verdict)
        if m.load(slot, SS_SLOT_SIZE, Via.Lsu) == target_ra:
            if candidate != saved_x28:
                logger.debug("unwound x28 to %#x (setjmp saved %#x)", candidate, saved_x28)
            m.emit("unwind", f"x28={candidate:#x} steps={steps}")
            return candidate
        candidate = slot
        steps += 1


# ── Loading and running ────────────────────────────────────────────────

@dataclass
class Outcome:
    result: Result
    trace: List[TraceEvent]
    machine: Machine

    @property
    def exit_code(self) -> Optional[int]:
        return self.result.code if isinstance(self.result, Exited) else None


def start_stub(entry: str) -> Function:
    body = [BTI_C, ins("bl", Label(entry)), ins("svc", Imm(SVC_EXIT))]
    return Function(START_SYMBOL, [Block("entry", body)])


def task_kind_of(layout: MemoryLayout) -> TaskKind:
    return TaskKind.Elevated if layout.by_role(Role.ShadowStack) else TaskKind.Legacy


def _stack_region(layout: MemoryLayout) -> Region:
    data = layout.by_role(Role.TaskData)
    stacks = [r for r in data if r.name.split(".")[-1] == "stack"]
    if stacks:
        return stacks[0]
    if data:
        return data[-1]
    raise LoadError("layout has no task data region for the stack")


def load(
    program: Program,
    layout: MemoryLayout,
    entry: str = "main",
    kind: Optional[TaskKind] = None,
    state: Optional[CpuSecState] = None,
    allow: Optional[Allowlist] = None,
    trap_symbol: str = DEFAULT_TRAP_SYMBOL,
) -> Machine:
    """Assemble ``program`` into the task's code region and set up registers."""
    if program.function(START_SYMBOL) is not None:
        raise LoadError(f"'{START_SYMBOL}' is reserved for the loader")
    if program.function(entry) is None:
        raise LoadError(f"entry function '{entry}' not found")
    code_regions = layout.by_role(Role.TaskCode)
    if not code_regions:
        raise LoadError("layout has no task code region")
    code = code_regions[0]
    kind = kind or task_kind_of(layout)
    state = state or task_state(kind)
    allow = allow or default_allowlist()

    full = Program([start_stub(entry)] + list(program.functions), source=program.source)
    image = assemble(full, code.base)
    if len(image.code) > code.size:
        raise LoadError(f"program needs {len(image.code):#x} bytes, code region holds {code.size:#x}")

    m = Machine(layout, state, image, kind, allow, trap_symbol)
    m.mem[code.name][:len(image.code)] = image.code
    if kind == TaskKind.Elevated:
        for i, verdict in enumerate(scan_buffer(image.code, PAGE_SIZE, allow)):
            if not verdict.allowed:
                page = code.base + i * PAGE_SIZE
                m.exec_denied.add(page)
                logger.warning("code page %#x denied by the scanner; mapped without execute", page)
    m.sp = _stack_region(layout).end
    if m.shadow is not None:
        m.x[28] = m.shadow.base
    return m


def prepare(
    program: Program,
    layout: MemoryLayout,
    entry: str = "main",
    kind: Optional[TaskKind] = None,
    state: Optional[CpuSecState] = None,
    allow_unverified: bool = False,
    allow: Optional[Allowlist] = None,
    policy: VerifyPolicy = FULL,
    trap_symbol: str = DEFAULT_TRAP_SYMBOL,
) -> Machine:
    kind = kind or task_kind_of(layout)
    if kind == TaskKind.Elevated and not allow_unverified:
        violations = verify(program, replace(policy, allow=allow or policy.allow, trap_symbol=trap_symbol))
        if violations:
            raise UnverifiedProgram(violations)
    return load(program, layout, entry, kind, state, allow, trap_symbol)


def run(
    program: Program,
    layout: MemoryLayout,
    entry: str = "main",
    fuel: int = DEFAULT_FUEL,
    kind: Optional[TaskKind] = None,
    state: Optional[CpuSecState] = None,
    allow_unverified: bool = False,
    allow: Optional[Allowlist] = None,
    policy: VerifyPolicy = FULL,
) -> Outcome:
    """Run ``entry`` to completion. Elevated programs must verify unless flagged."""
    m = prepare(program, layout, entry, kind, state, allow_unverified, allow, policy)
    m.run(fuel)
    assert m.result is not None
    return Outcome(m.result, m.trace, m)
