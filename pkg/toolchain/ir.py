"""Program IR shared by the frontend, rewriter, verifier, assembler and simulator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

_REG_ALIASES = {"lr": "x30", "fp": "x29", "ip0": "x16", "ip1": "x17"}

TERMINATORS = frozenset({"b", "br", "ret"})
INDIRECT = frozenset({"blr", "br"})


@dataclass(frozen=True)
class Reg:
    name: str  # x0..x30, w0..w30, sp, xzr, wzr

    @property
    def index(self) -> int:
        if self.name in ("sp", "xzr", "wzr"):
            return 31
        return int(self.name[1:])

    @property
    def is_w(self) -> bool:
        return self.name.startswith("w")

    @property
    def is_sp(self) -> bool:
        return self.name == "sp"

    @property
    def is_zr(self) -> bool:
        return self.name in ("xzr", "wzr")

    @property
    def x(self) -> "Reg":
        """The 64-bit view of this register."""
        if self.name == "wzr":
            return Reg("xzr")
        if self.is_w:
            return Reg("x" + self.name[1:])
        return self

    def __str__(self) -> str:
        return self.name


def parse_reg(text: str) -> Optional[Reg]:
    t = text.strip().lower()
    t = _REG_ALIASES.get(t, t)
    if t in ("sp", "xzr", "wzr"):
        return Reg(t)
    if len(t) >= 2 and t[0] in "xw" and t[1:].isdigit():
        n = int(t[1:])
        if 0 <= n <= 30 and str(n) == t[1:]:
            return Reg(t)
    return None


def format_imm(value: int) -> str:
    if abs(value) < 4096:
        return f"#{value}"
    return f"#-{-value:#x}" if value < 0 else f"#{value:#x}"


@dataclass(frozen=True)
class Imm:
    value: int
    shift: int = 0

    def __str__(self) -> str:
        text = format_imm(self.value)
        return f"{text}, lsl #{self.shift}" if self.shift else text


@dataclass(frozen=True)
class Mem:
    base: Reg
    offset: int = 0
    mode: str = "offset"  # offset | pre | post
    index: Optional[Reg] = None

    def __str__(self) -> str:
        if self.index is not None:
            return f"[{self.base}, {self.index}]"
        if self.mode == "post":
            return f"[{self.base}], {format_imm(self.offset)}"
        if self.mode == "pre":
            return f"[{self.base}, {format_imm(self.offset)}]!"
        if self.offset:
            return f"[{self.base}, {format_imm(self.offset)}]"
        return f"[{self.base}]"

    @property
    def writeback(self) -> bool:
        return self.mode in ("pre", "post")


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Sym:
    """System register or PSTATE field operand of MRS/MSR."""
    name: str

    def __str__(self) -> str:
        return self.name.lower()


Operand = Union[Reg, Imm, Mem, Label, Sym]


@dataclass(frozen=True)
class Instr:
    mnemonic: str
    operands: Tuple[Operand, ...] = ()
    targets: Tuple[str, ...] = ()  # declared switch targets of an in-function BR
    tail: bool = False  # BR used as an indirect tail call

    def __str__(self) -> str:
        text = self.mnemonic
        if self.operands:
            text += " " + ", ".join(str(op) for op in self.operands)
        if self.mnemonic == "br":
            if self.targets:
                text += ", {" + ", ".join(self.targets) + "}"
            elif self.tail:
                text += ", tail"
        return text

    @property
    def is_terminator(self) -> bool:
        return self.mnemonic in TERMINATORS

    @property
    def unconstrained(self) -> bool:
        return self.mnemonic == "br" and not self.targets and not self.tail

    @property
    def is_switch(self) -> bool:
        return self.mnemonic == "br" and bool(self.targets)

    def reg(self, i: int = 0) -> Optional[Reg]:
        if i < len(self.operands) and isinstance(self.operands[i], Reg):
            return self.operands[i]  # type: ignore[return-value]
        return None

    def branch_reg(self) -> Reg:
        """Target register of BLR/BR/RET (x30 for a bare RET)."""
        return self.reg(0) or Reg("x30")

    def label(self) -> Optional[str]:
        for op in self.operands:
            if isinstance(op, Label):
                return op.name
        return None

    def written_regs(self) -> List[Reg]:
        """64-bit views of every register this instruction writes."""
        m = self.mnemonic
        out: List[Reg] = []
        if m in ("bl", "blr"):
            out.append(Reg("x30"))
        elif m in ("and", "mov", "movz", "movk", "add", "sub", "mul", "adr", "ldr", "ldtr", "mrs"):
            if self.reg(0) is not None:
                out.append(self.operands[0].x)  # type: ignore[union-attr]
        elif m == "ldp":
            out += [self.operands[0].x, self.operands[1].x]  # type: ignore[union-attr]
        for op in self.operands:
            if isinstance(op, Mem) and op.writeback:
                out.append(op.base.x)
        return [r for r in out if not r.is_zr]

    def mentions(self, reg: Reg) -> bool:
        want = reg.x
        for op in self.operands:
            if isinstance(op, Reg) and op.x == want:
                return True
            if isinstance(op, Mem) and (op.base.x == want or (op.index is not None and op.index.x == want)):
                return True
        return False


@dataclass
class Block:
    label: str
    instrs: List[Instr] = field(default_factory=list)

    @property
    def terminator(self) -> Optional[Instr]:
        if self.instrs and self.instrs[-1].is_terminator:
            return self.instrs[-1]
        return None


def _stores_lr(instr: Instr) -> bool:
    if instr.mnemonic == "str":
        return instr.reg(0) == Reg("x30")
    if instr.mnemonic == "stp":
        return Reg("x30") in (instr.reg(0), instr.reg(1))
    return False


@dataclass
class Function:
    name: str
    blocks: List[Block] = field(default_factory=list)
    address_taken: bool = False

    @property
    def entry(self) -> Block:
        return self.blocks[0]

    @property
    def spills_lr(self) -> bool:
        """True when any block stores LR with a regular store."""
        return any(True for _ in self.lr_spills())

    def lr_spills(self) -> Iterator[Tuple[Block, int, Instr]]:
        for b, idx, instr in self.instructions():
            if _stores_lr(instr):
                yield b, idx, instr

    def block(self, label: str) -> Optional[Block]:
        for b in self.blocks:
            if b.label == label:
                return b
        return None

    def instructions(self) -> Iterator[Tuple[Block, int, Instr]]:
        for b in self.blocks:
            for idx, ins in enumerate(b.instrs):
                yield b, idx, ins


@dataclass
class Program:
    functions: List[Function] = field(default_factory=list)
    source: str = field(default="<input>", compare=False)

    def function(self, name: str) -> Optional[Function]:
        for f in self.functions:
            if f.name == name:
                return f
        return None

    def function_names(self) -> List[str]:
        return [f.name for f in self.functions]


# ── Builders used by the rewriter and tests ────────────────────────────

def R(name: str) -> Reg:
    reg = parse_reg(name)
    if reg is None:
        raise ValueError(f"bad register '{name}'")
    return reg


def ins(mnemonic: str, *operands: Operand, targets: Tuple[str, ...] = (), tail: bool = False) -> Instr:
    return Instr(mnemonic, tuple(operands), targets, tail)
