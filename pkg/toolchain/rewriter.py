"""Compiler passes that turn a program into an elevated-task program.

``rewrite`` composes CFI, then the compact shadow stack on X28, then
bit-masking of every indirect transfer target:

    prologue   bti c; sttr x30, [x28]; add x28, x28, #8
    epilogue   sub x28, x28, #8; ldtr x30, [x28]; and x30, x30, #MASK; ret
    blr xT     ldr w16, [xT]; movz w17, #lo; movk w17, #hi, lsl #16;
               cmp w16, w17; b.ne __cfi_trap; and xT, xT, #MASK; blr xT
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import List, Optional, Set

from config import BTI_ENCODINGS, CFI_SCRATCH_REGS, CFI_TRAP_STATUS, DEFAULT_TRAP_SYMBOL, SHADOW_STACK_REG, SS_SLOT_SIZE, SVC_EXIT, TOP_BIT_MASK
from toolchain.ir import Block, Function, Imm, Instr, Label, Mem, Program, R, Reg, ins

logger = logging.getLogger(__name__)

X28 = R(SHADOW_STACK_REG)
X30 = R("x30")
W16, W17 = R("w" + CFI_SCRATCH_REGS[0][1:]), R("w" + CFI_SCRATCH_REGS[1][1:])
SCRATCH = {R(r) for r in CFI_SCRATCH_REGS}


class RewriteError(ValueError):
    pass


class X28Clobbered(RewriteError):
    pass


class UnconstrainedIndirectJump(RewriteError):
    pass


class InconsistentOptions(RewriteError):
    pass


class AlreadyInstrumented(RewriteError):
    pass


@dataclass(frozen=True)
class RewriteOptions:
    enable_ss: bool = True
    enable_cfi: bool = True
    enable_mask: bool = True
    trap_symbol: str = DEFAULT_TRAP_SYMBOL

    @property
    def any(self) -> bool:
        return self.enable_ss or self.enable_cfi or self.enable_mask


# ── Instruction patterns ───────────────────────────────────────────────

PUSH = (ins("sttr", X30, Mem(X28)), ins("add", X28, X28, Imm(SS_SLOT_SIZE)))
POP = (ins("sub", X28, X28, Imm(SS_SLOT_SIZE)), ins("ldtr", X30, Mem(X28)))
BTI_C = ins("bti", Label("c"))
BTI_J = ins("bti", Label("j"))


def mask_instr(reg: Reg) -> Instr:
    return ins("and", reg, reg, Imm(TOP_BIT_MASK))


def cfi_check(reg: Reg, label: str, trap: str) -> List[Instr]:
    """Load the word at the target and compare it with the required BTI encoding."""
    expected = BTI_ENCODINGS[label]
    return [
        ins("ldr", W16, Mem(reg)),
        ins("movz", W17, Imm(expected & 0xFFFF)),
        ins("movk", W17, Imm(expected >> 16, 16)),
        ins("cmp", W16, W17),
        ins("b.ne", Label(trap)),
    ]


CHECK_LEN = 5


def required_label(instr: Instr) -> str:
    """BTI flavour an indirect transfer must land on."""
    return "j" if instr.is_switch else "c"


def is_mask(instr: Instr, reg: Optional[Reg] = None) -> bool:
    if instr.mnemonic != "and" or len(instr.operands) != 3:
        return False
    rd, rn, imm = instr.operands
    if not (isinstance(rd, Reg) and rd == rn and isinstance(imm, Imm) and imm.value == TOP_BIT_MASK):
        return False
    return reg is None or rd == reg


def check_start(instrs: List[Instr], at: int) -> int:
    """Index where a CFI check sequence ending right before ``at`` begins, else ``at``."""
    if at < CHECK_LEN:
        return at
    window = instrs[at - CHECK_LEN:at]
    first, last = window[0], window[-1]
    if (first.mnemonic == "ldr" and first.reg(0) == W16 and last.mnemonic == "b.ne"
            and window[3] == ins("cmp", W16, W17)):
        return at - CHECK_LEN
    return at


def _copy(p: Program) -> Program:
    return copy.deepcopy(p)


def is_exit(f: Function, program: Program, instr: Instr) -> bool:
    """RET, direct tail call, or indirect tail call."""
    if instr.mnemonic == "ret":
        return True
    if instr.mnemonic == "br" and instr.tail:
        return True
    if instr.mnemonic == "b":
        label = instr.label()
        return f.block(label or "") is None and program.function(label or "") is not None
    return False


def is_conditional_tail(f: Function, program: Program, instr: Instr) -> bool:
    if not instr.mnemonic.startswith("b."):
        return False
    label = instr.label() or ""
    return f.block(label) is None and program.function(label) is not None and not is_trap(program, label)


# ── Shadow stack ───────────────────────────────────────────────────────

def _check_x28(f: Function) -> None:
    for b, idx, instr in f.instructions():
        if instr.mentions(X28):
            raise X28Clobbered(
                f"{f.name}:{b.label}:{idx}: '{instr}' uses {SHADOW_STACK_REG}, reserved for the shadow stack"
            )


def _drop_lr_reload(instrs: List[Instr], before: int) -> None:
    """Rewrite the last LR reload before ``before`` so only its SP effect remains."""
    for i in range(before - 1, -1, -1):
        instr = instrs[i]
        if instr.mnemonic == "ldr" and instr.reg(0) == X30:
            mem = instr.operands[1]
            if isinstance(mem, Mem) and mem.mode == "post":
                instrs[i] = ins("add", mem.base, mem.base, Imm(mem.offset))
            elif isinstance(mem, Mem) and mem.mode == "pre":
                instrs[i] = ins("add", mem.base, mem.base, Imm(mem.offset))
            else:
                del instrs[i]
            return
        if instr.mnemonic == "ldp" and X30 in (instr.reg(0), instr.reg(1)):
            other = instr.reg(1) if instr.reg(0) == X30 else instr.reg(0)
            mem = instr.operands[2]
            assert isinstance(mem, Mem) and other is not None
            second = instr.reg(1) == X30
            slot = 0 if second else 8
            if mem.mode == "post":
                if slot == 0:
                    instrs[i] = ins("ldr", other, Mem(mem.base, mem.offset, "post"))
                else:
                    instrs[i:i + 1] = [ins("ldr", other, Mem(mem.base, 8)),
                                       ins("add", mem.base, mem.base, Imm(mem.offset))]
            elif mem.mode == "pre":
                instrs[i:i + 1] = [ins("add", mem.base, mem.base, Imm(mem.offset)),
                                   ins("ldr", other, Mem(mem.base, slot))]
            else:
                instrs[i] = ins("ldr", other, Mem(mem.base, mem.offset + slot))
            return
        if X30 in instr.written_regs():
            return


def apply_shadow_stack(f: Function, program: Optional[Program] = None) -> Function:
    """Push LR to the shadow stack in the prologue, pop it in every epilogue."""
    _check_x28(f)
    program = program or Program([f])
    for b, idx, instr in f.instructions():
        if is_conditional_tail(f, program, instr):
            raise RewriteError(f"{f.name}:{b.label}:{idx}: conditional tail call '{instr}' cannot pop the shadow stack")
    if not f.spills_lr:
        return f
    f = copy.deepcopy(f)

    entry = f.entry.instrs
    at = 1 if entry and entry[0].mnemonic == "bti" else 0
    entry[at:at] = list(PUSH)

    for b in f.blocks:
        term = b.terminator
        if term is None or not is_exit(f, program, term):
            continue
        t = len(b.instrs) - 1
        at = check_start(b.instrs, t)
        _drop_lr_reload(b.instrs, at)
        t = len(b.instrs) - 1
        at = check_start(b.instrs, t)
        b.instrs[at:at] = list(POP)
    logger.debug("shadow stack applied to %s", f.name)
    return f


# ── Forward-edge CFI ───────────────────────────────────────────────────

def trap_function(name: str) -> Function:
    body = [BTI_C, ins("mov", R("x0"), Imm(CFI_TRAP_STATUS)), ins("svc", Imm(SVC_EXIT))]
    return Function(name, [Block("entry", body)])


def is_trap(program: Program, name: str) -> bool:
    """``name`` is a function with the stock trap body. It never returns."""
    f = program.function(name)
    return f is not None and [b.instrs for b in f.blocks] == [b.instrs for b in trap_function(name).blocks]


def apply_cfi(p: Program, trap_symbol: str = DEFAULT_TRAP_SYMBOL) -> Program:
    """BTI C at function entries, BTI J at switch targets, checks before BLR/BR."""
    p = _copy(p)
    checks = 0
    for f in p.functions:
        switch_targets: Set[str] = set()
        for b, idx, instr in f.instructions():
            if instr.unconstrained:
                raise UnconstrainedIndirectJump(
                    f"{f.name}:{b.label}:{idx}: 'br' without a declared target set or 'tail'"
                )
            if instr.mnemonic in ("blr", "br") and instr.branch_reg() in SCRATCH:
                raise RewriteError(
                    f"{f.name}:{b.label}:{idx}: indirect target in {instr.branch_reg()}, "
                    f"a CFI scratch register"
                )
            if instr.is_switch:
                for t in instr.targets:
                    if f.block(t) is None:
                        raise RewriteError(f"{f.name}:{b.label}:{idx}: switch target '{t}' is not a block")
                    if t == f.entry.label:
                        raise RewriteError(f"{f.name}:{b.label}:{idx}: switch target '{t}' is the entry block")
                switch_targets.update(instr.targets)

        for b in f.blocks:
            out: List[Instr] = []
            for instr in b.instrs:
                if instr.mnemonic in ("blr", "br"):
                    out += cfi_check(instr.branch_reg(), required_label(instr), trap_symbol)
                    checks += 1
                out.append(instr)
            b.instrs = out
            if b.label in switch_targets:
                b.instrs.insert(0, BTI_J)
        f.entry.instrs.insert(0, BTI_C)

    if checks and p.function(trap_symbol) is None:
        p.functions.append(trap_function(trap_symbol))
    logger.debug("cfi applied: %d check(s)", checks)
    return p


# ── Bit-masking ────────────────────────────────────────────────────────

def apply_bitmask(p: Program) -> Program:
    """Clear bit 63 of every BLR/BR/RET target right before the transfer."""
    p = _copy(p)
    for f in p.functions:
        for b in f.blocks:
            out: List[Instr] = []
            for instr in b.instrs:
                if instr.mnemonic in ("blr", "br", "ret"):
                    out.append(mask_instr(instr.branch_reg()))
                out.append(instr)
            b.instrs = out
    return p


# ── Composition ────────────────────────────────────────────────────────

def _has_indirect(p: Program) -> bool:
    return any(i.mnemonic in ("blr", "br") for f in p.functions for _, _, i in f.instructions())


def _instrumented(p: Program) -> Optional[str]:
    for f in p.functions:
        instrs = [i for b in f.blocks for i in b.instrs]
        if instrs and instrs[0].mnemonic == "bti":
            return f"{f.name}: landing pad already present at entry"
        for j, instr in enumerate(instrs):
            if instr == PUSH[0]:
                return f"{f.name}: shadow-stack push already present"
            if instr.mnemonic in ("blr", "br", "ret") and j > 0 and is_mask(instrs[j - 1], instr.branch_reg()):
                return f"{f.name}: masked transfer already present"
            if instr.mnemonic in ("blr", "br") and check_start(instrs, j) != j:
                return f"{f.name}: CFI check already present"
    return None


def rewrite(p: Program, opts: Optional[RewriteOptions] = None) -> Program:
    opts = opts or RewriteOptions()
    if not opts.any:
        return _copy(p)
    if opts.enable_mask and not opts.enable_cfi and _has_indirect(p):
        raise InconsistentOptions("bit-masking indirect calls/jumps requires CFI")
    marker = _instrumented(p)
    if marker:
        raise AlreadyInstrumented(marker)

    out = _copy(p)
    if opts.enable_cfi:
        out = apply_cfi(out, opts.trap_symbol)
    if opts.enable_ss:
        out.functions = [apply_shadow_stack(f, out) for f in out.functions]
    if opts.enable_mask:
        out = apply_bitmask(out)
    logger.debug("rewrote %s: %d function(s)", p.source, len(out.functions))
    return out
