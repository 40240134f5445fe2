"""Seeded generator of well-formed programs for closure and equivalence tests.

Generated programs terminate: calls go only to later functions and branches
only to later blocks. They leave x5/x6 for indirect targets and never touch
x16/x17/x28.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import List, Optional

from config import CONDITIONS
from toolchain.ir import Block, Function, Imm, Instr, Label, Mem, Program, R, ins

ARITH_REGS = [f"x{n}" for n in (0, 1, 2, 3, 4, 7, 8, 9, 10, 11, 12, 13, 14, 15)]
FRAME_SIZE = 32
_SP = R("sp")
_PROLOGUE = (
    ins("stp", R("x29"), R("x30"), Mem(_SP, -FRAME_SIZE, "pre")),
    ins("mov", R("x29"), _SP),
)
_EPILOGUE = ins("ldp", R("x29"), R("x30"), Mem(_SP, FRAME_SIZE, "post"))


@dataclass(frozen=True)
class GenOptions:
    min_functions: int = 2
    max_functions: int = 6
    max_blocks: int = 4
    max_body: int = 6
    spill_probability: float = 0.6
    indirect_calls: bool = True
    switches: bool = True
    tail_calls: bool = True


class _FunctionGen:
    def __init__(self, rng: random.Random, opts: GenOptions, index: int, names: List[str]):
        self.rng = rng
        self.opts = opts
        self.index = index
        self.names = names
        self.spills = index == 0 or rng.random() < opts.spill_probability
        self.callees = names[index + 1:]

    def arith(self) -> Instr:
        rng = self.rng
        rd, rn, rm = (R(rng.choice(ARITH_REGS)) for _ in range(3))
        pick = rng.randrange(6)
        if pick == 0:
            return ins("mov", rd, Imm(rng.randrange(0, 4096)))
        if pick == 1:
            return ins("add", rd, rn, Imm(rng.randrange(0, 4096)))
        if pick == 2:
            return ins("add", rd, rn, rm)
        if pick == 3:
            return ins("sub", rd, rn, rm)
        if pick == 4:
            return ins("mul", rd, rn, rm)
        return ins("and", rd, rn, Imm(rng.choice([0xFF, 0xFFFF, 0xF0, 0x3])))

    def body(self, later: List[str]) -> List[Instr]:
        rng = self.rng
        out: List[Instr] = []
        for _ in range(rng.randint(1, self.opts.max_body)):
            roll = rng.random()
            if self.spills and self.callees and roll < 0.15:
                callee = rng.choice(self.callees)
                if self.opts.indirect_calls and rng.random() < 0.4:
                    out += [ins("adr", R("x5"), Label(callee)), ins("blr", R("x5"))]
                else:
                    out.append(ins("bl", Label(callee)))
            elif self.spills and roll < 0.3:
                reg = R(rng.choice(ARITH_REGS))
                slot = rng.choice([16, 24])
                out.append(ins(rng.choice(["str", "ldr"]), reg, Mem(_SP, slot)))
            elif later and roll < 0.4:
                out += [
                    ins("cmp", R(rng.choice(ARITH_REGS)), Imm(rng.randrange(0, 64))),
                    ins("b." + rng.choice(CONDITIONS[:14]), Label(rng.choice(later))),
                ]
            else:
                out.append(self.arith())
        return out

    def exit(self) -> List[Instr]:
        rng = self.rng
        out: List[Instr] = [_EPILOGUE] if self.spills else []
        if self.opts.tail_calls and self.callees and rng.random() < 0.3:
            callee = rng.choice(self.callees)
            if self.opts.indirect_calls and rng.random() < 0.5:
                return out + [ins("adr", R("x5"), Label(callee)), ins("br", R("x5"), tail=True)]
            return out + [ins("b", Label(callee))]
        return out + [ins("ret")]

    def function(self) -> Function:
        rng = self.rng
        labels = ["entry"] + [f"bb{k}" for k in range(1, rng.randint(1, self.opts.max_blocks))]
        blocks: List[Block] = []
        for k, label in enumerate(labels):
            later = labels[k + 1:]
            instrs: List[Instr] = []
            if k == 0 and self.spills:
                instrs += list(_PROLOGUE)
            instrs += self.body(later)
            if not later:
                instrs += self.exit()
            else:
                roll = rng.random()
                if self.opts.switches and len(later) >= 2 and roll < 0.25:
                    targets = tuple(rng.sample(later, 2))
                    instrs += [ins("adr", R("x6"), Label(targets[0])), ins("br", R("x6"), targets=targets)]
                elif roll < 0.45:
                    instrs.append(ins("b", Label(rng.choice(later))))
                elif roll < 0.6:
                    instrs += self.exit()
            blocks.append(Block(label, instrs))
        return Function(self.names[self.index], blocks)


def random_program(rng: random.Random, opts: Optional[GenOptions] = None) -> Program:
    """One terminating program whose entry function is ``main``."""
    opts = opts or GenOptions()
    n = rng.randint(opts.min_functions, opts.max_functions)
    names = ["main"] + [f"fn{i}" for i in range(1, n)]
    functions = [_FunctionGen(rng, opts, i, names).function() for i in range(n)]
    return Program(functions, source=f"<random:{n}>")


def random_programs(seed: int, count: int, opts: Optional[GenOptions] = None) -> List[Program]:
    rng = random.Random(seed)
    return [random_program(rng, opts) for _ in range(count)]
