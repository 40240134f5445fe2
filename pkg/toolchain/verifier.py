"""Static compliance checks for elevated-task programs.

Rules:
  V1  LR-spilling functions push LR to the shadow stack in the prologue
  V2  every exit pops it back, X28 is balanced, nothing else writes X28
  V3  the only LSU instructions are the vetted push/pop
  V4  indirect transfers are CFI-checked, then masked; RET is masked
  V5  BTI C at every function entry; switch targets start with BTI J
  V6  no forbidden privileged instructions
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple

import networkx as nx

from config import DEFAULT_TRAP_SYMBOL
from isa.allowlist import Allowlist
from isa.decoder import Tag, is_forbidden
from security.scanner import default_allowlist
from toolchain import AsmError
from toolchain.assembler import instr_class
from toolchain.ir import Function, Instr, Program
from toolchain.rewriter import (BTI_C, BTI_J, CHECK_LEN, POP, PUSH, X28, X30, cfi_check, is_conditional_tail, is_exit,
                                is_mask, is_trap, required_label)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VerifyPolicy:
    name: str
    require_cfi: bool = True
    require_mask: bool = True
    allow: Optional[Allowlist] = None  # None: the default allowlist
    trap_symbol: str = DEFAULT_TRAP_SYMBOL


FULL = VerifyPolicy("full")
# shadow stack plus masking, for CFI-off builds
SS_ONLY = VerifyPolicy("ss-only", require_cfi=False)
POLICIES = {p.name: p for p in (FULL, SS_ONLY)}


@dataclass(frozen=True)
class Violation:
    rule: str
    function: str
    block: str
    index: int
    message: str

    def __str__(self) -> str:
        return f"{self.rule} {self.function}:{self.block}:{self.index} {self.message}"


class _Report:
    def __init__(self, f: Function):
        self.f = f
        self.items: List[Violation] = []

    def add(self, rule: str, block: str, index: int, message: str) -> None:
        self.items.append(Violation(rule, self.f.name, block, index, message))


def _is_push_at(instrs: List[Instr], i: int) -> bool:
    return instrs[i:i + 2] == list(PUSH)


def _is_pop_at(instrs: List[Instr], i: int) -> bool:
    return instrs[i:i + 2] == list(POP)


# ── Block graph ────────────────────────────────────────────────────────

def block_graph(f: Function) -> nx.DiGraph:
    """Intra-function control-flow graph over block labels."""
    g = nx.DiGraph()
    labels = [b.label for b in f.blocks]
    g.add_nodes_from(labels)
    for pos, b in enumerate(f.blocks):
        for instr in b.instrs:
            if instr.mnemonic.startswith("b.") or instr.mnemonic == "b":
                target = instr.label()
                if target in g:
                    g.add_edge(b.label, target)
            if instr.is_switch:
                for t in instr.targets:
                    if t in g:
                        g.add_edge(b.label, t)
        if b.terminator is None and pos + 1 < len(labels):
            g.add_edge(b.label, labels[pos + 1])
    return g


def _cyclic_blocks(g: nx.DiGraph) -> Set[str]:
    out: Set[str] = set()
    for scc in nx.strongly_connected_components(g):
        if len(scc) > 1:
            out |= scc
        else:
            (node,) = scc
            if g.has_edge(node, node):
                out.add(node)
    return out


# ── V1 / V2 ────────────────────────────────────────────────────────────

def _check_push(f: Function, r: _Report) -> None:
    entry = f.entry.instrs
    pushes = [i for i in range(len(entry)) if _is_push_at(entry, i)]
    for b, idx, _ in f.lr_spills():
        # entry dominates every block; a branch back to it is rejected as a loop
        if pushes and (b is not f.entry or pushes[0] < idx):
            continue
        where = "the prologue" if b is f.entry else f"block '{b.label}'"
        r.add("V1", b.label, idx, f"LR spilled in {where} without a preceding shadow-stack push")


def _lr_reloaded(instr: Instr) -> bool:
    return instr.mnemonic in ("ldr", "ldp") and X30 in instr.written_regs()


def _delta(instrs: List[Instr], i: int) -> int:
    if instrs[i] == PUSH[1] and i > 0 and instrs[i - 1] == PUSH[0]:
        return 1
    if instrs[i] == POP[0] and _is_pop_at(instrs, i):
        return -1
    return 0


def _lr_from_shadow(instrs: List[Instr], exit_index: int) -> bool:
    """The last LR write before the exit is the shadow-stack reload."""
    for i in range(exit_index - 1, -1, -1):
        if is_mask(instrs[i], X30):
            continue
        if X30 in instrs[i].written_regs():
            return instrs[i] == POP[1] and i > 0 and instrs[i - 1] == POP[0]
    return False


def _check_balance(f: Function, p: Program, r: _Report) -> None:
    spills = f.spills_lr
    touched = False
    for b, idx, instr in f.instructions():
        if X28 in instr.written_regs():
            if _delta(b.instrs, idx) == 0:
                r.add("V2", b.label, idx, f"'{instr}' writes x28 outside the shadow-stack push/pop")
            else:
                touched = True
        if is_conditional_tail(f, p, instr):
            r.add("V2", b.label, idx, f"conditional tail call '{instr}' leaves without a shadow-stack pop")
    if not spills:
        if touched:
            r.add("V2", f.entry.label, 0, "shadow-stack push/pop in a function that does not spill LR")
        for b, idx, instr in f.instructions():
            if _lr_reloaded(instr):
                r.add("V2", b.label, idx, f"'{instr}' reloads LR from memory in a function that never spills it")
        return

    g = block_graph(f)
    cyclic = _cyclic_blocks(g)
    looped = [b.label for b in f.blocks
              if b.label in cyclic and any(_delta(b.instrs, i) for i in range(len(b.instrs)))]
    for label in looped:
        r.add("V2", label, 0, "shadow-stack push/pop inside a loop")
    if looped:
        return

    seen: Set[Tuple[str, int]] = set()
    reported: Set[Tuple[str, int]] = set()
    work = deque([(f.entry.label, 0)])
    while work:
        label, depth = work.popleft()
        if (label, depth) in seen:
            continue
        seen.add((label, depth))
        b = f.block(label)
        assert b is not None
        for i, instr in enumerate(b.instrs):
            depth += _delta(b.instrs, i)
            if depth < 0 and (label, i) not in reported:
                reported.add((label, i))
                r.add("V2", label, i, "shadow-stack pop without a matching push")
            if is_exit(f, p, instr) and (label, i) not in reported:
                if depth != 0:
                    reported.add((label, i))
                    r.add("V2", label, i, f"exit with unbalanced shadow stack (depth {depth})")
                elif not _lr_from_shadow(b.instrs, i):
                    reported.add((label, i))
                    r.add("V2", label, i, "return address not reloaded from the shadow stack")
            for t in (instr.label(),) + instr.targets:
                if t in g and (instr.mnemonic in ("b", "br") or instr.mnemonic.startswith("b.")):
                    work.append((t, depth))
        pos = f.blocks.index(b)
        if b.terminator is None and pos + 1 < len(f.blocks):
            work.append((f.blocks[pos + 1].label, depth))


# ── V3 / V6 ────────────────────────────────────────────────────────────

def _vetted_lsu(instrs: List[Instr], i: int) -> bool:
    instr = instrs[i]
    if instr == PUSH[0]:
        return _is_push_at(instrs, i)
    if instr == POP[1]:
        return i > 0 and instrs[i - 1] == POP[0]
    return False


def _check_classes(f: Function, allow: Allowlist, r: _Report) -> None:
    for b, idx, instr in f.instructions():
        try:
            c = instr_class(instr)
        except AsmError as e:
            r.add("V6", b.label, idx, f"cannot encode '{instr}': {e}")
            continue
        if c.tag in (Tag.LsuLoad, Tag.LsuStore) and not _vetted_lsu(b.instrs, idx):
            r.add("V3", b.label, idx, f"unvetted LSU instruction '{instr}'")
        elif is_forbidden(c, allow):
            r.add("V6", b.label, idx, f"forbidden instruction '{instr}' ({c.describe()})")


# ── V4 / V5 ────────────────────────────────────────────────────────────

def _check_sequence(instrs: List[Instr], at: int, instr: Instr, trap: str) -> bool:
    if at < CHECK_LEN:
        return False
    return instrs[at - CHECK_LEN:at] == cfi_check(instr.branch_reg(), required_label(instr), trap)


def _check_trap(p: Program, trap: str) -> Optional[Violation]:
    """The mismatch target must be the stock trap body, nothing else."""
    f = p.function(trap)
    if f is None:
        return Violation("V4", trap, "entry", 0, "CFI trap function is missing")
    if not is_trap(p, trap):
        return Violation("V4", trap, f.entry.label if f.blocks else "entry", 0, "CFI trap function body was altered")
    return None


def _check_transfers(f: Function, p: Program, policy: VerifyPolicy, r: _Report) -> None:
    for b, idx, instr in f.instructions():
        if instr.mnemonic not in ("blr", "br", "ret"):
            continue
        reg = instr.branch_reg()
        masked = idx > 0 and is_mask(b.instrs[idx - 1], reg)
        if policy.require_mask and not masked:
            r.add("V4", b.label, idx, f"'{instr}' target not masked")
        if policy.require_cfi and instr.mnemonic != "ret":
            at = idx - 1 if masked else idx
            if not _check_sequence(b.instrs, at, instr, policy.trap_symbol):
                want = "BTI J" if instr.is_switch else "BTI C"
                r.add("V4", b.label, idx, f"'{instr}' not preceded by a {want} CFI check to '{policy.trap_symbol}'")


def _check_labels(f: Function, r: _Report) -> None:
    if not f.entry.instrs or f.entry.instrs[0] != BTI_C:
        r.add("V5", f.entry.label, 0, "function does not start with 'bti c'")
    for b, idx, instr in f.instructions():
        if instr.unconstrained:
            r.add("V5", b.label, idx, f"'{instr}' has no declared target set")
        for t in instr.targets:
            target = f.block(t)
            if target is None:
                r.add("V5", b.label, idx, f"switch target '{t}' lies outside the function")
            elif not target.instrs or target.instrs[0] != BTI_J:
                r.add("V5", b.label, idx, f"switch target '{t}' does not start with 'bti j'")


# ── Entry point ────────────────────────────────────────────────────────

def verify(p: Program, policy: VerifyPolicy = FULL) -> List[Violation]:
    """All rule violations in ``p``; empty when the program is compliant."""
    allow = policy.allow if policy.allow is not None else default_allowlist()

    out: List[Violation] = []
    for f in p.functions:
        if not f.blocks:
            continue
        r = _Report(f)
        _check_push(f, r)
        _check_balance(f, p, r)
        _check_classes(f, allow, r)
        if policy.require_cfi or policy.require_mask:
            _check_transfers(f, p, policy, r)
        if policy.require_cfi:
            _check_labels(f, r)
        out += r.items
    if policy.require_cfi and any(i.mnemonic in ("blr", "br") for f in p.functions for _, _, i in f.instructions()):
        trap = _check_trap(p, policy.trap_symbol)
        if trap is not None:
            out.append(trap)
    if out:
        logger.info("%s: %d violation(s) under policy %s", p.source, len(out), policy.name)
    return out


def rules_hit(violations: List[Violation]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for v in violations:
        counts[v.rule] = counts.get(v.rule, 0) + 1
    return counts
