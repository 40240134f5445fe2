"""Tests for toolchain.verifier: closure of the rewriter and rejection of mutants."""
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pytest

from config import DATA_DIR, DEFAULT_TRAP_SYMBOL
from toolchain.asm_frontend import parse, parse_file
from toolchain.ir import Imm, Label, Mem, R, Sym, ins
from toolchain.progen import random_programs
from toolchain.rewriter import BTI_C, BTI_J, POP, PUSH, RewriteOptions, is_mask, rewrite
from toolchain.verifier import FULL, POLICIES, SS_ONLY, Violation, block_graph, rules_hit, verify

CORPUS = sorted((DATA_DIR / "corpus").glob("*.s"))


def _rewritten(name: str):
    return rewrite(parse_file(DATA_DIR / "corpus" / name))


def _exit_block(f):
    return next(b for b in f.blocks if b.terminator is not None and b.terminator.mnemonic == "ret")


def _has_indirect(p) -> bool:
    return any(i.mnemonic in ("blr", "br") for f in p.functions for _, _, i in f.instructions())


# ══════════════════════════════════════════════════════════════════════
# Closure: rewritten programs verify clean
# ══════════════════════════════════════════════════════════════════════

class TestClosure:
    @pytest.mark.parametrize("path", CORPUS, ids=[p.stem for p in CORPUS])
    def test_corpus(self, path):
        assert verify(rewrite(parse_file(path))) == []

    def test_random_programs(self):
        programs = random_programs(seed=7, count=500)
        failures = {}
        for n, program in enumerate(programs):
            violations = verify(rewrite(program))
            if violations:
                failures[n] = [str(v) for v in violations]
        assert failures == {}

    def test_shadow_stack_only_policy(self):
        opts = RewriteOptions(enable_cfi=False)
        direct = [path for path in CORPUS if not _has_indirect(parse_file(path))]
        assert direct
        for path in direct:
            program = rewrite(parse_file(path), opts)
            assert verify(program, SS_ONLY) == [], path.name

    def test_shadow_stack_only_output_fails_full_policy(self):
        program = rewrite(parse_file(DATA_DIR / "corpus" / "fib.s"), RewriteOptions(enable_cfi=False))
        assert set(rules_hit(verify(program, FULL))) == {"V5"}

    def test_shadow_stack_only_policy_checks_masks(self):
        program = rewrite(parse_file(DATA_DIR / "corpus" / "fib.s"),
                          RewriteOptions(enable_cfi=False, enable_mask=False))
        violations = verify(program, SS_ONLY)
        assert set(rules_hit(violations)) == {"V4"}
        assert all("not masked" in v.message for v in violations)

    def test_plain_program_is_rejected(self):
        hit = rules_hit(verify(parse_file(DATA_DIR / "corpus" / "fib.s")))
        assert {"V1", "V2", "V4", "V5"} <= set(hit)

    def test_policy_table(self):
        assert POLICIES == {"full": FULL, "ss-only": SS_ONLY}


# ══════════════════════════════════════════════════════════════════════
# Mutants: each class trips its own rule
# ══════════════════════════════════════════════════════════════════════

class TestMutants:
    def test_removed_push(self):
        p = _rewritten("fib.s")
        entry = p.function("main").entry.instrs
        at = entry.index(PUSH[0])
        del entry[at:at + 2]
        assert "V1" in rules_hit(verify(p))

    def test_removed_pop(self):
        p = _rewritten("fib.s")
        block = _exit_block(p.function("main"))
        at = block.instrs.index(POP[0])
        del block.instrs[at:at + 2]
        violations = verify(p)
        assert "V2" in rules_hit(violations)
        assert any("unbalanced" in v.message or "reloaded" in v.message for v in violations)

    def test_inserted_unprivileged_store(self):
        p = _rewritten("fib.s")
        p.function("main").entry.instrs.insert(3, ins("sttr", R("x0"), Mem(R("x1"))))
        violations = verify(p)
        assert rules_hit(violations) == {"V3": 1}
        assert violations[0].index == 3

    def test_removed_return_mask(self):
        p = _rewritten("fib.s")
        block = _exit_block(p.function("main"))
        assert is_mask(block.instrs[-2])
        del block.instrs[-2]
        assert rules_hit(verify(p)) == {"V4": 1}

    def test_removed_cfi_check(self):
        p = _rewritten("indirect_call.s")
        entry = p.function("main").entry.instrs
        at = next(i for i, instr in enumerate(entry) if instr.mnemonic == "ldr" and instr.reg(0) == R("w16"))
        del entry[at:at + 5]
        violations = verify(p)
        assert rules_hit(violations) == {"V4": 1}
        assert "BTI C" in violations[0].message

    def test_removed_entry_landing_pad(self):
        p = _rewritten("fib.s")
        entry = p.function("main").entry.instrs
        assert entry[0] == BTI_C
        del entry[0]
        assert rules_hit(verify(p)) == {"V5": 1}

    def test_removed_switch_landing_pad(self):
        p = _rewritten("switch.s")
        small = p.function("classify").block("small")
        assert small.instrs[0] == BTI_J
        del small.instrs[0]
        violations = verify(p)
        assert rules_hit(violations) == {"V5": 1}
        assert "'small'" in violations[0].message

    def test_inserted_pan_write(self):
        p = _rewritten("fib.s")
        p.function("main").entry.instrs.insert(3, ins("msr", Sym("PAN"), Imm(0)))
        assert rules_hit(verify(p)) == {"V6": 1}

    def test_inserted_x28_write(self):
        p = _rewritten("fib.s")
        p.function("main").entry.instrs.insert(3, ins("mov", R("x28"), Imm(0)))
        violations = verify(p)
        assert "V2" in rules_hit(violations)
        assert any("writes x28" in v.message for v in violations)

    def test_lr_spilled_after_the_prologue(self):
        p = parse(
            ".fn main\n"
            "    bti c\n"
            "    mov x0, #1\n"
            "body:\n"
            "    stp x29, x30, [sp, #-16]!\n"
            "    bl leaf\n"
            "    ldp x29, x30, [sp], #16\n"
            "    and x30, x30, #0x7fffffffffffffff\n"
            "    ret\n"
            ".endfn\n"
            ".fn leaf\n"
            "    bti c\n"
            "    and x30, x30, #0x7fffffffffffffff\n"
            "    ret\n"
            ".endfn\n"
        )
        violations = verify(p)
        assert rules_hit(violations) == {"V1": 1, "V2": 1}
        v1 = next(v for v in violations if v.rule == "V1")
        assert (v1.function, v1.block, v1.index) == ("main", "body", 0)

    def test_lr_reloaded_in_a_function_that_never_spills(self):
        p = parse(
            ".fn leaf\n"
            "    bti c\n"
            "    ldr x30, [sp, #8]\n"
            "    and x30, x30, #0x7fffffffffffffff\n"
            "    ret\n"
            ".endfn\n"
        )
        violations = verify(p)
        assert rules_hit(violations) == {"V2": 1}
        assert "reloads LR" in violations[0].message

    def test_conditional_tail_call(self):
        p = _rewritten("fib.s")
        entry = p.function("fib").entry.instrs
        at = next(i for i, instr in enumerate(entry) if instr.mnemonic == "b.lt")
        entry[at] = ins("b.lt", Label("main"))
        violations = verify(p)
        assert rules_hit(violations) == {"V2": 1}
        assert "conditional tail call" in violations[0].message

    def test_check_branches_somewhere_other_than_the_trap(self):
        p = _rewritten("indirect_call.s")
        entry = p.function("main").entry.instrs
        at = entry.index(ins("b.ne", Label(DEFAULT_TRAP_SYMBOL)))
        entry[at] = ins("b.ne", Label("main"))
        violations = verify(p)
        assert rules_hit(violations) == {"V2": 1, "V4": 1}
        v4 = next(v for v in violations if v.rule == "V4")
        assert DEFAULT_TRAP_SYMBOL in v4.message

    def test_altered_trap_body(self):
        p = _rewritten("indirect_call.s")
        trap = p.function(DEFAULT_TRAP_SYMBOL).entry.instrs
        trap[1] = ins("mov", R("x0"), Imm(0))
        violations = verify(p)
        # the check now branches to an ordinary function
        assert rules_hit(violations) == {"V2": 1, "V4": 1}
        v4 = next(v for v in violations if v.rule == "V4")
        assert (v4.function, v4.message) == (DEFAULT_TRAP_SYMBOL, "CFI trap function body was altered")

    def test_missing_trap(self):
        p = _rewritten("indirect_call.s")
        p.functions = [f for f in p.functions if f.name != DEFAULT_TRAP_SYMBOL]
        violations = verify(p)
        assert rules_hit(violations) == {"V4": 1}
        assert "missing" in violations[0].message

    def test_trap_symbol_follows_the_policy(self):
        p = rewrite(parse_file(DATA_DIR / "corpus" / "indirect_call.s"), RewriteOptions(trap_symbol="on_cfi_failure"))
        assert "V4" in rules_hit(verify(p))
        assert verify(p, replace(FULL, trap_symbol="on_cfi_failure")) == []

    def test_retargeted_check(self):
        p = _rewritten("switch.s")
        entry = p.function("classify").entry.instrs
        at = next(i for i, instr in enumerate(entry) if instr.mnemonic == "movz")
        entry[at] = ins("movz", R("w17"), Imm(0x245F))
        assert rules_hit(verify(p)) == {"V4": 1}


# ══════════════════════════════════════════════════════════════════════
# Structure helpers
# ══════════════════════════════════════════════════════════════════════

class TestStructure:
    def test_block_graph(self):
        classify = parse_file(DATA_DIR / "corpus" / "switch.s").function("classify")
        g = block_graph(classify)
        assert set(g.nodes) == {"entry", "small", "big"}
        assert set(g.edges) == {("entry", "small"), ("entry", "big")}

    def test_fallthrough_edge(self):
        f = parse(".fn f\n    nop\nnext:\n    ret\n.endfn\n").function("f")
        assert set(block_graph(f).edges) == {("entry", "next")}

    def test_shadow_stack_traffic_in_a_loop(self):
        p = parse(
            ".fn main\n"
            "    bti c\n"
            "    sttr x30, [x28]\n"
            "    add x28, x28, #8\n"
            "    stp x29, x30, [sp, #-16]!\n"
            "loop:\n"
            "    sub x28, x28, #8\n"
            "    ldtr x30, [x28]\n"
            "    b loop\n"
            ".endfn\n"
        )
        violations = verify(p, SS_ONLY)
        assert any(v.rule == "V2" and "loop" in v.message for v in violations)

    def test_unconstrained_br_is_reported(self):
        p = parse(".fn f\n    bti c\n    adr x5, f\n    br x5\n.endfn\n")
        assert "V5" in rules_hit(verify(p))

    def test_violation_text(self):
        v = Violation("V3", "main", "entry", 4, "unvetted LSU instruction")
        assert str(v) == "V3 main:entry:4 unvetted LSU instruction"

    def test_rules_hit_counts(self):
        vs = [Violation("V4", "f", "entry", i, "m") for i in range(3)] + [Violation("V1", "f", "entry", 0, "m")]
        assert rules_hit(vs) == {"V4": 3, "V1": 1}
        assert rules_hit([]) == {}
