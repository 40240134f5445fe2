"""Tests for toolchain.rewriter."""
from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pytest

from config import DATA_DIR, DEFAULT_TRAP_SYMBOL
from toolchain.asm_frontend import parse, parse_file
from toolchain.ir import Label, Reg, ins
from toolchain.rewriter import (
    BTI_C,
    BTI_J,
    POP,
    PUSH,
    AlreadyInstrumented,
    InconsistentOptions,
    RewriteError,
    RewriteOptions,
    UnconstrainedIndirectJump,
    X28Clobbered,
    apply_shadow_stack,
    is_mask,
    is_trap,
    rewrite,
    trap_function,
)

LEAF = ".fn leaf\n    add x0, x0, #1\n    ret\n.endfn\n"
CALLER = (
    ".fn main\n"
    "    stp x29, x30, [sp, #-16]!\n"
    "    mov x29, sp\n"
    "    adr x5, leaf\n"
    "    blr x5\n"
    "    ldp x29, x30, [sp], #16\n"
    "    ret\n"
    ".endfn\n" + LEAF
)
LATE_SPILL = (
    ".fn main\n"
    "    mov x0, #1\n"
    "    cmp x0, #0\n"
    "    b.eq quick\n"
    "body:\n"
    "    stp x29, x30, [sp, #-16]!\n"
    "    bl leaf\n"
    "    ldp x29, x30, [sp], #16\n"
    "    ret\n"
    "quick:\n"
    "    ret\n"
    ".endfn\n" + LEAF
)


def _texts(block):
    return [str(i) for i in block.instrs]


@pytest.fixture
def caller():
    return parse(CALLER)


# ══════════════════════════════════════════════════════════════════════
# Shadow stack
# ══════════════════════════════════════════════════════════════════════

class TestShadowStack:
    def test_prologue_push_follows_landing_pad(self, caller):
        entry = rewrite(caller).function("main").entry.instrs
        assert entry[0] == BTI_C
        assert tuple(entry[1:3]) == PUSH

    def test_epilogue_reloads_from_shadow_stack(self, caller):
        texts = _texts(rewrite(caller).function("main").entry)
        assert texts[-4:] == ["sub x28, x28, #8", "ldtr x30, [x28]",
                              "and x30, x30, #0x7fffffffffffffff", "ret"]

    def test_stack_reload_of_lr_is_dropped(self, caller):
        entry = rewrite(caller).function("main").entry
        lr_loads = [i for i in entry.instrs if i.mnemonic in ("ldr", "ldp") and Reg("x30") in i.written_regs()]
        assert lr_loads == []
        assert "ldr x29, [sp], #16" in _texts(entry)

    def test_leaf_is_left_without_push(self, caller):
        leaf = rewrite(caller).function("leaf")
        assert PUSH[0] not in leaf.entry.instrs
        assert POP[1] not in leaf.entry.instrs

    def test_pop_lands_before_tail_call_check(self):
        p = parse(
            ".fn main\n"
            "    stp x29, x30, [sp, #-16]!\n"
            "    adr x5, leaf\n"
            "    ldp x29, x30, [sp], #16\n"
            "    br x5, tail\n"
            ".endfn\n" + LEAF
        )
        texts = _texts(rewrite(p).function("main").entry)
        pop = texts.index("ldtr x30, [x28]")
        check = texts.index("ldr w16, [x5]")
        assert pop < check
        assert texts[-2:] == ["and x5, x5, #0x7fffffffffffffff", "br x5, tail"]

    def test_every_exit_gets_a_pop(self):
        p = parse_file(DATA_DIR / "corpus" / "two_returns.s")
        out = rewrite(p)
        for f in out.functions:
            if not p.function(f.name) or not p.function(f.name).spills_lr:
                continue
            for b in f.blocks:
                if b.terminator is not None and b.terminator.mnemonic == "ret":
                    assert POP[1] in b.instrs

    def test_x28_is_reserved(self):
        with pytest.raises(X28Clobbered):
            rewrite(parse(".fn f\n    mov x28, #1\n    ret\n.endfn\n"))

    def test_late_spill_is_pushed_in_the_prologue(self):
        main = rewrite(parse(LATE_SPILL)).function("main")
        assert tuple(main.entry.instrs[1:3]) == PUSH
        for label in ("body", "quick"):
            texts = _texts(main.block(label))
            assert texts[-4:-2] == ["sub x28, x28, #8", "ldtr x30, [x28]"], label
        assert "ldp x29, x30, [sp], #16" not in _texts(main.block("body"))

    def test_conditional_tail_call_is_refused(self):
        p = parse(".fn main\n    cmp x0, #0\n    b.eq out\nout:\n    ret\n.endfn\n" + LEAF)
        p.function("main").entry.instrs[1] = ins("b.eq", Label("leaf"))
        with pytest.raises(RewriteError, match="conditional tail call"):
            rewrite(p)

    def test_branch_to_the_trap_is_not_a_tail_call(self):
        p = parse(".fn main\n    stp x29, x30, [sp, #-16]!\n    b.eq out\nout:\n    ldp x29, x30, [sp], #16\n    ret\n.endfn\n")
        p.function("main").entry.instrs[1] = ins("b.eq", Label(DEFAULT_TRAP_SYMBOL))
        p.functions.append(trap_function(DEFAULT_TRAP_SYMBOL))
        main = apply_shadow_stack(p.function("main"), p)
        assert main.entry.instrs[:2] == list(PUSH)
        assert is_trap(p, DEFAULT_TRAP_SYMBOL)

        p.function(DEFAULT_TRAP_SYMBOL).entry.instrs.pop()
        assert not is_trap(p, DEFAULT_TRAP_SYMBOL)
        with pytest.raises(RewriteError, match="conditional tail call"):
            apply_shadow_stack(p.function("main"), p)


# ══════════════════════════════════════════════════════════════════════
# CFI and masking
# ══════════════════════════════════════════════════════════════════════

class TestCfi:
    def test_indirect_call_is_checked_then_masked(self, caller):
        texts = _texts(rewrite(caller).function("main").entry)
        at = texts.index("blr x5")
        assert texts[at - 6:at] == [
            "ldr w16, [x5]",
            "movz w17, #0x245f",
            "movk w17, #0xd503, lsl #16",
            "cmp w16, w17",
            f"b.ne {DEFAULT_TRAP_SYMBOL}",
            "and x5, x5, #0x7fffffffffffffff",
        ]

    def test_trap_function_is_added_once(self, caller):
        out = rewrite(caller)
        assert out.function_names().count(DEFAULT_TRAP_SYMBOL) == 1
        trap = out.function(DEFAULT_TRAP_SYMBOL)
        assert [str(i) for i in trap.entry.instrs] == ["bti c", "mov x0, #134", "svc #0"]

    def test_custom_trap_symbol(self, caller):
        out = rewrite(caller, RewriteOptions(trap_symbol="on_cfi_failure"))
        assert out.function("on_cfi_failure") is not None
        assert out.function(DEFAULT_TRAP_SYMBOL) is None

    def test_no_trap_without_indirect_transfers(self):
        out = rewrite(parse(LEAF))
        assert out.function(DEFAULT_TRAP_SYMBOL) is None
        assert out.function("leaf").entry.instrs[0] == BTI_C

    def test_switch_targets_get_bti_j(self):
        out = rewrite(parse_file(DATA_DIR / "corpus" / "switch.s"))
        classify = out.function("classify")
        assert classify.block("small").instrs[0] == BTI_J
        assert classify.block("big").instrs[0] == BTI_J
        assert "movz w17, #0x249f" in _texts(classify.entry)

    def test_unconstrained_br_is_rejected(self):
        with pytest.raises(UnconstrainedIndirectJump):
            rewrite(parse(".fn f\n    adr x5, f\n    br x5\n.endfn\n"))

    def test_scratch_register_target_is_rejected(self):
        with pytest.raises(RewriteError, match="scratch"):
            rewrite(parse(".fn f\n    adr x16, f\n    blr x16\n    ret\n.endfn\n"))

    def test_switch_target_must_be_a_block(self):
        with pytest.raises(RewriteError, match="not a block"):
            rewrite(parse(".fn f\n    adr x5, g\n    br x5, {g}\n.endfn\n.fn g\n    ret\n.endfn\n"))

    def test_every_transfer_is_masked(self, caller):
        for f in rewrite(caller).functions:
            for b in f.blocks:
                for idx, instr in enumerate(b.instrs):
                    if instr.mnemonic in ("blr", "br", "ret"):
                        assert is_mask(b.instrs[idx - 1], instr.branch_reg())


# ══════════════════════════════════════════════════════════════════════
# Options
# ══════════════════════════════════════════════════════════════════════

class TestOptions:
    def test_everything_off_is_a_copy(self, caller):
        out = rewrite(caller, RewriteOptions(False, False, False))
        assert out == caller
        assert out is not caller

    def test_input_is_not_modified(self, caller):
        before = parse(CALLER)
        rewrite(caller)
        assert caller == before

    def test_mask_without_cfi_needs_no_indirect_transfers(self, caller):
        with pytest.raises(InconsistentOptions):
            rewrite(caller, RewriteOptions(enable_cfi=False))
        out = rewrite(parse(LEAF), RewriteOptions(enable_cfi=False))
        assert is_mask(out.function("leaf").entry.instrs[-2])

    def test_shadow_stack_only(self, caller):
        out = rewrite(caller, RewriteOptions(enable_cfi=False, enable_mask=False))
        texts = _texts(out.function("main").entry)
        assert texts[:2] == ["sttr x30, [x28]", "add x28, x28, #8"]
        assert "bti c" not in texts
        assert not any(t.startswith("and ") for t in texts)

    @pytest.mark.parametrize("opts", [
        RewriteOptions(),
        RewriteOptions(enable_cfi=False, enable_mask=False),
        RewriteOptions(enable_ss=False, enable_mask=False),
    ])
    def test_second_rewrite_is_refused(self, caller, opts):
        once = rewrite(caller, opts)
        with pytest.raises(AlreadyInstrumented):
            rewrite(once, opts)

    def test_landing_pad_marks_a_cfi_only_program(self):
        once = rewrite(parse(LEAF), RewriteOptions(enable_ss=False, enable_mask=False))
        assert _texts(once.function("leaf").entry) == ["bti c", "add x0, x0, #1", "ret"]
        with pytest.raises(AlreadyInstrumented, match="landing pad"):
            rewrite(once, RewriteOptions(enable_ss=False, enable_mask=False))
