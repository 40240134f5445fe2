"""Tests for toolchain.asm_frontend and the IR helpers it produces."""
from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pytest

from config import DATA_DIR
from toolchain import AsmError
from toolchain.asm_frontend import (
    MNEMONICS,
    AsmSyntaxError,
    DuplicateFunction,
    UnknownMnemonic,
    parse,
    parse_file,
    print_program,
    split_targets,
)
from toolchain.ir import Imm, Mem, Reg, Sym

CORPUS = sorted((DATA_DIR / "corpus").glob("*.s"))


def _one(text: str):
    """Parse a single instruction inside a throwaway function."""
    p = parse(f".fn f\n    {text}\n.endfn\n")
    return p.functions[0].entry.instrs[0]


# ══════════════════════════════════════════════════════════════════════
# Structure
# ══════════════════════════════════════════════════════════════════════

class TestStructure:
    def test_corpus_is_large_enough(self):
        assert len(CORPUS) >= 20

    @pytest.mark.parametrize("path", CORPUS, ids=[p.stem for p in CORPUS])
    def test_corpus_reparses_from_printed_form(self, path):
        program = parse_file(path)
        again = parse(print_program(program))
        assert again == program

    def test_implicit_entry_block(self):
        p = parse(".fn f\n    mov x0, #1\nnext:\n    ret\n.endfn\n")
        f = p.functions[0]
        assert [b.label for b in f.blocks] == ["entry", "next"]
        assert f.entry.terminator is None
        assert f.blocks[1].terminator.mnemonic == "ret"

    def test_lr_spill_outside_the_entry_block(self):
        p = parse(".fn f\n    mov x0, #1\nbody:\n    str x30, [sp, #-16]!\n    ret\n.endfn\n")
        f = p.functions[0]
        assert f.spills_lr
        assert [(b.label, idx) for b, idx, _ in f.lr_spills()] == [("body", 0)]
        assert not parse(".fn g\n    ret\n.endfn\n").functions[0].spills_lr

    def test_address_taken_flag(self):
        p = parse(".fn f address_taken\n    ret\n.endfn\n")
        assert p.functions[0].address_taken

    def test_comments_and_blank_lines(self):
        p = parse("// header\n\n.fn f   // trailing\n    ret // done\n.endfn\n")
        assert p.function_names() == ["f"]

    def test_label_and_instruction_on_one_line(self):
        p = parse(".fn f\nloop: b loop\n.endfn\n")
        assert p.functions[0].block("loop").instrs[0].label() == "loop"

    def test_source_is_recorded(self, tmp_path):
        path = tmp_path / "tiny.s"
        path.write_text(".fn f\n    ret\n.endfn\n")
        assert parse_file(path).source == str(path)


# ══════════════════════════════════════════════════════════════════════
# Operands
# ══════════════════════════════════════════════════════════════════════

class TestOperands:
    def test_register_aliases(self):
        i = _one("mov fp, lr")
        assert i.operands == (Reg("x29"), Reg("x30"))

    def test_addressing_modes(self):
        assert _one("ldr x0, [x1]").operands[1] == Mem(Reg("x1"))
        assert _one("ldr x0, [x1, #8]").operands[1] == Mem(Reg("x1"), 8)
        assert _one("stp x29, x30, [sp, #-16]!").operands[2] == Mem(Reg("sp"), -16, "pre")
        assert _one("ldp x29, x30, [sp], #16").operands[2] == Mem(Reg("sp"), 16, "post")
        assert _one("ldr x0, [x1, x2]").operands[1] == Mem(Reg("x1"), 0, "offset", Reg("x2"))

    def test_unscaled_forms_fold_into_ldr_str(self):
        assert _one("ldur x0, [x1, #-8]").mnemonic == "ldr"
        assert _one("stur w0, [x1, #3]").mnemonic == "str"

    def test_shifted_immediates(self):
        assert _one("movk x0, #0xffff, lsl #48").operands[1] == Imm(0xFFFF, 48)
        assert _one("add x0, x1, #1, lsl #12").operands[2] == Imm(1, 12)

    def test_condition_aliases(self):
        assert _one("b.hs out").mnemonic == "b.cs"
        assert _one("b.lo out").mnemonic == "b.cc"

    def test_switch_and_tail_forms(self):
        sw = _one("br x5, {a, b, c}")
        assert sw.is_switch and sw.targets == ("a", "b", "c")
        assert split_targets(sw) == ("a", "b", "c")
        assert _one("br x5, tail").tail
        assert _one("br x5").unconstrained

    def test_ret_defaults_to_lr(self):
        assert _one("ret x30").operands == ()
        assert _one("ret x5").branch_reg() == Reg("x5")

    def test_system_operands(self):
        assert _one("mrs x0, tpidr_el0").operands[1] == Sym("TPIDR_EL0")
        assert _one("msr pan, #1").operands == (Sym("PAN"), Imm(1))
        assert _one("mrs x1, s3_3_c15_c2_0").operands[1] == Sym("S3_3_C15_C2_0")

    def test_word_directive(self):
        assert _one(".word 0xd69f03e0").operands == (Imm(0xD69F03E0),)

    def test_written_registers(self):
        assert _one("ldp x1, x2, [x3], #16").written_regs() == [Reg("x1"), Reg("x2"), Reg("x3")]
        assert _one("blr x5").written_regs() == [Reg("x30")]
        assert _one("mov wzr, w1").written_regs() == []

    def test_mnemonic_table(self):
        assert {"ldtr", "sttr", "bti", "eret", "b.eq"} <= MNEMONICS


# ══════════════════════════════════════════════════════════════════════
# Errors
# ══════════════════════════════════════════════════════════════════════

class TestErrors:
    def test_position_is_reported(self):
        with pytest.raises(AsmSyntaxError) as exc:
            parse(".fn f\n    ldr x0, [q9]\n.endfn\n", source="bad.s")
        assert exc.value.line == 2
        assert exc.value.col == 14
        assert str(exc.value).startswith("bad.s:2:14:")

    def test_unknown_mnemonic(self):
        with pytest.raises(UnknownMnemonic):
            _one("frob x0")
        with pytest.raises(UnknownMnemonic):
            _one("b.xx out")

    def test_duplicate_function(self):
        with pytest.raises(DuplicateFunction):
            parse(".fn f\n    ret\n.endfn\n.fn f\n    ret\n.endfn\n")

    def test_duplicate_block_label(self):
        with pytest.raises(AsmSyntaxError, match="duplicate block label"):
            parse(".fn f\na:\n    nop\na:\n    ret\n.endfn\n")

    def test_block_label_may_not_reuse_a_function_name(self):
        with pytest.raises(AsmSyntaxError, match="reuses a function name") as exc:
            parse(".fn main\n    b helper\nhelper:\n    ret\n.endfn\n.fn helper\n    ret\n.endfn\n")
        assert exc.value.line == 3

    def test_instruction_after_terminator(self):
        with pytest.raises(AsmSyntaxError, match="after a terminator"):
            parse(".fn f\n    ret\n    nop\n.endfn\n")

    @pytest.mark.parametrize("text", [
        "    ret\n",
        ".fn f\n    ret\n",
        ".endfn\n",
        ".fn f\n.endfn\n",
        ".fn f\n.fn g\n",
        ".fn f extra words\n    ret\n.endfn\n",
    ])
    def test_structural_errors(self, text):
        with pytest.raises(AsmSyntaxError):
            parse(text)

    @pytest.mark.parametrize("line", [
        "mov x0, #zz",
        "ldr x0, [xzr]",
        "ldtr x0, [x1, x2]",
        "sttr x0, [x1, #8]!",
        "svc #0x10000",
        "mrs x0, nonsense_el9",
        "msr bogus, #1",
        "bti q",
        "br x5, {}",
        "add x0, x1, x2, lsl #2",
        "adr w0, f",
        ".word 0x100000000",
    ])
    def test_operand_errors(self, line):
        with pytest.raises(AsmSyntaxError):
            _one(line)

    def test_all_errors_are_value_errors(self):
        assert issubclass(AsmSyntaxError, AsmError)
        assert issubclass(AsmError, ValueError)
