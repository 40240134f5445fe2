"""Tests for toolchain.progen."""
from __future__ import annotations

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from toolchain.asm_frontend import parse, print_program
from toolchain.ir import R
from toolchain.progen import GenOptions, random_program, random_programs

RESERVED = {R("x16"), R("x17"), R("x28")}


class TestGenerator:
    def test_same_seed_same_programs(self):
        assert random_programs(3, 20) == random_programs(3, 20)

    def test_different_seeds_differ(self):
        assert random_programs(3, 20) != random_programs(4, 20)

    def test_entry_is_main(self):
        for program in random_programs(11, 50):
            assert program.functions[0].name == "main"
            assert program.function("main").spills_lr

    def test_reserved_registers_untouched(self):
        for program in random_programs(12, 100):
            for f in program.functions:
                for _, _, instr in f.instructions():
                    assert not any(instr.mentions(r) for r in RESERVED), str(instr)

    def test_calls_and_branches_go_forward(self):
        for program in random_programs(13, 100):
            names = program.function_names()
            for pos, f in enumerate(program.functions):
                labels = [b.label for b in f.blocks]
                for b, _, instr in f.instructions():
                    target = instr.label()
                    if target in names:
                        assert names.index(target) > pos
                    elif target in labels:
                        assert labels.index(target) > labels.index(b.label)

    def test_printed_form_parses_back(self):
        for program in random_programs(14, 30):
            assert parse(print_program(program)) == program

    def test_options_switch_features_off(self):
        opts = GenOptions(indirect_calls=False, switches=False, tail_calls=False)
        rng = random.Random(5)
        for _ in range(100):
            program = random_program(rng, opts)
            mnemonics = {i.mnemonic for f in program.functions for _, _, i in f.instructions()}
            assert not mnemonics & {"blr", "br"}

    def test_function_count_bounds(self):
        opts = GenOptions(min_functions=3, max_functions=3)
        assert all(len(p.functions) == 3 for p in random_programs(15, 20, opts))
