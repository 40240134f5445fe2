"""Tests for sim.machine: execution, legacy/elevated equivalence, longjmp unwinding."""
from __future__ import annotations

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

import pytest

from config import DATA_DIR, DEFAULT_LAYOUT, SS_SLOT_SIZE, UPPER_HALF_BASE
from security.perm_model import FaultReason, Via
from security.policy import TaskKind, configure_elevated, configure_legacy
from sim import SimError
from sim.attacks import load_script, run_attack
from sim.machine import (
    Exited,
    Faulted,
    FuelExhausted,
    Hijacked,
    LoadError,
    ShadowStackUnderflow,
    UnverifiedProgram,
    format_trace,
    load,
    longjmp_unwind,
    run,
)
from toolchain.asm_frontend import parse, parse_file
from toolchain.progen import random_programs
from toolchain.rewriter import rewrite

CORPUS = sorted((DATA_DIR / "corpus").glob("*.s"))
ATTACKS = [
    ("ret_overwrite.s", "ret_overwrite.txt"),
    ("ret_overwrite.s", "shadow_tamper.txt"),
    ("ret_overwrite.s", "code_patch.txt"),
    ("fnptr.s", "fnptr_gadget.txt"),
    ("fnptr.s", "fnptr_kernel.txt"),
    ("fnptr.s", "setreg_kernel.txt"),
    ("stale_longjmp.s", "stale_longjmp.txt"),
]


@pytest.fixture(scope="module")
def legacy():
    return configure_legacy()[0]


@pytest.fixture(scope="module")
def elevated():
    return configure_elevated()[0]


def _corpus(name: str):
    return parse_file(DATA_DIR / "corpus" / name)


# ══════════════════════════════════════════════════════════════════════
# Known results
# ══════════════════════════════════════════════════════════════════════

EXPECTED = [
    ("fib.s", 55, [55]),
    ("switch.s", 200, [100, 200]),
    ("two_returns.s", 20, [8, 12]),
    ("indirect_call.s", 49, [49]),
    ("countdown.s", 0, [5, 4, 3, 2, 1]),
    ("setjmp_longjmp.s", 7, [1, 7]),
]


class TestKnownResults:
    @pytest.mark.parametrize("name,code,outputs", EXPECTED, ids=[e[0] for e in EXPECTED])
    def test_legacy(self, legacy, name, code, outputs):
        outcome = run(_corpus(name), legacy)
        assert outcome.result == Exited(code)
        assert outcome.machine.outputs == outputs

    @pytest.mark.parametrize("name,code,outputs", EXPECTED, ids=[e[0] for e in EXPECTED])
    def test_elevated_rewritten(self, elevated, name, code, outputs):
        outcome = run(rewrite(_corpus(name)), elevated)
        assert outcome.exit_code == code
        assert outcome.machine.outputs == outputs

    def test_shadow_stack_is_balanced_at_exit(self, elevated):
        outcome = run(rewrite(_corpus("fib.s")), elevated)
        m = outcome.machine
        assert m.x[28] == m.shadow.base

    def test_trace_records_calls_and_exit(self, legacy):
        outcome = run(_corpus("indirect_call.s"), legacy)
        kinds = [e.kind for e in outcome.trace]
        assert "call" in kinds and "trace" in kinds
        assert kinds[-1] == "exit"
        assert format_trace(outcome.trace).count("\n") == len(outcome.trace)


# ══════════════════════════════════════════════════════════════════════
# Equivalence: original on a legacy task, rewritten on an elevated task
# ══════════════════════════════════════════════════════════════════════

class TestEquivalence:
    @pytest.mark.parametrize("path", CORPUS, ids=[p.stem for p in CORPUS])
    def test_corpus(self, legacy, elevated, path):
        program = parse_file(path)
        before = run(program, legacy)
        after = run(rewrite(program), elevated)
        assert isinstance(before.result, Exited)
        assert after.result == before.result
        assert after.machine.outputs == before.machine.outputs

    def test_random_programs(self, legacy, elevated):
        mismatches = []
        for n, program in enumerate(random_programs(seed=21, count=500)):
            before = run(program, legacy)
            after = run(rewrite(program), elevated)
            if after.result != before.result or after.machine.outputs != before.machine.outputs:
                mismatches.append((n, str(before.result), str(after.result)))
        assert mismatches == []

    def test_runs_are_deterministic(self, elevated):
        program = rewrite(_corpus("callbacks.s"))
        first, second = run(program, elevated), run(program, elevated)
        assert first.trace == second.trace
        assert first.result == second.result


# ══════════════════════════════════════════════════════════════════════
# longjmp unwinding
# ══════════════════════════════════════════════════════════════════════

class TestUnwind:
    @pytest.fixture
    def machine(self, elevated):
        return load(rewrite(_corpus("fib.s")), elevated)

    def _push(self, m, values):
        for v in values:
            m.store(m.x[28], SS_SLOT_SIZE, v, Via.Lsu)
            m.x[28] += SS_SLOT_SIZE

    def test_matches_oracle(self, elevated):
        rng = random.Random(99)
        for _ in range(200):
            m = load(rewrite(_corpus("fib.s")), elevated)
            depth = rng.randint(1, 40)
            values = rng.sample(range(0x400000, 0x410000, 4), depth)
            self._push(m, values)
            k = rng.randrange(depth)
            expected = m.shadow.base + SS_SLOT_SIZE * (k + 1)
            assert longjmp_unwind(m, values[k], saved_x28=expected) == expected

    def test_target_on_top_needs_no_steps(self, machine):
        self._push(machine, [0x400100, 0x400200])
        top = machine.x[28]
        assert longjmp_unwind(machine, 0x400200, saved_x28=top) == top
        assert machine.trace[-1].detail.endswith("steps=0")

    def test_missing_target_hits_the_guard(self, machine):
        self._push(machine, [0x400100, 0x400200])
        with pytest.raises(ShadowStackUnderflow) as exc:
            longjmp_unwind(machine, 0x400300, saved_x28=machine.x[28])
        assert exc.value.address == machine.shadow.base - SS_SLOT_SIZE
        assert exc.value.verdict.fault_reason == FaultReason.TranslationFault


# ══════════════════════════════════════════════════════════════════════
# Loading and errors
# ══════════════════════════════════════════════════════════════════════

class TestLoading:
    def test_elevated_task_starts_at_shadow_base(self, elevated):
        m = load(rewrite(_corpus("fib.s")), elevated)
        assert m.kind == TaskKind.Elevated
        assert m.x[28] == m.shadow.base

    def test_legacy_task_has_no_shadow_stack(self, legacy):
        m = load(_corpus("fib.s"), legacy)
        assert m.kind == TaskKind.Legacy
        assert m.shadow is None

    def test_unverified_program_is_refused(self, elevated):
        with pytest.raises(UnverifiedProgram) as exc:
            run(_corpus("fib.s"), elevated)
        assert exc.value.violations

    def test_unverified_program_runs_when_allowed(self, elevated):
        outcome = run(_corpus("fib.s"), elevated, allow_unverified=True)
        assert outcome.result == Exited(55)

    def test_missing_entry(self, legacy):
        with pytest.raises(LoadError, match="not found"):
            run(_corpus("fib.s"), legacy, entry="start_here")

    def test_reserved_start_symbol(self, legacy):
        with pytest.raises(LoadError, match="reserved"):
            run(parse(".fn __start\n    ret\n.endfn\n.fn main\n    ret\n.endfn\n"), legacy)

    def test_fuel(self, legacy):
        with pytest.raises(FuelExhausted) as exc:
            run(parse(".fn main\nspin:\n    b spin\n.endfn\n"), legacy, fuel=100)
        assert exc.value.steps == 100

    def test_undefined_instruction_faults(self, legacy):
        outcome = run(parse(".fn main\n    hvc #0\n    ret\n.endfn\n"), legacy)
        assert isinstance(outcome.result, Faulted)
        assert outcome.result.reason == FaultReason.UndefinedInstruction
        assert outcome.exit_code is None

    def test_errors_are_sim_errors(self):
        for cls in (FuelExhausted, LoadError, ShadowStackUnderflow, UnverifiedProgram):
            assert issubclass(cls, SimError)


# ══════════════════════════════════════════════════════════════════════
# Run-time invariants of elevated tasks
# ══════════════════════════════════════════════════════════════════════

def _returns_match_calls(trace) -> list:
    """Replay calls and returns with an independent stack; collect mismatches."""
    stack, bad = [], []
    for e in trace:
        if e.kind == "longjmp":
            break
        if e.kind == "call":
            stack.append(e.pc + 4)
        elif e.kind == "ret":
            want = stack.pop() if stack else None
            if int(e.detail, 16) != want:
                bad.append((e.step, e.detail, want))
    return bad


class TestInvariants:
    @pytest.mark.parametrize("path", CORPUS, ids=[p.stem for p in CORPUS])
    def test_every_return_goes_to_its_call_site(self, elevated, path):
        outcome = run(rewrite(parse_file(path)), elevated)
        assert isinstance(outcome.result, Exited)
        assert _returns_match_calls(outcome.trace) == []

    @pytest.mark.parametrize("path", CORPUS, ids=[p.stem for p in CORPUS])
    def test_pc_stays_in_the_lower_half(self, elevated, path):
        outcome = run(rewrite(parse_file(path)), elevated)
        assert [e for e in outcome.trace if e.pc >= UPPER_HALF_BASE] == []

    @pytest.mark.parametrize("program,script", ATTACKS, ids=[s for _, s in ATTACKS])
    def test_attacks_never_reach_the_upper_half(self, elevated, program, script):
        p = rewrite(parse_file(DATA_DIR / "attacks" / program))
        outcome = run_attack(p, elevated, load_script(DATA_DIR / "attacks" / script))
        assert not isinstance(outcome.result, Hijacked)
        assert [e for e in outcome.trace if e.pc >= UPPER_HALF_BASE] == []

    def test_shadow_stack_survives_a_regular_store(self, elevated):
        p = rewrite(parse_file(DATA_DIR / "attacks" / "ret_overwrite.s"))
        outcome = run_attack(p, elevated, load_script(DATA_DIR / "attacks" / "shadow_tamper.txt"))
        m = outcome.machine
        assert outcome.result.reason == FaultReason.PanFault
        pushed = [e.pc + 4 for e in outcome.trace if e.kind == "call"]
        slots = [int.from_bytes(m.peek(m.shadow.base + SS_SLOT_SIZE * i, SS_SLOT_SIZE), "little")
                 for i in range(len(pushed))]
        assert slots == pushed
        assert m.x[28] == m.shadow.base + SS_SLOT_SIZE * len(pushed)

    def test_unprivileged_store_reaches_kernel_data(self, elevated):
        # sttr from an elevated task acts as EL0, and kernel pages are EL0-accessible
        p = parse(
            ".fn main\n"
            "    movz x1, #0x80, lsl #16\n"
            "    movk x1, #0xffff, lsl #48\n"
            "    mov x0, #77\n"
            "    sttr x0, [x1]\n"
            "    ldtr x0, [x1]\n"
            "    svc #0\n"
            ".endfn\n"
        )
        with pytest.raises(UnverifiedProgram) as exc:
            run(p, elevated)
        assert {v.rule for v in exc.value.violations} >= {"V3"}
        outcome = run(p, elevated, allow_unverified=True)
        assert outcome.result == Exited(77)
        kdata = DEFAULT_LAYOUT["kernel_data_base"]
        assert outcome.machine.peek(kdata, 8) == (77).to_bytes(8, "little")

    def test_fetch_from_a_pxn_page_faults(self, elevated):
        p = parse(
            ".fn main\n"
            "    movz x5, #0x60, lsl #16\n"
            "    blr x5\n"
            "    ret\n"
            ".endfn\n"
        )
        outcome = run(p, elevated, allow_unverified=True)
        assert outcome.result.reason == FaultReason.PxnFault
        assert outcome.result.address == DEFAULT_LAYOUT["data_base"]
