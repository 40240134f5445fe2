"""Centralized configuration for the InversOS simulator toolkit.

Single source of truth for encodings, register tables, layout defaults and
shared constants. Every module that needs a system-register name, a BTI
encoding or a default region size should import from here.
"""
from __future__ import annotations

from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent
DATA_DIR = PROJECT_ROOT / "data"

DEFAULT_ALLOWLIST_PATH = DATA_DIR / "allowlist_default.txt"
DECODE_FIXTURES_PATH = DATA_DIR / "decode_fixtures.txt"
CORPUS_DIR = DATA_DIR / "corpus"
ATTACKS_DIR = DATA_DIR / "attacks"

VERSION = "0.3.0"

# ── System registers (op0, op1, CRn, CRm, op2) ─────────────────────────
# Used by: decoder (naming Mrs/Msr operands), allowlist, assembler.

SYSREGS = {
    # EL0-accessible
    "TPIDR_EL0":      (3, 3, 13, 0, 2),
    "TPIDRRO_EL0":    (3, 3, 13, 0, 3),
    "NZCV":           (3, 3, 4, 2, 0),
    "DAIF":           (3, 3, 4, 2, 1),
    "DIT":            (3, 3, 4, 2, 5),
    "SSBS":           (3, 3, 4, 2, 6),
    "TCO":            (3, 3, 4, 2, 7),
    "FPCR":           (3, 3, 4, 4, 0),
    "FPSR":           (3, 3, 4, 4, 1),
    "CTR_EL0":        (3, 3, 0, 0, 1),
    "DCZID_EL0":      (3, 3, 0, 0, 7),
    "RNDR":           (3, 3, 2, 4, 0),
    "RNDRRS":         (3, 3, 2, 4, 1),
    "CNTFRQ_EL0":     (3, 3, 14, 0, 0),
    "CNTPCT_EL0":     (3, 3, 14, 0, 1),
    "CNTVCT_EL0":     (3, 3, 14, 0, 2),
    # EL1 and above
    "MIDR_EL1":       (3, 0, 0, 0, 0),
    "MPIDR_EL1":      (3, 0, 0, 0, 5),
    "SCTLR_EL1":      (3, 0, 1, 0, 0),
    "TTBR0_EL1":      (3, 0, 2, 0, 0),
    "TTBR1_EL1":      (3, 0, 2, 0, 1),
    "TCR_EL1":        (3, 0, 2, 0, 2),
    "SPSR_EL1":       (3, 0, 4, 0, 0),
    "ELR_EL1":        (3, 0, 4, 0, 1),
    "SP_EL0":         (3, 0, 4, 1, 0),
    "SPSel":          (3, 0, 4, 2, 0),
    "CurrentEL":      (3, 0, 4, 2, 2),
    "PAN":            (3, 0, 4, 2, 3),
    "UAO":            (3, 0, 4, 2, 4),
    "ESR_EL1":        (3, 0, 5, 2, 0),
    "FAR_EL1":        (3, 0, 6, 0, 0),
    "MAIR_EL1":       (3, 0, 10, 2, 0),
    "VBAR_EL1":       (3, 0, 12, 0, 0),
    "CONTEXTIDR_EL1": (3, 0, 13, 0, 1),
    "TPIDR_EL1":      (3, 0, 13, 0, 4),
    "CNTKCTL_EL1":    (3, 0, 14, 1, 0),
    "HCR_EL2":        (3, 4, 1, 1, 0),
}
SYSREGS_BY_ENCODING = {v: k for k, v in SYSREGS.items()}
SYSREGS_UPPER = {k.upper(): k for k in SYSREGS}

# MSR (immediate) PSTATE fields keyed by (op1, op2).
PSTATE_FIELDS = {
    (0, 3): "UAO",
    (0, 4): "PAN",
    (0, 5): "SPSel",
    (3, 1): "SSBS",
    (3, 2): "DIT",
    (3, 4): "TCO",
    (3, 6): "DAIFSet",
    (3, 7): "DAIFClr",
}
PSTATE_FIELDS_BY_NAME = {v.upper(): k for k, v in PSTATE_FIELDS.items()}
# (op1, op2) pairs in the PSTATE space that are flag-manipulation instructions.
PSTATE_NON_MSR = {(0, 0), (0, 1), (0, 2)}

# Cache maintenance (SYS #op1, C7, Cm, #op2) keyed by (op1, CRm, op2).
CACHE_OPS = {
    (0, 1, 0): "IC_IALLUIS",
    (0, 5, 0): "IC_IALLU",
    (3, 5, 1): "IC_IVAU",
    (0, 6, 1): "DC_IVAC",
    (0, 6, 2): "DC_ISW",
    (0, 6, 3): "DC_IGVAC",
    (0, 10, 2): "DC_CSW",
    (0, 14, 2): "DC_CISW",
    (3, 4, 1): "DC_ZVA",
    (3, 4, 3): "DC_GVA",
    (3, 4, 4): "DC_GZVA",
    (3, 10, 1): "DC_CVAC",
    (3, 11, 1): "DC_CVAU",
    (3, 12, 1): "DC_CVAP",
    (3, 13, 1): "DC_CVADP",
    (3, 14, 1): "DC_CIVAC",
}
CACHE_OPS_BY_NAME = {v: k for k, v in CACHE_OPS.items()}

CONDITIONS = [
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
    "hi", "ls", "ge", "lt", "gt", "le", "al", "nv",
]
CONDITION_ALIASES = {"hs": "cs", "lo": "cc"}

# ── Instrumentation constants ──────────────────────────────────────────

BTI_ENCODINGS = {
    "none": 0xD503241F,
    "c": 0xD503245F,
    "j": 0xD503249F,
    "jc": 0xD50324DF,
}
NOP_ENCODING = 0xD503201F
ERET_ENCODING = 0xD69F03E0

TOP_BIT_MASK = 0x7FFFFFFFFFFFFFFF
SHADOW_STACK_REG = "x28"
CFI_SCRATCH_REGS = ("x16", "x17")
DEFAULT_TRAP_SYMBOL = "__cfi_trap"
CFI_TRAP_STATUS = 0x86
START_SYMBOL = "__start"

SS_SLOT_SIZE = 8
PAGE_SIZE = 4096

# ── SVC hooks (imm16 → behaviour) ──────────────────────────────────────

SVC_EXIT = 0
SVC_TRACE = 1
SVC_SETJMP = 2
SVC_LONGJMP = 3

# ── Layout defaults ────────────────────────────────────────────────────
# Lower half: task regions. Upper half (bit 63 set): kernel regions.

LOWER_HALF_LIMIT = 1 << 48
UPPER_HALF_BASE = 0xFFFF000000000000

DEFAULT_LAYOUT = {
    "code_base": 0x400000,
    "code_size": 0x10000,
    "data_base": 0x600000,
    "data_size": 0x10000,
    "stack_base": 0x7FF00000,
    "stack_size": 0x10000,
    "shadow_base": 0x10000000,
    "shadow_size": 0x10000,
    "guard_size": PAGE_SIZE,
    "kernel_code_base": 0xFFFF000000080000,
    "kernel_code_size": 0x10000,
    "kernel_data_base": 0xFFFF000000800000,
    "kernel_data_size": 0x10000,
    "kernel_table_levels": 2,
}

DEFAULT_FUEL = 200_000
