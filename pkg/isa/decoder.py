"""Instruction decoder: classifies 32-bit AArch64 words into security classes.

Only the fields the scanner, verifier and simulator need are decoded. Any
word outside the recognised groups is ``Other``; decoding never fails.

Two entry points:
- ``decode(word)``: scalar, returns an ``InstrClass`` with operands.
- ``classify_words(words, allow)``: numpy-vectorized forbidden-ness over a
  whole word array. It must agree with ``is_forbidden(decode(w), allow)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

import numpy as np

from config import CACHE_OPS, CONDITIONS, PSTATE_FIELDS, PSTATE_NON_MSR, SYSREGS_BY_ENCODING

if TYPE_CHECKING:
    from isa.allowlist import Allowlist


class Tag(Enum):
    LsuLoad = "LsuLoad"
    LsuStore = "LsuStore"
    Mrs = "Mrs"
    Msr = "Msr"
    CacheOp = "CacheOp"
    Tlbi = "Tlbi"
    Hvc = "Hvc"
    Smc = "Smc"
    Svc = "Svc"
    At = "At"
    Eret = "Eret"
    PredRestrict = "PredRestrict"
    MteTagMultiple = "MteTagMultiple"
    Brb = "Brb"
    SysOther = "SysOther"
    BtiLabel = "BtiLabel"
    Ret = "Ret"
    Br = "Br"
    Blr = "Blr"
    Bl = "Bl"
    B = "B"
    BCond = "BCond"
    AndMaskTopBit = "AndMaskTopBit"
    RegularLoad = "RegularLoad"
    RegularStore = "RegularStore"
    Other = "Other"


# Privileged categories. Mrs/Msr/CacheOp are excused per operand by the allowlist.
FORBIDDEN_TAGS = frozenset({
    Tag.Mrs, Tag.Msr, Tag.CacheOp, Tag.Tlbi, Tag.Hvc, Tag.Smc, Tag.At,
    Tag.Eret, Tag.PredRestrict, Tag.MteTagMultiple, Tag.Brb, Tag.SysOther,
})
OPERAND_CHECKED_TAGS = frozenset({Tag.Mrs, Tag.Msr, Tag.CacheOp})

_BTI_VARIANTS = {0: "None", 2: "C", 4: "J", 6: "JC"}
_ERET_WORDS = (0xD69F03E0, 0xD69F0BFF, 0xD69F0FFF)
_MTE_MULTIPLE = (0xD9E00000, 0xD9A00000, 0xD9200000)  # LDGM, STGM, STZGM
_PRED_RESTRICT_OP2 = (4, 5, 7)  # CFP, DVP, CPP
_BRB_OP2 = (4, 5)  # IALL, INJ


@dataclass(frozen=True)
class InstrClass:
    tag: Tag
    reg: Optional[int] = None
    imm: Optional[int] = None
    offset: Optional[int] = None
    cond: Optional[str] = None
    name: Optional[str] = None
    bti: Optional[str] = None

    def describe(self) -> str:
        """Fixture-file rendering, e.g. ``Mrs TPIDR_EL0`` or ``BCond 8 ne``."""
        parts = [self.tag.value]
        if self.bti is not None:
            parts.append(self.bti)
        if self.name is not None:
            parts.append(self.name)
        if self.reg is not None:
            parts.append(str(self.reg))
        if self.imm is not None:
            parts.append(str(self.imm))
        if self.offset is not None:
            parts.append(str(self.offset))
        if self.cond is not None:
            parts.append(self.cond)
        return " ".join(parts)


def _sign_extend(value: int, bits: int) -> int:
    if value & (1 << (bits - 1)):
        return value - (1 << bits)
    return value


def sysreg_name(op0: int, op1: int, crn: int, crm: int, op2: int) -> str:
    known = SYSREGS_BY_ENCODING.get((op0, op1, crn, crm, op2))
    if known:
        return known
    return f"S{op0}_{op1}_C{crn}_C{crm}_{op2}"


def pstate_name(op1: int, op2: int) -> str:
    return PSTATE_FIELDS.get((op1, op2), f"PSTATE_{op1}_{op2}")


def _decode_system(w: int) -> InstrClass:
    l_bit = (w >> 21) & 1
    op0 = (w >> 19) & 3
    op1 = (w >> 16) & 7
    crn = (w >> 12) & 0xF
    crm = (w >> 8) & 0xF
    op2 = (w >> 5) & 7

    if op0 == 0:
        if crn == 2 and op1 == 3 and l_bit == 0 and crm == 4 and (op2 & 1) == 0 and (w & 0x1F) == 0x1F:
            return InstrClass(Tag.BtiLabel, bti=_BTI_VARIANTS[op2])
        if crn == 4 and l_bit == 0 and (op1, op2) not in PSTATE_NON_MSR:
            return InstrClass(Tag.Msr, name=pstate_name(op1, op2))
        # hints, barriers, flag manipulation
        return InstrClass(Tag.Other)

    if op0 == 1:
        if l_bit == 1:
            return InstrClass(Tag.SysOther)
        if crn == 7:
            cache = CACHE_OPS.get((op1, crm, op2))
            if cache:
                return InstrClass(Tag.CacheOp, name=cache)
            if crm in (8, 9):
                return InstrClass(Tag.At)
            if op1 == 3 and crm == 3 and op2 in _PRED_RESTRICT_OP2:
                return InstrClass(Tag.PredRestrict)
            if op1 == 1 and crm == 2 and op2 in _BRB_OP2:
                return InstrClass(Tag.Brb)
        if crn in (8, 9):
            return InstrClass(Tag.Tlbi)
        return InstrClass(Tag.SysOther)

    name = sysreg_name(op0, op1, crn, crm, op2)
    return InstrClass(Tag.Mrs if l_bit else Tag.Msr, name=name, reg=w & 0x1F)


def _decode_load_store(w: int) -> Optional[InstrClass]:
    # Load/store register (unprivileged): LDTR*/STTR*
    if (w & 0x3F200C00) == 0x38000800:
        opc = (w >> 22) & 3
        return InstrClass(Tag.LsuStore if opc == 0 else Tag.LsuLoad)
    # Unsigned immediate offset
    if (w & 0x3B000000) == 0x39000000:
        opc = (w >> 22) & 3
        return InstrClass(Tag.RegularStore if opc == 0 else Tag.RegularLoad)
    # Unscaled / post-index / pre-index (the unprivileged form is handled above)
    if (w & 0x3B200000) == 0x38000000:
        opc = (w >> 22) & 3
        return InstrClass(Tag.RegularStore if opc == 0 else Tag.RegularLoad)
    # Register offset
    if (w & 0x3B200C00) == 0x38200800:
        opc = (w >> 22) & 3
        return InstrClass(Tag.RegularStore if opc == 0 else Tag.RegularLoad)
    # Load/store pair
    if (w & 0x3A000000) == 0x28000000:
        return InstrClass(Tag.RegularLoad if (w >> 22) & 1 else Tag.RegularStore)
    # Load register (literal)
    if (w & 0x3B000000) == 0x18000000:
        return InstrClass(Tag.RegularLoad)
    return None


def decode(word: int) -> InstrClass:
    """Classify one instruction word. Total and deterministic."""
    w = word & 0xFFFFFFFF

    if w in _ERET_WORDS:
        return InstrClass(Tag.Eret)

    # Exception generation
    if (w & 0xFFE00000) == 0xD4000000:
        imm16 = (w >> 5) & 0xFFFF
        ll = w & 0x1F
        if ll == 1:
            return InstrClass(Tag.Svc, imm=imm16)
        if ll == 2:
            return InstrClass(Tag.Hvc, imm=imm16)
        if ll == 3:
            return InstrClass(Tag.Smc, imm=imm16)
        return InstrClass(Tag.Other)

    if (w & 0xFFC00000) == 0xD5000000:
        return _decode_system(w)

    # Unconditional branch (register)
    masked = w & 0xFFFFFC1F
    if masked == 0xD61F0000:
        return InstrClass(Tag.Br, reg=(w >> 5) & 0x1F)
    if masked == 0xD63F0000:
        return InstrClass(Tag.Blr, reg=(w >> 5) & 0x1F)
    if masked == 0xD65F0000:
        return InstrClass(Tag.Ret, reg=(w >> 5) & 0x1F)

    top6 = w & 0xFC000000
    if top6 == 0x14000000:
        return InstrClass(Tag.B, offset=_sign_extend(w & 0x3FFFFFF, 26) * 4)
    if top6 == 0x94000000:
        return InstrClass(Tag.Bl, offset=_sign_extend(w & 0x3FFFFFF, 26) * 4)

    if (w & 0xFF000010) == 0x54000000:
        offset = _sign_extend((w >> 5) & 0x7FFFF, 19) * 4
        return InstrClass(Tag.BCond, offset=offset, cond=CONDITIONS[w & 0xF])

    # AND (immediate), 64-bit: only the exact top-bit clear on one register matters
    if (w & 0xFF800000) == 0x92000000:
        n = (w >> 22) & 1
        immr = (w >> 16) & 0x3F
        imms = (w >> 10) & 0x3F
        rn = (w >> 5) & 0x1F
        rd = w & 0x1F
        if (n, immr, imms) == (1, 0, 62) and rn == rd and rd != 31:
            return InstrClass(Tag.AndMaskTopBit, reg=rd)
        return InstrClass(Tag.Other)

    if (w & 0xFFFFFC00) in _MTE_MULTIPLE:
        return InstrClass(Tag.MteTagMultiple)

    ls = _decode_load_store(w)
    if ls is not None:
        return ls

    return InstrClass(Tag.Other)


def is_forbidden(c: InstrClass, allow: "Allowlist") -> bool:
    """True iff ``c`` is a privileged category not excused by the allowlist.

    SVC stays permitted: elevated tasks still enter the kernel through it.
    """
    if c.tag not in FORBIDDEN_TAGS:
        return False
    if c.tag == Tag.Mrs:
        return not allow.allows_sysreg(c.name or "", write=False)
    if c.tag == Tag.Msr:
        return not allow.allows_sysreg(c.name or "", write=True)
    if c.tag == Tag.CacheOp:
        return not allow.allows_cacheop(c.name or "")
    return True


# ── Vectorized classification ─────────────────────────────────────────


def _allowed_keys(allow: "Allowlist") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encode the allowlist as integer keys matching the vectorized fields.

    - sysreg keys: bits 21:5 of the word (L, op0, op1, CRn, CRm, op2)
    - pstate keys: (op1 << 3) | op2
    - cache keys:  (op1 << 7) | (CRm << 3) | op2
    """
    sys_keys = []
    for (op0, op1, crn, crm, op2), (read, write) in allow.sysreg_encodings().items():
        base = (op0 << 14) | (op1 << 11) | (crn << 7) | (crm << 3) | op2
        if read:
            sys_keys.append((1 << 16) | base)
        if write:
            sys_keys.append(base)
    pstate_keys = [
        (op1 << 3) | op2
        for op1 in range(8)
        for op2 in range(8)
        if (op1, op2) not in PSTATE_NON_MSR and allow.allows_sysreg(pstate_name(op1, op2), write=True)
    ]
    cache_keys = [
        (op1 << 7) | (crm << 3) | op2
        for (op1, crm, op2), name in CACHE_OPS.items()
        if allow.allows_cacheop(name)
    ]
    return (
        np.array(sys_keys, dtype=np.uint32),
        np.array(pstate_keys, dtype=np.uint32),
        np.array(cache_keys, dtype=np.uint32),
    )


def classify_words(words: np.ndarray, allow: "Allowlist") -> np.ndarray:
    """Boolean mask of forbidden words, one linear pass over ``words``.

    Every forbidden encoding has its top byte in 0xD4..0xD9, so the field
    extraction below only runs on that candidate subset.
    """
    w_all = np.asarray(words, dtype=np.uint32).ravel()
    out = np.zeros(w_all.shape, dtype=bool)
    top = w_all >> np.uint32(24)
    cand = np.flatnonzero((top >= np.uint32(0xD4)) & (top <= np.uint32(0xD9)))
    if cand.size == 0:
        return out
    w = w_all[cand]
    sys_keys, pstate_keys, cache_keys = _allowed_keys(allow)

    eret = np.isin(w, np.array(_ERET_WORDS, dtype=np.uint32))
    exc = (w & np.uint32(0xFFE0001F))
    hvc_smc = (exc == np.uint32(0xD4000002)) | (exc == np.uint32(0xD4000003))
    mte = np.isin(w & np.uint32(0xFFFFFC00), np.array(_MTE_MULTIPLE, dtype=np.uint32))

    system = (w & np.uint32(0xFFC00000)) == np.uint32(0xD5000000)
    l_bit = (w >> np.uint32(21)) & np.uint32(1)
    op0 = (w >> np.uint32(19)) & np.uint32(3)
    op1 = (w >> np.uint32(16)) & np.uint32(7)
    crn = (w >> np.uint32(12)) & np.uint32(0xF)
    crm = (w >> np.uint32(8)) & np.uint32(0xF)
    op2 = (w >> np.uint32(5)) & np.uint32(7)

    # MRS/MSR (register)
    sysreg = system & (op0 >= 2)
    sys_key = (w >> np.uint32(5)) & np.uint32(0x1FFFF)
    sysreg_bad = sysreg & ~np.isin(sys_key, sys_keys)

    # MSR (immediate) to PSTATE
    pkey = (op1 << np.uint32(3)) | op2
    non_msr = (op1 == 0) & (op2 <= 2)
    pstate = system & (op0 == 0) & (crn == 4) & (l_bit == 0) & ~non_msr
    pstate_bad = pstate & ~np.isin(pkey, pstate_keys)

    # SYS/SYSL space: everything except allowlisted cache maintenance
    sys_space = system & (op0 == 1)
    ckey = (op1 << np.uint32(7)) | (crm << np.uint32(3)) | op2
    cache_ok = (l_bit == 0) & (crn == 7) & np.isin(ckey, cache_keys)
    sys_bad = sys_space & ~cache_ok

    out[cand] = eret | hvc_smc | mte | sysreg_bad | pstate_bad | sys_bad
    return out
