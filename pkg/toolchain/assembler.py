"""Encode IR instructions to AArch64 words and lay programs out in memory.

``instr_class`` ties the IR back to the decoder: an instruction's security
class is whatever its encoding decodes to.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from config import BTI_ENCODINGS, CONDITIONS, ERET_ENCODING, NOP_ENCODING, PSTATE_FIELDS_BY_NAME
from isa.allowlist import sysreg_encoding
from isa.decoder import InstrClass, decode
from toolchain import AsmError
from toolchain.ir import Imm, Instr, Label, Mem, Program, Reg, Sym

logger = logging.getLogger(__name__)

Resolver = Callable[[str], int]


class EncodeError(AsmError):
    pass


# ── Bitmask immediates ─────────────────────────────────────────────────

def encode_bitmask_imm(value: int, width: int = 64) -> Optional[Tuple[int, int, int]]:
    """(N, immr, imms) for a logical immediate, or None when not encodable."""
    full = (1 << width) - 1
    value &= full
    if value in (0, full):
        return None
    size = width
    while size > 2:
        half = size // 2
        mask = (1 << half) - 1
        if (value & mask) != ((value >> half) & mask):
            break
        size = half
    elem_mask = (1 << size) - 1
    elem = value & elem_mask
    ones = bin(elem).count("1")
    pattern = (1 << ones) - 1
    for r in range(size):
        rotated = ((elem >> r) | (elem << (size - r))) & elem_mask
        if rotated == pattern:
            immr = (size - r) % size
            break
    else:
        return None
    n = 1 if size == 64 else 0
    imms = ((~(size - 1) << 1) & 0x3F) | (ones - 1)
    return n, immr, imms


def decode_bitmask_imm(n: int, immr: int, imms: int, width: int = 64) -> int:
    combined = (n << 6) | (~imms & 0x3F)
    length = combined.bit_length() - 1
    if length < 1:
        raise EncodeError("reserved logical immediate")
    size = 1 << length
    levels = size - 1
    s = imms & levels
    r = immr & levels
    elem = (1 << (s + 1)) - 1
    elem = ((elem >> r) | (elem << (size - r))) & ((1 << size) - 1)
    out = 0
    for i in range(width // size):
        out |= elem << (i * size)
    return out


# ── Operand helpers ────────────────────────────────────────────────────

def _rn(reg: Reg) -> int:
    return reg.index


def _sf(reg: Reg) -> int:
    return 0 if reg.is_w else 1


def _check(cond: bool, instr: Instr, why: str) -> None:
    if not cond:
        raise EncodeError(f"cannot encode '{instr}': {why}")


def _imm_at(instr: Instr, i: int) -> Imm:
    op = instr.operands[i]
    _check(isinstance(op, Imm), instr, f"operand {i + 1} must be an immediate")
    return op  # type: ignore[return-value]


def _mem_at(instr: Instr, i: int) -> Mem:
    op = instr.operands[i]
    _check(isinstance(op, Mem), instr, f"operand {i + 1} must be a memory operand")
    return op  # type: ignore[return-value]


def _reg_at(instr: Instr, i: int) -> Reg:
    op = instr.operands[i]
    _check(isinstance(op, Reg), instr, f"operand {i + 1} must be a register")
    return op  # type: ignore[return-value]


def _branch_offset(instr: Instr, pc: int, resolve: Resolver, bits: int) -> int:
    label = instr.label()
    _check(label is not None, instr, "missing branch target")
    try:
        target = resolve(label)  # type: ignore[arg-type]
    except KeyError:
        raise EncodeError(f"cannot encode '{instr}': unresolved label '{label}'") from None
    delta = target - pc
    _check(delta % 4 == 0, instr, "misaligned branch target")
    words = delta // 4
    _check(-(1 << (bits - 1)) <= words < (1 << (bits - 1)), instr, "branch target out of range")
    return words & ((1 << bits) - 1)


# ── Per-mnemonic encoders ──────────────────────────────────────────────

def _enc_addsub(instr: Instr, sub: bool) -> int:
    rd, rn = _reg_at(instr, 0), _reg_at(instr, 1)
    _check(rd.is_w == rn.is_w, instr, "mixed register widths")
    sf = _sf(rd)
    op = instr.operands[2]
    if isinstance(op, Imm):
        value, shift = op.value, op.shift
        if value < 0:
            value, sub = -value, not sub
        _check(shift in (0, 12) and 0 <= value < 4096, instr, "immediate out of range")
        _check(not rd.is_zr and not rn.is_zr, instr, "zero register not allowed")
        base = 0xD1000000 if sub else 0x91000000
        return (base & 0x7FFFFFFF) | (sf << 31) | ((shift // 12) << 22) | (value << 10) | (_rn(rn) << 5) | _rn(rd)
    rm = op
    _check(isinstance(rm, Reg), instr, "operand 3 must be a register or immediate")
    _check(not rd.is_sp and not rn.is_sp and not rm.is_sp, instr, "sp not allowed in register form")
    base = 0xCB000000 if sub else 0x8B000000
    return (base & 0x7FFFFFFF) | (sf << 31) | (_rn(rm) << 16) | (_rn(rn) << 5) | _rn(rd)


def _enc_cmp(instr: Instr) -> int:
    rn = _reg_at(instr, 0)
    sf = _sf(rn)
    op = instr.operands[1]
    if isinstance(op, Imm):
        value, sub = op.value, True
        if value < 0:
            value, sub = -value, False
        _check(0 <= value < 4096, instr, "immediate out of range")
        base = 0x71000000 if sub else 0x31000000  # SUBS / ADDS, Rd = zr
        return base | (sf << 31) | (value << 10) | (_rn(rn) << 5) | 31
    _check(isinstance(op, Reg), instr, "operand 2 must be a register or immediate")
    return 0x6B000000 | (sf << 31) | (op.index << 16) | (_rn(rn) << 5) | 31  # type: ignore[union-attr]


def _enc_mov(instr: Instr) -> int:
    rd = _reg_at(instr, 0)
    op = instr.operands[1]
    sf = _sf(rd)
    width = 32 if rd.is_w else 64
    if isinstance(op, Reg):
        if rd.is_sp or op.is_sp:
            return _enc_addsub(Instr("add", (rd, op, Imm(0))), sub=False)
        return 0x2A0003E0 | (sf << 31) | (op.index << 16) | _rn(rd)
    value = op.value & ((1 << width) - 1)  # type: ignore[union-attr]
    for hw in range(width // 16):
        if value & ~(0xFFFF << (hw * 16)) == 0:
            return 0x52800000 | (sf << 31) | (hw << 21) | (((value >> (hw * 16)) & 0xFFFF) << 5) | _rn(rd)
    inverted = ~value & ((1 << width) - 1)
    for hw in range(width // 16):
        if inverted & ~(0xFFFF << (hw * 16)) == 0:
            return 0x12800000 | (sf << 31) | (hw << 21) | (((inverted >> (hw * 16)) & 0xFFFF) << 5) | _rn(rd)
    raise EncodeError(f"cannot encode '{instr}': immediate needs movz/movk")


def _enc_movwide(instr: Instr, keep: bool) -> int:
    rd = _reg_at(instr, 0)
    imm = _imm_at(instr, 1)
    width = 32 if rd.is_w else 64
    _check(imm.shift % 16 == 0 and imm.shift < width, instr, "shift must be a multiple of 16")
    _check(0 <= imm.value <= 0xFFFF, instr, "immediate must fit in 16 bits")
    base = 0x72800000 if keep else 0x52800000
    return base | (_sf(rd) << 31) | ((imm.shift // 16) << 21) | (imm.value << 5) | _rn(rd)


def _enc_and(instr: Instr) -> int:
    rd, rn = _reg_at(instr, 0), _reg_at(instr, 1)
    imm = _imm_at(instr, 2)
    width = 32 if rd.is_w else 64
    fields = encode_bitmask_imm(imm.value, width)
    _check(fields is not None, instr, "not a logical immediate")
    n, immr, imms = fields  # type: ignore[misc]
    return 0x12000000 | (_sf(rd) << 31) | (n << 22) | (immr << 16) | (imms << 10) | (_rn(rn) << 5) | _rn(rd)


def _enc_mul(instr: Instr) -> int:
    rd, rn, rm = (_reg_at(instr, i) for i in range(3))
    return 0x1B007C00 | (_sf(rd) << 31) | (rm.index << 16) | (rn.index << 5) | rd.index


def _enc_ldst(instr: Instr, load: bool) -> int:
    rt = _reg_at(instr, 0)
    mem = _mem_at(instr, 1)
    size = 2 if rt.is_w else 3
    scale = 1 << size
    opc = 1 if load else 0
    head = (size << 30) | (opc << 22)
    rn, rtn = mem.base.index, rt.index

    if mem.index is not None:
        return 0x38200800 | head | (mem.index.index << 16) | (0b011 << 13) | (rn << 5) | rtn
    if mem.mode in ("pre", "post"):
        _check(-256 <= mem.offset < 256, instr, "writeback offset out of range")
        idx = 0b11 if mem.mode == "pre" else 0b01
        return 0x38000000 | head | ((mem.offset & 0x1FF) << 12) | (idx << 10) | (rn << 5) | rtn
    if mem.offset >= 0 and mem.offset % scale == 0 and mem.offset // scale < 4096:
        return 0x39000000 | head | ((mem.offset // scale) << 10) | (rn << 5) | rtn
    _check(-256 <= mem.offset < 256, instr, "offset out of range")
    return 0x38000000 | head | ((mem.offset & 0x1FF) << 12) | (rn << 5) | rtn


def _enc_unpriv(instr: Instr, load: bool) -> int:
    rt = _reg_at(instr, 0)
    mem = _mem_at(instr, 1)
    _check(mem.mode == "offset" and mem.index is None, instr, "only immediate offsets")
    _check(-256 <= mem.offset < 256, instr, "offset out of range")
    size = 2 if rt.is_w else 3
    opc = 1 if load else 0
    return 0x38000800 | (size << 30) | (opc << 22) | ((mem.offset & 0x1FF) << 12) | (mem.base.index << 5) | rt.index


def _enc_pair(instr: Instr, load: bool) -> int:
    rt, rt2 = _reg_at(instr, 0), _reg_at(instr, 1)
    mem = _mem_at(instr, 2)
    _check(rt.is_w == rt2.is_w, instr, "mixed register widths")
    scale = 4 if rt.is_w else 8
    _check(mem.offset % scale == 0 and -64 <= mem.offset // scale < 64, instr, "pair offset out of range")
    opc = 0 if rt.is_w else 2
    idx = {"post": 0b01, "offset": 0b10, "pre": 0b11}[mem.mode]
    imm7 = (mem.offset // scale) & 0x7F
    return (0x28000000 | (opc << 30) | (idx << 23) | ((1 if load else 0) << 22) | (imm7 << 15)
            | (rt2.index << 10) | (mem.base.index << 5) | rt.index)


def _enc_sysreg(instr: Instr, read: bool) -> int:
    if read:
        rt, sym = _reg_at(instr, 0), instr.operands[1]
    else:
        sym, rt = instr.operands[0], instr.operands[1]
    _check(isinstance(sym, Sym) and isinstance(rt, Reg), instr, "expected a system register and a register")
    enc = sysreg_encoding(sym.name)  # type: ignore[union-attr]
    _check(enc is not None, instr, "unknown system register")
    op0, op1, crn, crm, op2 = enc  # type: ignore[misc]
    return (0xD5000000 | ((1 if read else 0) << 21) | (op0 << 19) | (op1 << 16) | (crn << 12)
            | (crm << 8) | (op2 << 5) | rt.index)  # type: ignore[union-attr]


def _enc_msr(instr: Instr) -> int:
    if isinstance(instr.operands[1], Imm):
        sym = instr.operands[0]
        imm = instr.operands[1].value
        _check(isinstance(sym, Sym) and 0 <= imm <= 15, instr, "bad PSTATE immediate")
        op1, op2 = PSTATE_FIELDS_BY_NAME[sym.name.upper()]  # type: ignore[union-attr]
        return 0xD500401F | (op1 << 16) | (imm << 8) | (op2 << 5)
    return _enc_sysreg(instr, read=False)


def _unresolved(name: str) -> int:
    raise KeyError(name)


def encode(instr: Instr, pc: int = 0, resolve: Optional[Resolver] = None) -> int:
    """Encode one instruction at ``pc``; ``resolve`` maps labels to addresses."""
    m = instr.mnemonic
    res: Resolver = resolve or _unresolved

    if m == "b":
        return 0x14000000 | _branch_offset(instr, pc, res, 26)
    if m == "bl":
        return 0x94000000 | _branch_offset(instr, pc, res, 26)
    if m.startswith("b."):
        cond = CONDITIONS.index(m[2:])
        return 0x54000000 | (_branch_offset(instr, pc, res, 19) << 5) | cond
    if m in ("br", "blr", "ret"):
        base = {"br": 0xD61F0000, "blr": 0xD63F0000, "ret": 0xD65F0000}[m]
        return base | (instr.branch_reg().index << 5)
    if m == "bti":
        target = instr.label() or "none"
        return BTI_ENCODINGS[target]
    if m == "nop":
        return NOP_ENCODING
    if m == "eret":
        return ERET_ENCODING
    if m in ("svc", "hvc", "smc"):
        imm = _imm_at(instr, 0).value
        return 0xD4000000 | (imm << 5) | {"svc": 1, "hvc": 2, "smc": 3}[m]
    if m == "and":
        return _enc_and(instr)
    if m == "mov":
        return _enc_mov(instr)
    if m in ("movz", "movk"):
        return _enc_movwide(instr, keep=m == "movk")
    if m in ("add", "sub"):
        return _enc_addsub(instr, sub=m == "sub")
    if m == "cmp":
        return _enc_cmp(instr)
    if m == "mul":
        return _enc_mul(instr)
    if m == "adr":
        rd = _reg_at(instr, 0)
        label = instr.label()
        try:
            delta = res(label) - pc  # type: ignore[arg-type]
        except KeyError:
            raise EncodeError(f"cannot encode '{instr}': unresolved label '{label}'") from None
        _check(-(1 << 20) <= delta < (1 << 20), instr, "adr target out of range")
        delta &= 0x1FFFFF
        return 0x10000000 | ((delta & 3) << 29) | ((delta >> 2) << 5) | rd.index
    if m in ("ldr", "str"):
        return _enc_ldst(instr, load=m == "ldr")
    if m in ("ldtr", "sttr"):
        return _enc_unpriv(instr, load=m == "ldtr")
    if m in ("ldp", "stp"):
        return _enc_pair(instr, load=m == "ldp")
    if m == "mrs":
        return _enc_sysreg(instr, read=True)
    if m == "msr":
        return _enc_msr(instr)
    if m == ".word":
        return _imm_at(instr, 0).value & 0xFFFFFFFF
    raise EncodeError(f"no encoding for mnemonic '{m}'")


def instr_class(instr: Instr) -> InstrClass:
    """Security class of an IR instruction: encode it, then decode the word.

    Branch offsets do not affect the class, so labels resolve to ``pc``.
    """
    return decode(encode(instr, 0, lambda _name: 0))


# ── Program layout ─────────────────────────────────────────────────────

@dataclass(frozen=True)
class Located:
    instr: Instr
    function: str
    block: str
    index: int


@dataclass
class Image:
    base: int
    code: bytes
    symbols: Dict[str, int] = field(default_factory=dict)  # function name -> address
    blocks: Dict[Tuple[str, str], int] = field(default_factory=dict)
    located: Dict[int, Located] = field(default_factory=dict)

    @property
    def end(self) -> int:
        return self.base + len(self.code)

    def words(self) -> List[int]:
        return list(struct.unpack(f"<{len(self.code) // 4}I", self.code))


def assemble(program: Program, base: int) -> Image:
    """Encode a program as a little-endian code image starting at ``base``."""
    image = Image(base, b"")
    pc = base
    for f in program.functions:
        image.symbols[f.name] = pc
        for b in f.blocks:
            image.blocks[(f.name, b.label)] = pc
            for idx, instr in enumerate(b.instrs):
                image.located[pc] = Located(instr, f.name, b.label, idx)
                pc += 4

    words: List[int] = []
    for addr in sorted(image.located):
        loc = image.located[addr]

        def resolve(name: str, fn: str = loc.function) -> int:
            if (fn, name) in image.blocks:
                return image.blocks[(fn, name)]
            return image.symbols[name]

        words.append(encode(loc.instr, addr, resolve))

    image.code = struct.pack(f"<{len(words)}I", *words)
    logger.debug("assembled %d instruction(s) at %#x", len(words), base)
    return image
