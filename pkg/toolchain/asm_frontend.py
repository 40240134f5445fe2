"""Parser and printer for the assembly subset (grammar in docs/ASM_GRAMMAR.md)."""
from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from config import CONDITION_ALIASES, CONDITIONS, PSTATE_FIELDS, PSTATE_FIELDS_BY_NAME
from isa.allowlist import canonical_sysreg, sysreg_encoding
from toolchain import AsmError
from toolchain.ir import Block, Function, Imm, Instr, Label, Mem, Operand, Program, Reg, Sym, parse_reg

logger = logging.getLogger(__name__)


class AsmSyntaxError(AsmError):
    def __init__(self, message: str, line: int, col: int = 1, source: str = "<input>"):
        self.line = line
        self.col = col
        self.source = source
        self.message = message
        super().__init__(f"{source}:{line}:{col}: {message}")


class DuplicateFunction(AsmError):
    pass


class UnknownMnemonic(AsmError):
    pass


_LABEL_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_BTI_TARGETS = ("c", "j", "jc")


class _Line:
    """Operand tokens of one source line plus position bookkeeping for errors."""

    def __init__(self, text: str, lineno: int, source: str):
        self.text = text
        self.lineno = lineno
        self.source = source

    def error(self, message: str, token: Optional[str] = None) -> AsmSyntaxError:
        col = self.text.find(token) + 1 if token else 1
        return AsmSyntaxError(message, self.lineno, max(col, 1), self.source)


def _split_operands(text: str) -> List[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    return parts


def _parse_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    neg = t.startswith("-")
    if neg:
        t = t[1:]
    try:
        value = int(t, 0)
    except ValueError:
        return None
    return -value if neg else value


def _imm(tok: str, ln: _Line) -> int:
    if not tok.startswith("#"):
        raise ln.error(f"expected immediate, got '{tok}'", tok)
    value = _parse_int(tok[1:])
    if value is None:
        raise ln.error(f"malformed immediate '{tok}'", tok)
    return value


def _reg(tok: str, ln: _Line) -> Reg:
    reg = parse_reg(tok)
    if reg is None:
        raise ln.error(f"malformed register name '{tok}'", tok)
    return reg


def _xreg(tok: str, ln: _Line) -> Reg:
    reg = _reg(tok, ln)
    if reg.is_w:
        raise ln.error(f"expected a 64-bit register, got '{tok}'", tok)
    return reg


def _label(tok: str, ln: _Line) -> Label:
    if not _LABEL_RE.match(tok):
        raise ln.error(f"malformed label '{tok}'", tok)
    return Label(tok)


def _shift(tok: str, ln: _Line) -> int:
    m = re.match(r"^lsl\s+#(\d+)$", tok.strip().lower())
    if not m:
        raise ln.error(f"expected 'lsl #n', got '{tok}'", tok)
    return int(m.group(1))


def _mem(toks: List[str], ln: _Line, allow_index: bool = True, allow_writeback: bool = True) -> Mem:
    """Memory operand from one or two tokens (post-index carries a trailing immediate)."""
    tok = toks[0]
    pre = tok.endswith("!")
    body = tok[:-1] if pre else tok
    if not (body.startswith("[") and body.endswith("]")):
        raise ln.error(f"expected memory operand, got '{tok}'", tok)
    inner = [p.strip() for p in body[1:-1].split(",")]
    base = _xreg(inner[0], ln)
    if base.is_zr:
        raise ln.error("xzr cannot be a base register", inner[0])

    if len(toks) == 2:
        if pre or len(inner) != 1:
            raise ln.error("post-index takes a bare base register", tok)
        if not allow_writeback:
            raise ln.error("this instruction has no writeback addressing", tok)
        return Mem(base, _imm(toks[1], ln), "post")

    if len(inner) == 1:
        if pre:
            raise ln.error("pre-index needs an offset", tok)
        return Mem(base)
    if len(inner) != 2:
        raise ln.error(f"malformed memory operand '{tok}'", tok)
    if inner[1].startswith("#"):
        offset = _imm(inner[1], ln)
        if pre and not allow_writeback:
            raise ln.error("this instruction has no writeback addressing", tok)
        return Mem(base, offset, "pre" if pre else "offset")
    if pre or not allow_index:
        raise ln.error(f"register offset not allowed in '{tok}'", tok)
    return Mem(base, 0, "offset", _xreg(inner[1], ln))


def _sym(tok: str, ln: _Line, pstate: bool) -> Sym:
    if pstate:
        if tok.upper() not in PSTATE_FIELDS_BY_NAME:
            raise ln.error(f"unknown PSTATE field '{tok}'", tok)
        return Sym(canonical_pstate(tok))
    name = canonical_sysreg(tok)
    if sysreg_encoding(name) is None:
        raise ln.error(f"unknown system register '{tok}'", tok)
    return Sym(name)


def canonical_pstate(name: str) -> str:
    op1_op2 = PSTATE_FIELDS_BY_NAME[name.upper()]
    return PSTATE_FIELDS[op1_op2]


def _expect(toks: List[str], n: int, mnemonic: str, ln: _Line) -> None:
    if len(toks) != n:
        raise ln.error(f"'{mnemonic}' takes {n} operand(s), got {len(toks)}", mnemonic)


# ── Per-mnemonic operand parsers ───────────────────────────────────────

def _p_branch(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 1, m, ln)
    return Instr(m, (_label(toks[0], ln),))


def _p_blr(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 1, m, ln)
    return Instr(m, (_xreg(toks[0], ln),))


def _p_br(m: str, toks: List[str], ln: _Line) -> Instr:
    if not toks or len(toks) > 2:
        raise ln.error("'br' takes a register and an optional target set or 'tail'", m)
    reg = _xreg(toks[0], ln)
    if len(toks) == 1:
        return Instr(m, (reg,))
    extra = toks[1]
    if extra.lower() == "tail":
        return Instr(m, (reg,), tail=True)
    if extra.startswith("{") and extra.endswith("}"):
        targets = tuple(t.strip() for t in extra[1:-1].split(",") if t.strip())
        if not targets:
            raise ln.error("switch target set is empty", extra)
        for t in targets:
            _label(t, ln)
        return Instr(m, (reg,), targets=targets)
    raise ln.error(f"expected target set or 'tail', got '{extra}'", extra)


def _p_ret(m: str, toks: List[str], ln: _Line) -> Instr:
    if not toks:
        return Instr(m)
    _expect(toks, 1, m, ln)
    reg = _xreg(toks[0], ln)
    return Instr(m) if reg == Reg("x30") else Instr(m, (reg,))


def _p_bti(m: str, toks: List[str], ln: _Line) -> Instr:
    if not toks:
        return Instr(m)
    _expect(toks, 1, m, ln)
    target = toks[0].lower()
    if target not in _BTI_TARGETS:
        raise ln.error(f"unknown BTI target '{toks[0]}'", toks[0])
    return Instr(m, (Label(target),))


def _p_none(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 0, m, ln)
    return Instr(m)


def _p_and(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 3, m, ln)
    return Instr(m, (_reg(toks[0], ln), _reg(toks[1], ln), Imm(_imm(toks[2], ln))))


def _p_mov(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 2, m, ln)
    dst = _reg(toks[0], ln)
    src: Operand = Imm(_imm(toks[1], ln)) if toks[1].startswith("#") else _reg(toks[1], ln)
    return Instr(m, (dst, src))


def _p_movwide(m: str, toks: List[str], ln: _Line) -> Instr:
    if len(toks) not in (2, 3):
        raise ln.error(f"'{m}' takes a register, an immediate and an optional shift", m)
    shift = _shift(toks[2], ln) if len(toks) == 3 else 0
    return Instr(m, (_reg(toks[0], ln), Imm(_imm(toks[1], ln), shift)))


def _p_addsub(m: str, toks: List[str], ln: _Line) -> Instr:
    if len(toks) not in (3, 4):
        raise ln.error(f"'{m}' takes two registers and a register or immediate", m)
    dst, src = _reg(toks[0], ln), _reg(toks[1], ln)
    if toks[2].startswith("#"):
        shift = _shift(toks[3], ln) if len(toks) == 4 else 0
        return Instr(m, (dst, src, Imm(_imm(toks[2], ln), shift)))
    if len(toks) == 4:
        raise ln.error("shifted register operands are not supported", toks[3])
    return Instr(m, (dst, src, _reg(toks[2], ln)))


def _p_cmp(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 2, m, ln)
    op: Operand = Imm(_imm(toks[1], ln)) if toks[1].startswith("#") else _reg(toks[1], ln)
    return Instr(m, (_reg(toks[0], ln), op))


def _p_mul(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 3, m, ln)
    return Instr(m, tuple(_reg(t, ln) for t in toks))


def _p_adr(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 2, m, ln)
    return Instr(m, (_xreg(toks[0], ln), _label(toks[1], ln)))


_UNSCALED = {"ldur": "ldr", "stur": "str"}


def _p_ldst(m: str, toks: List[str], ln: _Line) -> Instr:
    if len(toks) not in (2, 3):
        raise ln.error(f"'{m}' takes a register and a memory operand", m)
    return Instr(_UNSCALED.get(m, m), (_reg(toks[0], ln), _mem(toks[1:], ln)))


def _p_unpriv(m: str, toks: List[str], ln: _Line) -> Instr:
    if len(toks) not in (2, 3):
        raise ln.error(f"'{m}' takes a register and a memory operand", m)
    return Instr(m, (_reg(toks[0], ln), _mem(toks[1:], ln, allow_index=False, allow_writeback=False)))


def _p_pair(m: str, toks: List[str], ln: _Line) -> Instr:
    if len(toks) not in (3, 4):
        raise ln.error(f"'{m}' takes two registers and a memory operand", m)
    return Instr(m, (_reg(toks[0], ln), _reg(toks[1], ln), _mem(toks[2:], ln, allow_index=False)))


def _p_exc(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 1, m, ln)
    value = _imm(toks[0], ln)
    if not 0 <= value <= 0xFFFF:
        raise ln.error(f"'{m}' immediate out of range", toks[0])
    return Instr(m, (Imm(value),))


def _p_mrs(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 2, m, ln)
    return Instr(m, (_xreg(toks[0], ln), _sym(toks[1], ln, pstate=False)))


def _p_msr(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 2, m, ln)
    if toks[1].startswith("#"):
        return Instr(m, (_sym(toks[0], ln, pstate=True), Imm(_imm(toks[1], ln))))
    return Instr(m, (_sym(toks[0], ln, pstate=False), _xreg(toks[1], ln)))


def _p_word(m: str, toks: List[str], ln: _Line) -> Instr:
    _expect(toks, 1, m, ln)
    value = _parse_int(toks[0].lstrip("#"))
    if value is None or not 0 <= value <= 0xFFFFFFFF:
        raise ln.error(f"'.word' needs a 32-bit value, got '{toks[0]}'", toks[0])
    return Instr(m, (Imm(value),))


_PARSERS: Dict[str, Callable[[str, List[str], _Line], Instr]] = {
    "b": _p_branch,
    "bl": _p_branch,
    "blr": _p_blr,
    "br": _p_br,
    "ret": _p_ret,
    "bti": _p_bti,
    "nop": _p_none,
    "eret": _p_none,
    "and": _p_and,
    "mov": _p_mov,
    "movz": _p_movwide,
    "movk": _p_movwide,
    "add": _p_addsub,
    "sub": _p_addsub,
    "cmp": _p_cmp,
    "mul": _p_mul,
    "adr": _p_adr,
    "ldr": _p_ldst,
    "str": _p_ldst,
    "ldur": _p_ldst,
    "stur": _p_ldst,
    "ldtr": _p_unpriv,
    "sttr": _p_unpriv,
    "ldp": _p_pair,
    "stp": _p_pair,
    "svc": _p_exc,
    "hvc": _p_exc,
    "smc": _p_exc,
    "mrs": _p_mrs,
    "msr": _p_msr,
    ".word": _p_word,
}

MNEMONICS = frozenset(_PARSERS) | {f"b.{c}" for c in CONDITIONS}


def _parse_instr(text: str, ln: _Line) -> Instr:
    parts = text.split(None, 1)
    mnemonic = parts[0].lower()
    toks = _split_operands(parts[1]) if len(parts) > 1 else []

    if mnemonic.startswith("b."):
        cond = mnemonic[2:]
        cond = CONDITION_ALIASES.get(cond, cond)
        if cond not in CONDITIONS:
            raise UnknownMnemonic(f"{ln.source}:{ln.lineno}: unknown condition in '{parts[0]}'")
        return _p_branch(f"b.{cond}", toks, ln)

    parser = _PARSERS.get(mnemonic)
    if parser is None:
        raise UnknownMnemonic(f"{ln.source}:{ln.lineno}: unknown mnemonic '{parts[0]}'")
    return parser(mnemonic, toks, ln)


# ── Program structure ──────────────────────────────────────────────────

class _FunctionBuilder:
    def __init__(self, name: str, address_taken: bool, ln: _Line):
        self.fn = Function(name, [], address_taken)
        self.start = ln
        self.current: Optional[Block] = None
        self.label_lines: Dict[str, int] = {}

    def label(self, name: str, ln: _Line) -> None:
        if self.fn.block(name) is not None:
            raise ln.error(f"duplicate block label '{name}' in function '{self.fn.name}'", name)
        self.label_lines[name] = ln.lineno
        self.current = Block(name, [])
        self.fn.blocks.append(self.current)

    def add(self, instr: Instr, ln: _Line) -> None:
        if self.current is None:
            self.label("entry", ln)
        elif self.current.terminator is not None:
            raise ln.error("instruction after a terminator needs a block label", instr.mnemonic)
        self.current.instrs.append(instr)  # type: ignore[union-attr]


def parse(text: str, source: str = "<input>") -> Program:
    program = Program([], source=source)
    names = set()
    builder: Optional[_FunctionBuilder] = None
    label_lines: List[Tuple[str, str, int]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("//", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        ln = _Line(line, lineno, source)
        tokens = stripped.split()

        if tokens[0] == ".fn":
            if builder is not None:
                raise ln.error(f"'.fn' inside function '{builder.fn.name}' (missing '.endfn')", ".fn")
            if len(tokens) not in (2, 3) or (len(tokens) == 3 and tokens[2] != "address_taken"):
                raise ln.error("expected '.fn <name> [address_taken]'", ".fn")
            name = _label(tokens[1], ln).name
            if name in names:
                raise DuplicateFunction(f"{source}:{lineno}: function '{name}' defined twice")
            names.add(name)
            builder = _FunctionBuilder(name, len(tokens) == 3, ln)
            continue

        if tokens[0] == ".endfn":
            if builder is None:
                raise ln.error("'.endfn' outside a function", ".endfn")
            if not builder.fn.blocks:
                raise ln.error(f"function '{builder.fn.name}' is empty", ".endfn")
            program.functions.append(builder.fn)
            label_lines += [(builder.fn.name, label, at) for label, at in builder.label_lines.items()]
            builder = None
            continue

        if builder is None:
            raise ln.error("instruction outside a function", tokens[0])

        body = stripped
        m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", body)
        if m:
            builder.label(m.group(1), ln)
            body = m.group(2).strip()
            if not body:
                continue
        builder.add(_parse_instr(body, ln), ln)

    if builder is not None:
        raise AsmSyntaxError(f"function '{builder.fn.name}' is missing '.endfn'",
                             builder.start.lineno, 1, source)
    for fn, label, at in label_lines:
        if label in names:
            raise AsmSyntaxError(f"block label '{label}' in function '{fn}' reuses a function name", at, 1, source)
    logger.debug("parsed %d function(s) from %s", len(program.functions), source)
    return program


def print_program(p: Program) -> str:
    chunks = []
    for f in p.functions:
        lines = [f".fn {f.name}" + (" address_taken" if f.address_taken else "")]
        for b in f.blocks:
            lines.append(f"{b.label}:")
            lines.extend(f"    {i}" for i in b.instrs)
        lines.append(".endfn")
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def parse_file(path: Path) -> Program:
    path = Path(path)
    return parse(path.read_text(), source=str(path))


def split_targets(instr: Instr) -> Tuple[str, ...]:
    """Labels an instruction may transfer control to within its function."""
    if instr.is_switch:
        return instr.targets
    if instr.mnemonic == "b" or instr.mnemonic.startswith("b."):
        label = instr.label()
        return (label,) if label else ()
    return ()
