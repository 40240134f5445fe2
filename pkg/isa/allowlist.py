"""Operand allowlist: system registers and cache ops usable from EL0.

File format, one entry per line, ``#`` starts a comment::

    sysreg TPIDR_EL0          # read and write
    sysreg CTR_EL0 read
    cacheop DC_ZVA

Names are matched case-insensitively. System registers may also be written
in generic form (``S3_3_C13_C0_2``); they are canonicalised to the table name
when one exists so both spellings refer to the same register.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from config import (
    CACHE_OPS_BY_NAME,
    DEFAULT_ALLOWLIST_PATH,
    PSTATE_FIELDS_BY_NAME,
    SYSREGS,
    SYSREGS_UPPER,
)

logger = logging.getLogger(__name__)

_GENERIC_SYSREG = re.compile(r"^S([0-3])_([0-7])_C(\d{1,2})_C(\d{1,2})_([0-7])$", re.IGNORECASE)
_DIRECTIONS = {"read": (True, False), "write": (False, True), "rw": (True, True)}

Encoding = Tuple[int, int, int, int, int]


class AllowlistError(ValueError):
    pass


def canonical_sysreg(name: str) -> str:
    """Table spelling for a register name, or the upper-cased input."""
    upper = name.strip().upper()
    if upper in SYSREGS_UPPER:
        return SYSREGS_UPPER[upper]
    m = _GENERIC_SYSREG.match(upper)
    if m:
        enc = tuple(int(g) for g in m.groups())
        for known, known_enc in SYSREGS.items():
            if known_enc == enc:
                return known
        op0, op1, crn, crm, op2 = enc
        return f"S{op0}_{op1}_C{crn}_C{crm}_{op2}"
    return upper


def sysreg_encoding(name: str) -> Optional[Encoding]:
    canon = canonical_sysreg(name)
    if canon in SYSREGS:
        return SYSREGS[canon]
    m = _GENERIC_SYSREG.match(canon)
    if m:
        return tuple(int(g) for g in m.groups())  # type: ignore[return-value]
    return None


@dataclass(frozen=True)
class Allowlist:
    sysregs: Dict[str, Tuple[bool, bool]] = field(default_factory=dict)
    cacheops: frozenset = frozenset()

    def allows_sysreg(self, name: str, write: bool) -> bool:
        perms = self.sysregs.get(canonical_sysreg(name).upper())
        if perms is None:
            return False
        return perms[1] if write else perms[0]

    def allows_cacheop(self, name: str) -> bool:
        return name.strip().upper() in self.cacheops

    def sysreg_encodings(self) -> Dict[Encoding, Tuple[bool, bool]]:
        out: Dict[Encoding, Tuple[bool, bool]] = {}
        for name, perms in self.sysregs.items():
            enc = sysreg_encoding(name)
            if enc is not None and enc[0] >= 2:
                out[enc] = perms
        return out


EMPTY_ALLOWLIST = Allowlist()


def parse_allowlist(lines: Iterable[str], source: str = "<allowlist>") -> Allowlist:
    sysregs: Dict[str, Tuple[bool, bool]] = {}
    cacheops = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        if kind == "sysreg":
            if len(parts) not in (2, 3):
                raise AllowlistError(f"{source}:{lineno}: expected 'sysreg <NAME> [read|write|rw]'")
            direction = parts[2].lower() if len(parts) == 3 else "rw"
            if direction not in _DIRECTIONS:
                raise AllowlistError(f"{source}:{lineno}: unknown direction '{parts[2]}'")
            name = canonical_sysreg(parts[1])
            if sysreg_encoding(name) is None and name not in PSTATE_FIELDS_BY_NAME:
                logger.warning("%s:%d: '%s' is not a known system register or PSTATE field", source, lineno, parts[1])
            prev_r, prev_w = sysregs.get(name.upper(), (False, False))
            read, write = _DIRECTIONS[direction]
            sysregs[name.upper()] = (prev_r or read, prev_w or write)
        elif kind == "cacheop":
            if len(parts) != 2:
                raise AllowlistError(f"{source}:{lineno}: expected 'cacheop <NAME>'")
            name = parts[1].upper()
            if name not in CACHE_OPS_BY_NAME:
                logger.warning("%s:%d: '%s' is not a known cache operation", source, lineno, parts[1])
            cacheops.add(name)
        else:
            raise AllowlistError(f"{source}:{lineno}: unknown entry kind '{parts[0]}'")
    return Allowlist(sysregs=sysregs, cacheops=frozenset(cacheops))


def load_allowlist(path: Optional[Path] = None) -> Allowlist:
    path = Path(path) if path else DEFAULT_ALLOWLIST_PATH
    if not path.exists():
        raise FileNotFoundError(f"Allowlist file not found: {path}")
    return parse_allowlist(path.read_text().splitlines(), source=str(path))
