"""Line-oriented layout files.

::

    # comment
    mode hpds
    state elevated el=EL1t pan=1 uao=0 hpd0=0 hpd1=1 e0pd0=0 e0pd1=0
    shadow-span base=0x10001000 size=0x10000 guard=0x1000
    region kcode KernelCode upper ap1=1 ap2=1 uxn=1 pxn=0 tables=[aptable0,aptable0] base=0xffff000000080000 size=0x10000 tag=1

Required region keys: ``ap1 ap2 uxn pxn tables``. Table levels are
comma-separated, flags inside one level joined with ``+``; an attribute-free
level is written ``-``. Optional keys: ``base size valid tag task immutable``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from security.perm_model import CpuSecState, ExceptionLevel, Half, LeafAttrs, TableAttrs, WalkPath
from security.policy import MalformedLayout, MemoryLayout, Mode, Region, Role, TaskKind

logger = logging.getLogger(__name__)

_REQUIRED = ("ap1", "ap2", "uxn", "pxn", "tables")
_OPTIONAL = ("base", "size", "valid", "tag", "task", "immutable")
_STATE_KEYS = ("el", "pan", "uao", "hpd0", "hpd1", "e0pd0", "e0pd1")
_TABLE_FLAGS = ("aptable0", "aptable1", "uxntable", "pxntable")


@dataclass
class LayoutFile:
    layout: MemoryLayout
    mode: Optional[Mode] = None
    states: Dict[TaskKind, CpuSecState] = field(default_factory=dict)


# ── Formatting ─────────────────────────────────────────────────────────

def _b(flag: bool) -> str:
    return "1" if flag else "0"


def _format_tables(tables: Tuple[TableAttrs, ...]) -> str:
    levels = ["+".join(t.flags()) or "-" for t in tables]
    return "[" + ",".join(levels) + "]"


def format_region(r: Region) -> str:
    leaf = r.path.leaf
    parts = [
        "region", r.name, r.role.value, r.half.value.lower(),
        f"ap1={_b(leaf.ap1)}", f"ap2={_b(leaf.ap2)}", f"uxn={_b(leaf.uxn)}", f"pxn={_b(leaf.pxn)}",
        f"tables={_format_tables(r.path.tables)}",
        f"base={r.base:#x}", f"size={r.size:#x}",
        f"valid={_b(leaf.valid)}", f"tag={_b(leaf.kernel_tag)}",
    ]
    if r.task is not None:
        parts.append(f"task={r.task.value}")
    if r.immutable:
        parts.append("immutable=1")
    return " ".join(parts)


def format_state(kind: TaskKind, state: CpuSecState) -> str:
    return (
        f"state {kind.value} el={state.el.value} pan={_b(state.pan)} uao={_b(state.uao)} "
        f"hpd0={_b(state.hpd0)} hpd1={_b(state.hpd1)} e0pd0={_b(state.e0pd0)} e0pd1={_b(state.e0pd1)}"
    )


def format_layout(
    layout: MemoryLayout,
    mode: Optional[Mode] = None,
    states: Optional[Dict[TaskKind, CpuSecState]] = None,
) -> str:
    lines: List[str] = []
    if mode is not None:
        lines.append(f"mode {mode.value}")
    for kind, state in (states or {}).items():
        lines.append(format_state(kind, state))
    if layout.shadow_stack_span is not None:
        base, size, guard = layout.shadow_stack_span
        lines.append(f"shadow-span base={base:#x} size={size:#x} guard={guard:#x}")
    lines.extend(format_region(r) for r in layout)
    return "\n".join(lines) + "\n"


# ── Parsing ────────────────────────────────────────────────────────────

def _where(source: str, lineno: int) -> str:
    return f"{source}:{lineno}"


def _bool(value: str, key: str, where: str) -> bool:
    if value not in ("0", "1"):
        raise MalformedLayout(f"{where}: {key} must be 0 or 1, got '{value}'")
    return value == "1"


def _int(value: str, key: str, where: str) -> int:
    try:
        return int(value, 0)
    except ValueError:
        raise MalformedLayout(f"{where}: {key} must be an integer, got '{value}'") from None


def _keyvals(tokens: List[str], where: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise MalformedLayout(f"{where}: expected key=value, got '{tok}'")
        key, value = tok.split("=", 1)
        out[key.lower()] = value
    return out


def _parse_tables(value: str, where: str) -> Tuple[TableAttrs, ...]:
    if not (value.startswith("[") and value.endswith("]")):
        raise MalformedLayout(f"{where}: tables must be written [..], got '{value}'")
    body = value[1:-1].strip()
    if not body:
        return ()
    levels = []
    for level in body.split(","):
        level = level.strip()
        flags = set() if level == "-" else {f.strip().lower() for f in level.split("+")}
        unknown = flags - set(_TABLE_FLAGS)
        if unknown:
            raise MalformedLayout(f"{where}: unknown table attribute(s) {sorted(unknown)}")
        levels.append(TableAttrs(**{f: True for f in flags}))
    return tuple(levels)


def _enum(enum_cls, value: str, where: str, what: str):
    for member in enum_cls:
        if member.value.lower() == value.lower() or member.name.lower() == value.lower():
            return member
    raise MalformedLayout(f"{where}: unknown {what} '{value}'")


def _parse_region(tokens: List[str], where: str) -> Region:
    if len(tokens) < 4:
        raise MalformedLayout(f"{where}: region needs a name, role and half")
    name, role_s, half_s = tokens[1], tokens[2], tokens[3]
    kv = _keyvals(tokens[4:], where)
    missing = [k for k in _REQUIRED if k not in kv]
    if missing:
        raise MalformedLayout(f"{where}: region '{name}' lacks attributes: {', '.join(missing)}")
    unknown = set(kv) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise MalformedLayout(f"{where}: unknown region key(s) {sorted(unknown)}")

    leaf = LeafAttrs(
        ap1=_bool(kv["ap1"], "ap1", where),
        ap2=_bool(kv["ap2"], "ap2", where),
        uxn=_bool(kv["uxn"], "uxn", where),
        pxn=_bool(kv["pxn"], "pxn", where),
        kernel_tag=_bool(kv.get("tag", "0"), "tag", where),
        valid=_bool(kv.get("valid", "1"), "valid", where),
    )
    return Region(
        name=name,
        role=_enum(Role, role_s, where, "role"),
        half=_enum(Half, half_s, where, "half"),
        path=WalkPath(_parse_tables(kv["tables"], where), leaf),
        base=_int(kv.get("base", "0"), "base", where),
        size=_int(kv.get("size", "0"), "size", where),
        task=_enum(TaskKind, kv["task"], where, "task") if "task" in kv else None,
        immutable=_bool(kv.get("immutable", "0"), "immutable", where),
    )


def _parse_state(tokens: List[str], where: str) -> Tuple[TaskKind, CpuSecState]:
    if len(tokens) < 2:
        raise MalformedLayout(f"{where}: state needs a task kind")
    kind = _enum(TaskKind, tokens[1], where, "task")
    kv = _keyvals(tokens[2:], where)
    unknown = set(kv) - set(_STATE_KEYS)
    if unknown:
        raise MalformedLayout(f"{where}: unknown state key(s) {sorted(unknown)}")
    state = CpuSecState(
        el=_enum(ExceptionLevel, kv.get("el", "EL0"), where, "exception level"),
        **{k: _bool(kv.get(k, "0"), k, where) for k in _STATE_KEYS if k != "el"},
    )
    return kind, state


def parse_layout(text: str, source: str = "<layout>") -> LayoutFile:
    regions: List[Region] = []
    mode: Optional[Mode] = None
    states: Dict[TaskKind, CpuSecState] = {}
    span: Optional[Tuple[int, int, int]] = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = _where(source, lineno)
        tokens = line.split()
        head = tokens[0].lower()
        if head == "region":
            regions.append(_parse_region(tokens, where))
        elif head == "mode":
            if len(tokens) != 2:
                raise MalformedLayout(f"{where}: expected 'mode <hpds|e0pd>'")
            mode = _enum(Mode, tokens[1], where, "mode")
        elif head == "state":
            kind, state = _parse_state(tokens, where)
            states[kind] = state
        elif head == "shadow-span":
            kv = _keyvals(tokens[1:], where)
            try:
                span = (_int(kv["base"], "base", where), _int(kv["size"], "size", where),
                        _int(kv["guard"], "guard", where))
            except KeyError as exc:
                raise MalformedLayout(f"{where}: shadow-span lacks {exc.args[0]}") from None
        else:
            raise MalformedLayout(f"{where}: unknown line kind '{tokens[0]}'")

    if not regions:
        raise MalformedLayout(f"{source}: no regions")
    logger.debug("parsed %d regions from %s", len(regions), source)
    return LayoutFile(MemoryLayout(tuple(regions), shadow_stack_span=span), mode, states)


def load_layout(path: Path) -> LayoutFile:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Layout file not found: {path}")
    return parse_layout(path.read_text(), source=str(path))
