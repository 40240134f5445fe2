"""Executable model of AArch64 access-permission checking.

Covers the bits Privilege Inversion relies on: leaf AP/UXN/PXN, hierarchical
table attributes, PAN, UAO, HPD and E0PD. Everything here is a pure function
over frozen values.

Decision order in ``check_access``:

1. unprivileged request and E0PD set for the half -> ``E0pdFault``
2. invalid descriptor -> ``TranslationFault``
3. merge table attributes into the leaf unless HPD is set for the half
4. instruction fetch: UXN (unprivileged) / PXN (privileged)
5. data access: unprivileged check (also LSU with UAO clear), else PAN,
   else plain write permission
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, Optional, Tuple


class ExceptionLevel(Enum):
    EL0 = "EL0"
    EL1t = "EL1t"
    EL1h = "EL1h"


class AccessKind(Enum):
    Read = "Read"
    Write = "Write"
    InstrFetch = "InstrFetch"


class Via(Enum):
    Regular = "Regular"
    Lsu = "Lsu"


class Half(Enum):
    Lower = "Lower"
    Upper = "Upper"


class FaultReason(Enum):
    E0pdFault = "E0pdFault"
    PanFault = "PanFault"
    UnprivDataFault = "UnprivDataFault"
    WriteFault = "WriteFault"
    UxnFault = "UxnFault"
    PxnFault = "PxnFault"
    HierTableFault = "HierTableFault"
    TranslationFault = "TranslationFault"
    # raised by the simulator, never by check_access
    UndefinedInstruction = "UndefinedInstruction"


@dataclass(frozen=True)
class LeafAttrs:
    ap1: bool = False
    ap2: bool = False
    uxn: bool = True
    pxn: bool = True
    kernel_tag: bool = False
    valid: bool = True


@dataclass(frozen=True)
class TableAttrs:
    aptable0: bool = False
    aptable1: bool = False
    uxntable: bool = False
    pxntable: bool = False

    def flags(self) -> Tuple[str, ...]:
        return tuple(
            name for name in ("aptable0", "aptable1", "uxntable", "pxntable") if getattr(self, name)
        )


@dataclass(frozen=True)
class WalkPath:
    tables: Tuple[TableAttrs, ...] = ()
    leaf: LeafAttrs = field(default_factory=LeafAttrs)


@dataclass(frozen=True)
class CpuSecState:
    el: ExceptionLevel = ExceptionLevel.EL0
    pan: bool = False
    uao: bool = False
    hpd0: bool = False
    hpd1: bool = False
    e0pd0: bool = False
    e0pd1: bool = False

    def hpd_for(self, half: Half) -> bool:
        return self.hpd1 if half == Half.Upper else self.hpd0

    def e0pd_for(self, half: Half) -> bool:
        return self.e0pd1 if half == Half.Upper else self.e0pd0


@dataclass(frozen=True)
class AccessRequest:
    kind: AccessKind
    privileged: bool
    via: Via = Via.Regular
    half: Half = Half.Lower

    def __post_init__(self) -> None:
        if self.kind == AccessKind.InstrFetch and self.via == Via.Lsu:
            raise ValueError("instruction fetches cannot use LSU addressing")


@dataclass(frozen=True)
class Verdict:
    allow: bool
    fault_reason: Optional[FaultReason] = None

    def __post_init__(self) -> None:
        if self.allow == (self.fault_reason is not None):
            raise ValueError("a verdict either allows or carries a fault reason")

    def __str__(self) -> str:
        return "allow" if self.allow else self.fault_reason.value


ALLOW = Verdict(True)


def _fault(reason: FaultReason) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class EffectiveAttrs:
    ap1: bool
    ap2: bool
    uxn: bool
    pxn: bool
    forced: FrozenSet[str] = frozenset()  # attributes restricted by a table level


def effective_attrs(path: WalkPath, hpd_enabled: bool) -> EffectiveAttrs:
    leaf = path.leaf
    if hpd_enabled or not path.tables:
        return EffectiveAttrs(leaf.ap1, leaf.ap2, leaf.uxn, leaf.pxn)

    aptable0 = any(t.aptable0 for t in path.tables)
    aptable1 = any(t.aptable1 for t in path.tables)
    uxntable = any(t.uxntable for t in path.tables)
    pxntable = any(t.pxntable for t in path.tables)

    forced = set()
    if aptable0 and leaf.ap1:
        forced.add("ap1")
    if aptable1 and not leaf.ap2:
        forced.add("ap2")
    if uxntable and not leaf.uxn:
        forced.add("uxn")
    if pxntable and not leaf.pxn:
        forced.add("pxn")

    return EffectiveAttrs(
        ap1=leaf.ap1 and not aptable0,
        ap2=leaf.ap2 or aptable1,
        uxn=leaf.uxn or uxntable,
        pxn=leaf.pxn or pxntable,
        forced=frozenset(forced),
    )


def is_privileged(state: CpuSecState, req: AccessRequest) -> bool:
    return req.privileged and state.el != ExceptionLevel.EL0


def check_access(state: CpuSecState, path: WalkPath, req: AccessRequest) -> Verdict:
    privileged = is_privileged(state, req)

    if not privileged and state.e0pd_for(req.half):
        return _fault(FaultReason.E0pdFault)

    if not path.leaf.valid:
        return _fault(FaultReason.TranslationFault)

    eff = effective_attrs(path, state.hpd_for(req.half))

    if req.kind == AccessKind.InstrFetch:
        if not privileged and eff.uxn:
            return _fault(FaultReason.HierTableFault if "uxn" in eff.forced else FaultReason.UxnFault)
        if privileged and eff.pxn:
            return _fault(FaultReason.HierTableFault if "pxn" in eff.forced else FaultReason.PxnFault)
        return ALLOW

    write = req.kind == AccessKind.Write
    check_unprivileged = not privileged or (req.via == Via.Lsu and not state.uao)

    if check_unprivileged:
        # APTable[0] restrictions surface as ordinary unprivileged faults
        if not eff.ap1:
            return _fault(FaultReason.UnprivDataFault)
    elif state.pan and req.via == Via.Regular and eff.ap1:
        return _fault(FaultReason.PanFault)

    if write and eff.ap2:
        return _fault(FaultReason.HierTableFault if "ap2" in eff.forced else FaultReason.WriteFault)
    return ALLOW
