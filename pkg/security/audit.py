"""Exhaustive isolation audit over a layout.

Every (task, region, access kind, via) cell is run through ``check_access``
and classified. A report with no findings means neither task kind can reach
kernel memory and elevated tasks cannot touch their shadow stacks with
regular loads/stores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from security.perm_model import (
    AccessKind,
    AccessRequest,
    CpuSecState,
    Verdict,
    Via,
    check_access,
)
from security.policy import MalformedLayout, MemoryLayout, Mode, Region, Role, TaskKind, task_state

logger = logging.getLogger(__name__)

# (kind, via) pairs a task can issue; fetches never use LSU addressing
ACCESS_MATRIX = (
    (AccessKind.Read, Via.Regular),
    (AccessKind.Write, Via.Regular),
    (AccessKind.Read, Via.Lsu),
    (AccessKind.Write, Via.Lsu),
    (AccessKind.InstrFetch, Via.Regular),
)


@dataclass(frozen=True)
class AuditCell:
    task: TaskKind
    region: str
    role: Role
    kind: AccessKind
    via: Via
    verdict: Verdict
    classification: str  # ok | denied | vetted-lsu | masked-fetch | finding
    reason: str = ""


@dataclass
class AuditReport:
    mode: Mode
    cells: List[AuditCell] = field(default_factory=list)

    @property
    def findings(self) -> List[AuditCell]:
        return [c for c in self.cells if c.classification == "finding"]

    @property
    def ok(self) -> bool:
        return not self.findings

    def format_matrix(self) -> str:
        header = f"{'TASK':<9} {'REGION':<20} {'ROLE':<12} {'ACCESS':<10} {'VIA':<8} {'VERDICT':<16} CLASS"
        lines = [header]
        for c in self.cells:
            lines.append(
                f"{c.task.value:<9} {c.region:<20} {c.role.value:<12} {c.kind.value:<10} "
                f"{c.via.value:<8} {str(c.verdict):<16} {c.classification}"
            )
        return "\n".join(lines) + "\n"

    def format_findings(self) -> str:
        return "".join(
            f"FINDING {c.task.value} {c.region} {c.kind.value}/{c.via.value}: {c.reason}\n"
            for c in self.findings
        )


def _classify(task: TaskKind, region: Region, kind: AccessKind, via: Via, verdict: Verdict):
    """Return (classification, reason) for one cell."""
    role = region.role
    data = kind != AccessKind.InstrFetch

    if role == Role.Guard:
        if verdict.allow:
            return "finding", "guard region is accessible"
        return "denied", ""

    if role.is_kernel:
        if task == TaskKind.Legacy:
            if verdict.allow:
                return "finding", "legacy task reaches kernel memory"
            return "denied", ""
        if not verdict.allow:
            return "denied", ""
        if data and via == Via.Regular:
            return "finding", "elevated task reaches kernel memory with a regular access"
        if data:
            return "vetted-lsu", ""
        return "masked-fetch", ""

    if role == Role.ShadowStack and task == TaskKind.Elevated:
        if data and via == Via.Regular and verdict.allow:
            return "finding", "regular access reaches the shadow stack"
        if data and via == Via.Lsu and not verdict.allow:
            return "finding", "vetted LSU access cannot reach the shadow stack"
        if not data and verdict.allow:
            return "finding", "shadow stack is executable"
        return ("ok" if verdict.allow else "denied"), ""

    return ("ok" if verdict.allow else "denied"), ""


def audit_isolation(
    layout: MemoryLayout,
    mode: Mode,
    elevated_state: Optional[CpuSecState] = None,
    legacy_state: Optional[CpuSecState] = None,
) -> AuditReport:
    kernel = layout.by_role(Role.KernelCode, Role.KernelData)
    if not kernel:
        raise MalformedLayout("layout has no kernel regions")
    for r in layout:
        if r.path is None:
            raise MalformedLayout(f"region '{r.name}' lacks attributes")

    states: Dict[TaskKind, CpuSecState] = {
        TaskKind.Elevated: elevated_state or task_state(TaskKind.Elevated, mode),
        TaskKind.Legacy: legacy_state or task_state(TaskKind.Legacy, mode),
    }
    report = AuditReport(mode)
    for task in layout.task_kinds():
        state = states[task]
        privileged = task == TaskKind.Elevated
        targets = [r for r in layout if r.task == task] + kernel
        for region in targets:
            for kind, via in ACCESS_MATRIX:
                req = AccessRequest(kind, privileged, via, region.half)
                verdict = check_access(state, region.path, req)
                classification, reason = _classify(task, region, kind, via, verdict)
                report.cells.append(
                    AuditCell(task, region.name, region.role, kind, via, verdict, classification, reason)
                )

    for c in report.findings:
        logger.warning("isolation finding: %s %s %s/%s: %s",
                       c.task.value, c.region, c.kind.value, c.via.value, c.reason)
    return report
