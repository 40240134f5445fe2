"""Privilege Inversion layouts and task configurations.

Builds the memory views the auditor and the simulator work on:

- elevated tasks: privileged thread mode, PAN on, UAO off, own pages
  privileged-only, kernel pages unprivileged-accessible, shadow stacks in the
  LSU domain between two guard pages
- legacy tasks: EL0, kernel hidden through APTable[0] (HPDS mode) or E0PD
- the kernel view shared by both
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from config import DEFAULT_LAYOUT, LOWER_HALF_LIMIT, PAGE_SIZE
from security import LayoutError
from security.perm_model import (
    CpuSecState,
    ExceptionLevel,
    Half,
    LeafAttrs,
    TableAttrs,
    WalkPath,
)

logger = logging.getLogger(__name__)

INVERSOS_ENV = "INVERSOS"


class MalformedLayout(LayoutError):
    pass


class BadParams(LayoutError):
    pass


class HugePageConflict(LayoutError):
    pass


class AddressExhausted(LayoutError):
    pass


class ImmutableMapping(LayoutError):
    pass


class TaskKind(Enum):
    Legacy = "legacy"
    Elevated = "elevated"


class Mode(Enum):
    Hpds = "hpds"
    E0pd = "e0pd"


class Role(Enum):
    TaskCode = "TaskCode"
    TaskData = "TaskData"
    ShadowStack = "ShadowStack"
    Guard = "Guard"
    KernelCode = "KernelCode"
    KernelData = "KernelData"

    @property
    def is_kernel(self) -> bool:
        return self in (Role.KernelCode, Role.KernelData)


@dataclass(frozen=True)
class Region:
    name: str
    role: Role
    half: Half
    path: WalkPath
    base: int = 0
    size: int = 0
    task: Optional[TaskKind] = None
    immutable: bool = False

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass(frozen=True)
class MemoryLayout:
    regions: Tuple[Region, ...]
    # (base, size, guard_size) of the first thread's shadow stack
    shadow_stack_span: Optional[Tuple[int, int, int]] = None
    lower_limit: int = LOWER_HALF_LIMIT

    def __post_init__(self) -> None:
        seen = set()
        for r in self.regions:
            if r.name in seen:
                raise MalformedLayout(f"duplicate region name '{r.name}'")
            seen.add(r.name)

    def __iter__(self) -> Iterator[Region]:
        return iter(self.regions)

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise MalformedLayout(f"no region named '{name}'")

    def by_role(self, *roles: Role) -> List[Region]:
        return [r for r in self.regions if r.role in roles]

    def task_kinds(self) -> List[TaskKind]:
        kinds = []
        for r in self.regions:
            if r.task is not None and r.task not in kinds:
                kinds.append(r.task)
        return kinds


@dataclass(frozen=True)
class LayoutParams:
    code_base: int = DEFAULT_LAYOUT["code_base"]
    code_size: int = DEFAULT_LAYOUT["code_size"]
    data_base: int = DEFAULT_LAYOUT["data_base"]
    data_size: int = DEFAULT_LAYOUT["data_size"]
    stack_base: int = DEFAULT_LAYOUT["stack_base"]
    stack_size: int = DEFAULT_LAYOUT["stack_size"]
    shadow_base: int = DEFAULT_LAYOUT["shadow_base"]
    shadow_size: int = DEFAULT_LAYOUT["shadow_size"]
    guard_size: int = DEFAULT_LAYOUT["guard_size"]
    kernel_code_base: int = DEFAULT_LAYOUT["kernel_code_base"]
    kernel_code_size: int = DEFAULT_LAYOUT["kernel_code_size"]
    kernel_data_base: int = DEFAULT_LAYOUT["kernel_data_base"]
    kernel_data_size: int = DEFAULT_LAYOUT["kernel_data_size"]
    kernel_table_levels: int = DEFAULT_LAYOUT["kernel_table_levels"]
    lower_limit: int = LOWER_HALF_LIMIT
    kernel_huge_pages: bool = False

    def validate(self) -> None:
        if self.shadow_size <= 0:
            raise BadParams("shadow stack size must be positive")
        if self.guard_size <= 0:
            raise BadParams("guard size must be positive")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_size") and value % PAGE_SIZE:
                raise BadParams(f"{f.name}={value:#x} is not page aligned")
            if f.name.endswith("_size") and value < 0:
                raise BadParams(f"{f.name} must not be negative")
        if self.kernel_table_levels < 0:
            raise BadParams("kernel_table_levels must not be negative")
        if self.shadow_base + self.shadow_size + 2 * self.guard_size > self.lower_limit:
            raise AddressExhausted("shadow stack span does not fit below lower_limit")


@dataclass(frozen=True)
class LaunchRequest:
    env: Mapping[str, str] = field(default_factory=dict)
    binary_pages: Sequence[bytes] = ()


# ── Task views ─────────────────────────────────────────────────────────

def _kernel_regions(params: LayoutParams, mode: Mode) -> List[Region]:
    if params.kernel_huge_pages:
        tables: Tuple[TableAttrs, ...] = ()
    elif mode == Mode.Hpds:
        tables = tuple(TableAttrs(aptable0=True) for _ in range(params.kernel_table_levels))
    else:
        tables = tuple(TableAttrs() for _ in range(params.kernel_table_levels))

    kcode = LeafAttrs(ap1=True, ap2=True, uxn=True, pxn=False, kernel_tag=True)
    kdata = LeafAttrs(ap1=True, ap2=False, uxn=True, pxn=True, kernel_tag=True)
    return [
        Region("kcode", Role.KernelCode, Half.Upper, WalkPath(tables, kcode),
               params.kernel_code_base, params.kernel_code_size),
        Region("kdata", Role.KernelData, Half.Upper, WalkPath(tables, kdata),
               params.kernel_data_base, params.kernel_data_size),
    ]


def _guard(name: str, base: int, size: int, task: TaskKind) -> Region:
    leaf = LeafAttrs(ap1=False, ap2=True, uxn=True, pxn=True, valid=False)
    return Region(name, Role.Guard, Half.Lower, WalkPath((), leaf), base, size, task, immutable=True)


def _shadow_stack_regions(
    thread_id: int, base: int, size: int, guard_size: int, task: TaskKind
) -> List[Region]:
    ss_leaf = LeafAttrs(ap1=True, ap2=False, uxn=True, pxn=True)
    return [
        _guard(f"guard_lo_{thread_id}", base, guard_size, task),
        Region(f"ss_{thread_id}", Role.ShadowStack, Half.Lower, WalkPath((), ss_leaf),
               base + guard_size, size, task, immutable=True),
        _guard(f"guard_hi_{thread_id}", base + guard_size + size, guard_size, task),
    ]


def task_state(kind: TaskKind, mode: Mode = Mode.Hpds) -> CpuSecState:
    if kind == TaskKind.Elevated:
        return CpuSecState(el=ExceptionLevel.EL1t, pan=True, uao=False, hpd1=mode == Mode.Hpds)
    return CpuSecState(el=ExceptionLevel.EL0, hpd1=False, e0pd1=mode == Mode.E0pd)


def configure_elevated(
    params: Optional[LayoutParams] = None, mode: Mode = Mode.Hpds
) -> Tuple[MemoryLayout, CpuSecState]:
    """Elevated task view: own pages privileged-only, shadow stack in the LSU domain."""
    params = params or LayoutParams()
    params.validate()
    task = TaskKind.Elevated

    code = LeafAttrs(ap1=False, ap2=True, uxn=True, pxn=False)
    data = LeafAttrs(ap1=False, ap2=False, uxn=True, pxn=True)
    regions = [
        Region("code", Role.TaskCode, Half.Lower, WalkPath((), code), params.code_base, params.code_size, task),
        Region("data", Role.TaskData, Half.Lower, WalkPath((), data), params.data_base, params.data_size, task),
        Region("stack", Role.TaskData, Half.Lower, WalkPath((), data), params.stack_base, params.stack_size, task),
    ]
    regions += _shadow_stack_regions(0, params.shadow_base, params.shadow_size, params.guard_size, task)
    regions += _kernel_regions(params, mode)

    layout = MemoryLayout(
        tuple(regions),
        shadow_stack_span=(params.shadow_base + params.guard_size, params.shadow_size, params.guard_size),
        lower_limit=params.lower_limit,
    )
    logger.debug("configured elevated layout with %d regions (%s)", len(regions), mode.value)
    return layout, task_state(task, mode)


def configure_legacy(
    params: Optional[LayoutParams] = None, mode: Mode = Mode.Hpds
) -> Tuple[MemoryLayout, CpuSecState]:
    """Legacy task view at EL0; kernel hidden by APTable[0] (HPDS) or E0PD."""
    params = params or LayoutParams()
    params.validate()
    task = TaskKind.Legacy

    kernel = _kernel_regions(params, mode)
    if mode == Mode.Hpds:
        for r in kernel:
            if not r.path.tables:
                raise HugePageConflict(
                    f"kernel region '{r.name}' has no table levels to carry APTable[0]"
                )

    code = LeafAttrs(ap1=True, ap2=True, uxn=False, pxn=True)
    data = LeafAttrs(ap1=True, ap2=False, uxn=True, pxn=True)
    regions = [
        Region("code", Role.TaskCode, Half.Lower, WalkPath((), code), params.code_base, params.code_size, task),
        Region("data", Role.TaskData, Half.Lower, WalkPath((), data), params.data_base, params.data_size, task),
        Region("stack", Role.TaskData, Half.Lower, WalkPath((), data), params.stack_base, params.stack_size, task),
    ] + kernel
    return MemoryLayout(tuple(regions), lower_limit=params.lower_limit), task_state(task, mode)


def build_system_layout(mode: Mode = Mode.Hpds, params: Optional[LayoutParams] = None) -> MemoryLayout:
    """Both task views over one kernel, task regions prefixed with their kind."""
    elevated, _ = configure_elevated(params, mode)
    legacy, _ = configure_legacy(params, mode)
    regions: List[Region] = []
    for layout in (elevated, legacy):
        for r in layout:
            if r.task is not None:
                regions.append(replace(r, name=f"{r.task.value}.{r.name}"))
    regions += [r for r in elevated if r.role.is_kernel]
    return MemoryLayout(
        tuple(regions), shadow_stack_span=elevated.shadow_stack_span, lower_limit=elevated.lower_limit
    )


def decide_task_kind(req: LaunchRequest) -> TaskKind:
    return TaskKind.Elevated if req.env.get(INVERSOS_ENV) == "1" else TaskKind.Legacy


# ── Shadow-stack allocation and mapping requests ───────────────────────

def allocate_shadow_stack(layout: MemoryLayout, thread_id: int, scheme: str = "compact") -> MemoryLayout:
    """Add a shadow stack plus its two guards for a new thread."""
    if layout.shadow_stack_span is None:
        raise MalformedLayout("layout has no shadow-stack span (not an elevated view?)")
    _, ss_size, guard_size = layout.shadow_stack_span
    if scheme == "parallel":
        stacks = [r for r in layout.by_role(Role.TaskData) if r.name.endswith("stack")]
        if not stacks:
            raise MalformedLayout("parallel scheme needs a regular stack region")
        ss_size = stacks[0].size
    elif scheme != "compact":
        raise BadParams(f"unknown shadow-stack scheme '{scheme}'")
    if ss_size <= 0:
        raise BadParams("shadow stack size must be positive")

    names = {r.name for r in layout}
    if f"ss_{thread_id}" in names:
        raise BadParams(f"thread {thread_id} already has a shadow stack")

    task = next((r.task for r in layout.by_role(Role.ShadowStack)), TaskKind.Elevated)
    occupied = layout.by_role(Role.ShadowStack, Role.Guard)
    base = max(r.end for r in occupied) if occupied else layout.shadow_stack_span[0] - guard_size
    end = base + ss_size + 2 * guard_size

    limit = layout.lower_limit
    if end > limit:
        raise AddressExhausted(f"no room for thread {thread_id}'s shadow stack below {limit:#x}")
    for r in layout:
        if r.half == Half.Lower and r.base < end and base < r.end:
            raise AddressExhausted(
                f"thread {thread_id}'s shadow stack would overlap region '{r.name}'"
            )

    added = _shadow_stack_regions(thread_id, base, ss_size, guard_size, task)
    logger.debug("allocated shadow stack for thread %d at %#x (%s)", thread_id, base + guard_size, scheme)
    return replace(layout, regions=layout.regions + tuple(added))


def _mutable(layout: MemoryLayout, name: str) -> Region:
    region = layout.region(name)
    if region.immutable:
        raise ImmutableMapping(f"region '{name}' cannot be unmapped, remapped or re-protected")
    return region


def protect(layout: MemoryLayout, name: str, leaf: LeafAttrs) -> MemoryLayout:
    region = _mutable(layout, name)
    updated = replace(region, path=replace(region.path, leaf=leaf))
    return replace(layout, regions=tuple(updated if r.name == name else r for r in layout))


def unmap(layout: MemoryLayout, name: str) -> MemoryLayout:
    _mutable(layout, name)
    return replace(layout, regions=tuple(r for r in layout if r.name != name))


def remap(layout: MemoryLayout, name: str, new_base: int) -> MemoryLayout:
    region = _mutable(layout, name)
    updated = replace(region, base=new_base)
    return replace(layout, regions=tuple(updated if r.name == name else r for r in layout))


# ── Queries ────────────────────────────────────────────────────────────

def check_guard_adjacency(layout: MemoryLayout) -> List[str]:
    """Problems with the guard invariant; empty when every shadow stack is bracketed."""
    problems = []
    guards = layout.by_role(Role.Guard)
    for ss in layout.by_role(Role.ShadowStack):
        below = [g for g in guards if g.end == ss.base and g.size > 0]
        above = [g for g in guards if g.base == ss.end and g.size > 0]
        if not below:
            problems.append(f"{ss.name}: no guard region directly below {ss.base:#x}")
        if not above:
            problems.append(f"{ss.name}: no guard region directly above {ss.end:#x}")
    return problems


def region_at(layout: MemoryLayout, addr: int) -> Optional[Region]:
    for r in layout:
        if r.contains(addr):
            return r
    return None


def layout_params_from(overrides: Dict[str, int]) -> LayoutParams:
    known = {f.name for f in fields(LayoutParams)}
    unknown = set(overrides) - known
    if unknown:
        raise BadParams(f"unknown layout parameters: {', '.join(sorted(unknown))}")
    return LayoutParams(**overrides)
