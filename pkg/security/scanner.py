"""Load-time code scanner for elevated tasks.

A page that contains any forbidden privileged instruction loses execute
permission as a whole. Words are classified in one vectorized pass; only the
hits are decoded again to report their class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from config import PAGE_SIZE
from isa.allowlist import Allowlist, load_allowlist
from isa.decoder import InstrClass, classify_words, decode
from security.policy import LaunchRequest, TaskKind, decide_task_kind

logger = logging.getLogger(__name__)


class UnalignedLength(ValueError):
    def __init__(self, length: int, page_index: Optional[int] = None):
        self.length = length
        self.page_index = page_index
        where = f"page {page_index}: " if page_index is not None else ""
        super().__init__(f"{where}length {length} is not a multiple of 4")


class ScanViolation(NamedTuple):
    offset: int
    cls: InstrClass


@dataclass
class ScanVerdict:
    allowed: bool
    violations: List[ScanViolation] = field(default_factory=list)


@dataclass
class ScanStats:
    """Work done by a scan, counted in words and pages.

    Words are classified by one vectorized pass, so the count of words
    classified stands in for decode calls: a linear scan classifies each
    word exactly once. Only flagged words go through the scalar decoder.
    """
    words: int = 0
    pages: int = 0


@dataclass
class LaunchDecision:
    kind: TaskKind
    verdicts: List[ScanVerdict]

    @property
    def loadable(self) -> bool:
        return all(v.allowed for v in self.verdicts)


_default_allow: Optional[Allowlist] = None


def default_allowlist() -> Allowlist:
    global _default_allow
    if _default_allow is None:
        _default_allow = load_allowlist()
    return _default_allow


def _words(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype="<u4")


def _scan_words(
    words: np.ndarray, bounds: Sequence[int], allow: Allowlist, stats: Optional[ScanStats]
) -> List[ScanVerdict]:
    """Classify ``words`` once and split the hits at word-index ``bounds``."""
    mask = classify_words(words, allow)
    if stats is not None:
        stats.words += int(words.size)
        stats.pages += len(bounds) - 1

    verdicts = [ScanVerdict(True) for _ in range(len(bounds) - 1)]
    hits = np.flatnonzero(mask)
    if hits.size:
        page_of = np.searchsorted(np.asarray(bounds), hits, side="right") - 1
        for idx, page in zip(hits.tolist(), page_of.tolist()):
            offset = (idx - bounds[page]) * 4
            verdicts[page].violations.append(ScanViolation(offset, decode(int(words[idx]))))
        for page, v in enumerate(verdicts):
            if v.violations:
                v.allowed = False
                logger.warning(
                    "page %d denied: %d forbidden instruction(s), first %s at offset %#x",
                    page, len(v.violations), v.violations[0].cls.describe(), v.violations[0].offset,
                )
    return verdicts


def scan_page(data: bytes, allow: Optional[Allowlist] = None, stats: Optional[ScanStats] = None) -> ScanVerdict:
    if len(data) % 4:
        raise UnalignedLength(len(data))
    words = _words(data)
    return _scan_words(words, [0, words.size], allow or default_allowlist(), stats)[0]


def scan_task(
    pages: Sequence[bytes], allow: Optional[Allowlist] = None, stats: Optional[ScanStats] = None
) -> List[ScanVerdict]:
    """Independent per-page verdicts; the task is loadable iff all pages are allowed."""
    if not pages:
        return []
    bounds = [0]
    for i, page in enumerate(pages):
        if len(page) % 4:
            raise UnalignedLength(len(page), page_index=i)
        bounds.append(bounds[-1] + len(page) // 4)
    words = _words(b"".join(pages))
    return _scan_words(words, bounds, allow or default_allowlist(), stats)


def scan_buffer(
    data: bytes,
    page_size: int = PAGE_SIZE,
    allow: Optional[Allowlist] = None,
    stats: Optional[ScanStats] = None,
) -> List[ScanVerdict]:
    """Scan a raw code image split into ``page_size`` pages (last page may be short)."""
    if page_size <= 0 or page_size % 4:
        raise UnalignedLength(page_size)
    if len(data) % 4:
        raise UnalignedLength(len(data), page_index=len(data) // page_size)
    words = _words(data)
    per_page = page_size // 4
    bounds = list(range(0, words.size, per_page)) + [words.size]
    if words.size == 0:
        return []
    return _scan_words(words, bounds, allow or default_allowlist(), stats)


def split_pages(data: bytes, page_size: int = PAGE_SIZE) -> List[bytes]:
    return [bytes(data[i:i + page_size]) for i in range(0, len(data), page_size)]


def vet_launch(req: LaunchRequest, allow: Optional[Allowlist] = None) -> LaunchDecision:
    """Decide the task kind and scan the binary only for elevated tasks."""
    kind = decide_task_kind(req)
    if kind != TaskKind.Elevated:
        logger.info("legacy task: code scanner skipped")
        return LaunchDecision(kind, [])
    verdicts = scan_task(list(req.binary_pages), allow)
    denied = sum(1 for v in verdicts if not v.allowed)
    if denied:
        logger.warning("elevated launch: %d of %d page(s) denied execute permission", denied, len(verdicts))
    return LaunchDecision(kind, verdicts)
