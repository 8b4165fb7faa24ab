"""Lockset-based pairing of field accesses into race reports."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .domain import FieldPath
from .taint import AccessKind, AnalysisOpts, FieldAccess, MethodSummary


class ConflictClass(Enum):
    READ_FREE = "read/free"
    WRITE_FREE = "write/free"
    FREE_FREE = "free/free"
    READ_WRITE = "read/write"
    WRITE_WRITE = "write/write"
    READ_READ = "read/read"   # only formed when the read/read filter is off


_CLASS_ORDER = {c: i for i, c in enumerate(ConflictClass)}
_R, _W, _F = AccessKind.READ, AccessKind.WRITE, AccessKind.FREE
_CLASSES = {
    frozenset({_R, _F}): ConflictClass.READ_FREE,
    frozenset({_W, _F}): ConflictClass.WRITE_FREE,
    frozenset({_F}): ConflictClass.FREE_FREE,
    frozenset({_R, _W}): ConflictClass.READ_WRITE,
    frozenset({_W}): ConflictClass.WRITE_WRITE,
    frozenset({_R}): ConflictClass.READ_READ,
}


def _access_key(acc: FieldAccess) -> tuple:
    return (acc.method, acc.site, acc.kind.value)


@dataclass(frozen=True)
class RaceReport:
    path: FieldPath
    a: FieldAccess
    b: FieldAccess
    cls: ConflictClass
    self_race: bool

    def sort_key(self) -> tuple:
        return (self.path, _CLASS_ORDER[self.cls], _access_key(self.a), _access_key(self.b))

    def to_json(self) -> dict:
        def side(acc: FieldAccess) -> dict:
            return {"method": acc.method, "site": f"0x{acc.site:x}", "kind": acc.kind.value,
                    "lockset": sorted(str(k) for k in acc.lockset)}
        return {"path": str(self.path), "class": self.cls.value, "self": self.self_race,
                "a": side(self.a), "b": side(self.b)}


def classify(a: FieldAccess, b: FieldAccess, opts: AnalysisOpts | None = None) -> ConflictClass | None:
    """Conflict class of a pair of accesses to one path, or None if they cannot race."""
    opts = opts or AnalysisOpts()
    if a.lockset & b.lockset:
        return None
    cls = _CLASSES[frozenset({a.kind, b.kind})]
    if cls is ConflictClass.READ_READ and opts.rr_filter:
        return None
    if cls is ConflictClass.WRITE_WRITE and not (opts.ww_self and a.method == b.method):
        return None
    return cls


def detect_races(summaries: Iterable[MethodSummary], opts: AnalysisOpts | None = None) -> list[RaceReport]:
    """Pair every two accesses to the same field path, including an access with itself.

    Pairing an access with itself models two concurrent invocations of the
    same method on one object.
    """
    opts = opts or AnalysisOpts()
    by_path: dict[FieldPath, set[FieldAccess]] = defaultdict(set)
    for summary in summaries:
        for acc in summary.accesses:
            by_path[acc.path].add(acc)
    reports = set()
    for path, accs in by_path.items():
        ordered = sorted(accs, key=_access_key)
        for i, a in enumerate(ordered):
            for b in ordered[i:]:
                cls = classify(a, b, opts)
                if cls is not None:
                    reports.add(RaceReport(path, a, b, cls, a.method == b.method))
    return sorted(reports, key=RaceReport.sort_key)


def filter_rr(reports: Iterable[RaceReport]) -> list[RaceReport]:
    return [r for r in reports if r.cls is not ConflictClass.READ_READ]


def vulnerable_functions(reports: Iterable[RaceReport]) -> set[str]:
    names = set()
    for r in reports:
        names.add(r.a.method)
        names.add(r.b.method)
    return names
