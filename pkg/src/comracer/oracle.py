"""Exhaustive interleaving search over small per-thread field-access programs.

Shared fields hold allocation ids (or null), locals are thread-private.
Every interleaving is explored with memoization on the full state, and the
first use of a freed id (use-after-free) and second free of one id
(double-free) are reported with a witness schedule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Optional, Sequence, Union

from .domain import AllocFresh, FieldContents, FieldPath
from .taint import AccessKind, FieldAccess, MethodSummary

MAX_THREADS = 3
MAX_OPS = 12
MAX_TOTAL = 18

UAF = "uaf"
DF = "df"


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class Load:
    field: str
    local: str

    def __str__(self) -> str:
        return f"Load({self.field}->{self.local})"


@dataclass(frozen=True)
class Store:
    field: str
    local: Optional[str] = None  # None stores a fresh opaque id

    def __str__(self) -> str:
        return f"Store({self.field}<-{self.local or 'new'})"


@dataclass(frozen=True)
class AllocInto:
    local: str

    def __str__(self) -> str:
        return f"Alloc({self.local})"


@dataclass(frozen=True)
class FreeVal:
    local: str

    def __str__(self) -> str:
        return f"Free({self.local})"


@dataclass(frozen=True)
class UseVal:
    local: str

    def __str__(self) -> str:
        return f"Use({self.local})"


@dataclass(frozen=True)
class Guard:
    """Skip the next op (a free, use or store) when the local is null."""
    local: str

    def __str__(self) -> str:
        return f"Guard({self.local}!=0)"


Op = Union[Load, Store, AllocInto, FreeVal, UseVal, Guard]


@dataclass(frozen=True)
class ThreadProgram:
    ops: tuple[Op, ...]

    def __post_init__(self) -> None:
        if len(self.ops) > MAX_OPS:
            raise OracleError(f"thread program has {len(self.ops)} ops, limit is {MAX_OPS}")
        defined: set[str] = set()
        for n, op in enumerate(self.ops):
            reads = [] if isinstance(op, (Load, AllocInto)) else [op.local]
            for local in reads:
                if local is not None and local not in defined:
                    raise OracleError(f"op {n} ({op}) uses undefined local {local!r}")
            if isinstance(op, (Load, AllocInto)):
                defined.add(op.local)
            if isinstance(op, Guard) and n + 1 < len(self.ops) \
                    and isinstance(self.ops[n + 1], (Load, AllocInto, Guard)):
                raise OracleError(f"op {n}: a guard must protect a free, use or store")

    def __len__(self) -> int:
        return len(self.ops)

    def __str__(self) -> str:
        return "; ".join(str(op) for op in self.ops)


@dataclass(frozen=True)
class Witness:
    steps: tuple[tuple[int, int], ...]  # (thread index, op index)

    @property
    def schedule(self) -> tuple[int, ...]:
        return tuple(t for t, _ in self.steps)

    def render(self, programs: Sequence[ThreadProgram]) -> str:
        return ", ".join(f"T{t + 1}:{programs[t].ops[i]}" for t, i in self.steps)


@dataclass(frozen=True)
class Verdict:
    uaf: bool
    df: bool
    uaf_witness: Optional[Witness]
    df_witness: Optional[Witness]
    explored: int

    def to_json(self, programs: Sequence[ThreadProgram]) -> dict:
        def wit(w: Optional[Witness]):
            if w is None:
                return None
            return {"schedule": [t + 1 for t in w.schedule], "steps": w.render(programs)}
        return {"uaf": self.uaf, "df": self.df, "uaf_witness": wit(self.uaf_witness),
                "df_witness": wit(self.df_witness), "explored": self.explored}


@dataclass(frozen=True)
class _State:
    pos: tuple[int, ...]
    fields: tuple[tuple[str, Hashable], ...]
    freed: frozenset
    locals: tuple[tuple[tuple[str, Hashable], ...], ...]


def _check_bounds(programs: Sequence[ThreadProgram]) -> None:
    if not programs:
        raise OracleError("no threads")
    if len(programs) > MAX_THREADS:
        raise OracleError(f"{len(programs)} threads, limit is {MAX_THREADS}")
    total = sum(len(p) for p in programs)
    if total > MAX_TOTAL:
        raise OracleError(f"{total} ops in total, limit is {MAX_TOTAL}")


def _initial(programs: Sequence[ThreadProgram], init: Mapping[str, Hashable]) -> _State:
    fields = tuple(sorted((f, v) for f, v in init.items() if v not in (None, 0)))
    return _State(tuple(0 for _ in programs), fields, frozenset(), tuple(() for _ in programs))


def step(programs: Sequence[ThreadProgram], state: _State, t: int) -> tuple[_State, Optional[str]]:
    """Execute the next op of thread ``t``; returns the new state and any fault."""
    i = state.pos[t]
    op = programs[t].ops[i]
    fields = dict(state.fields)
    local = dict(state.locals[t])
    freed = state.freed
    advance = 1
    fault = None
    if isinstance(op, Load):
        local[op.local] = fields.get(op.field)
    elif isinstance(op, Store):
        value = local[op.local] if op.local is not None else ("opaque", t, i)
        if value is None:
            fields.pop(op.field, None)
        else:
            fields[op.field] = value
    elif isinstance(op, AllocInto):
        local[op.local] = ("alloc", t, i)
    elif isinstance(op, FreeVal):
        value = local[op.local]
        if value is not None:
            if value in freed:
                fault = DF
            freed = freed | {value}
    elif isinstance(op, UseVal):
        value = local[op.local]
        if value is not None and value in freed:
            fault = UAF
    elif isinstance(op, Guard):
        if local[op.local] is None:
            advance = 2
    pos = list(state.pos)
    pos[t] = min(i + advance, len(programs[t]))
    locals_ = list(state.locals)
    locals_[t] = tuple(sorted(local.items()))
    return _State(tuple(pos), tuple(sorted(fields.items())), freed, tuple(locals_)), fault


def _step_key(programs: Sequence[ThreadProgram], state: _State, t: int) -> tuple:
    op = programs[t].ops[state.pos[t]]
    # frees are ordered last so witnesses delay them as long as possible
    return (isinstance(op, FreeVal), t, state.pos[t])


def enumerate_interleavings(programs: Sequence[ThreadProgram],
                            init: Mapping[str, Hashable] | None = None) -> Verdict:
    """Explore every interleaving of ``programs``.

    The witness for each fault kind is the shortest faulting schedule;
    among equally short ones, the one that runs frees as late as possible
    and then prefers lower thread numbers.
    """
    programs = [p if isinstance(p, ThreadProgram) else ThreadProgram(tuple(p)) for p in programs]
    _check_bounds(programs)
    start = _initial(programs, init or {})
    seen = {start}
    level: dict[_State, tuple] = {start: ()}
    found: dict[str, tuple] = {}
    while level:
        nxt: dict[_State, tuple] = {}
        hits: dict[str, tuple] = {}
        for state, path in level.items():
            for t in range(len(programs)):
                if state.pos[t] >= len(programs[t]):
                    continue
                key = path + (_step_key(programs, state, t),)
                new, fault = step(programs, state, t)
                if fault is not None:
                    if fault not in found and (fault not in hits or key < hits[fault]):
                        hits[fault] = key
                    continue
                if new in seen and new not in nxt:
                    continue
                if new not in nxt or key < nxt[new]:
                    nxt[new] = key
                seen.add(new)
        found.update(hits)
        level = nxt

    def witness(kind: str) -> Optional[Witness]:
        if kind not in found:
            return None
        return Witness(tuple((t, i) for _, t, i in found[kind]))

    return Verdict(UAF in found, DF in found, witness(UAF), witness(DF), len(seen))


def replay(programs: Sequence[ThreadProgram], init: Mapping[str, Hashable] | None,
           schedule: Sequence[int]) -> Optional[str]:
    """Run a schedule of thread indices; returns the fault raised by its last step."""
    programs = [p if isinstance(p, ThreadProgram) else ThreadProgram(tuple(p)) for p in programs]
    state = _initial(programs, init or {})
    fault = None
    for n, t in enumerate(schedule):
        if fault is not None:
            raise OracleError(f"schedule continues after a {fault} at step {n - 1}")
        if state.pos[t] >= len(programs[t]):
            raise OracleError(f"thread {t} has no op left at step {n}")
        state, fault = step(programs, state, t)
    return fault


# -- lifting analyzer summaries ----------------------------------------------

def summary_to_program(summary: MethodSummary, path: FieldPath, field: str = "f") -> ThreadProgram:
    """Turn the accesses one method makes on ``path`` into a thread program.

    Reads load into a new local.  Writes of a fresh allocation become
    ``AllocInto`` + ``Store``, other writes store an opaque id.  A free
    reuses the local of the most recent load (guarded if the code tested it
    for null first), and later dereferences of a loaded or published value
    become ``UseVal``.
    """
    accesses = [a for a in summary.accesses if a.path == path]
    if not accesses:
        raise OracleError(f"{summary.method} makes no access to {path}")
    events = [(a.site, 0, a) for a in accesses]
    events += [(u.site, 1, u) for u in summary.uses]
    events.sort(key=lambda e: (e[0], e[1]))
    ops: list[Op] = []
    last_load: Optional[str] = None
    published: dict[AllocFresh, str] = {}
    count = 0

    def fresh(prefix: str) -> str:
        nonlocal count
        count += 1
        return f"{prefix}{count}"

    for site, _, ev in events:
        if isinstance(ev, FieldAccess):
            if ev.kind is AccessKind.READ:
                last_load = fresh("p")
                ops.append(Load(field, last_load))
            elif ev.kind is AccessKind.WRITE:
                value = summary.stored_values.get(site)
                if isinstance(value, AllocFresh):
                    local = fresh("q")
                    ops += [AllocInto(local), Store(field, local)]
                    published[value] = local
                else:
                    ops.append(Store(field, None))
            else:
                local = last_load
                if local is None:
                    local = fresh("p")
                    ops.append(Load(field, local))
                if site in summary.null_guarded:
                    ops.append(Guard(local))
                ops.append(FreeVal(local))
        else:
            value = ev.value
            if isinstance(value, AllocFresh) and value in published:
                ops.append(UseVal(published[value]))
            elif isinstance(value, FieldContents) and value.path == path and last_load is not None:
                ops.append(UseVal(last_load))
    return ThreadProgram(tuple(ops))


def parse_scenario(doc: dict) -> tuple[list[ThreadProgram], dict[str, Hashable]]:
    """Read the JSON scenario form: ``{"threads": [[op, ...], ...], "init": {field: id}}``."""
    threads = doc.get("threads")
    if not isinstance(threads, list):
        raise OracleError("scenario needs a 'threads' list")
    programs = []
    for t, ops in enumerate(threads):
        parsed = []
        for n, raw in enumerate(ops):
            try:
                parsed.append(_parse_op(raw))
            except (KeyError, TypeError) as exc:
                raise OracleError(f"thread {t + 1} op {n}: malformed op {raw!r}") from exc
        programs.append(ThreadProgram(tuple(parsed)))
    init = doc.get("init", {})
    if not isinstance(init, dict):
        raise OracleError("'init' must map field names to ids")
    return programs, {str(k): v for k, v in init.items()}


def _parse_op(raw: dict) -> Op:
    kind = raw["op"]
    if kind == "load":
        return Load(raw["field"], raw["into"])
    if kind == "store":
        return Store(raw["field"], raw.get("from"))
    if kind == "alloc":
        return AllocInto(raw["into"])
    if kind == "free":
        return FreeVal(raw["local"])
    if kind == "use":
        return UseVal(raw["local"])
    if kind == "guard":
        return Guard(raw["local"])
    raise OracleError(f"unknown op {kind!r}")
