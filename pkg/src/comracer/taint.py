"""This-pointer taint propagation, lockset tracking and field-access extraction.

Each entry method is interpreted over its CFG starting from ``rcx = this``.
Register and stack-slot values are tracked as ``(base, offset)``-style
abstract values, lock counts are kept per lock identity, and block states
are joined with :func:`merge_states` until nothing changes.  Loads, stores
and frees through ``this``-derived pointers become :class:`FieldAccess`
records carrying the lockset held at the access.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Optional

from .cfg import Cfg, TermKind, bfs_order, build_cfg, edge_dominates
from .domain import (THIS, UNKNOWN, AbstractValue, AllocFresh, CallResult, FieldContents,
                     FieldPath, MachineState, StackAddr, ThisDerived, VtablePtr, VtableRef,
                     entry_state, is_lock_id, merge_states)
from .isa import (ARITH, VOLATILE, BinaryImage, Function, Imm, Instruction, Mem, Reg,
                  Register, RipRel, SymbolTag)


class AnalysisError(Exception):
    pass


class Mode(Enum):
    BASE = "base"
    E4 = "e4"
    E4E5 = "e4e5"

    @property
    def label(self) -> str:
        return {"base": "Base", "e4": "+E4", "e4e5": "+E4/E5"}[self.value]


@dataclass(frozen=True)
class AnalysisOpts:
    rr_filter: bool = False        # drop read/read pairs
    deref_recursion: bool = False  # follow calls on sub-objects loaded from fields
    ww_self: bool = True
    lock_cap: int = 16
    depth: int = 2                 # longest field path
    unroll: int = 1                # direct recursion unrolling
    max_call_depth: int = 8
    track_spills: bool = True      # test-only switch for stack round-trips
    max_block_updates: int = 512

    def __post_init__(self) -> None:
        if self.lock_cap < 1 or self.depth < 1:
            raise ValueError("lock_cap and depth must be >= 1")

    @classmethod
    def for_mode(cls, mode: Mode | str, **kwargs) -> "AnalysisOpts":
        mode = Mode(mode)
        return cls(rr_filter=mode is not Mode.BASE, deref_recursion=mode is Mode.E4E5, **kwargs)

    @property
    def mode(self) -> Mode:
        if not self.rr_filter:
            return Mode.BASE
        return Mode.E4E5 if self.deref_recursion else Mode.E4


class AccessKind(Enum):
    READ = "read"
    WRITE = "write"
    FREE = "free"


_KIND_ORDER = {AccessKind.READ: 0, AccessKind.WRITE: 1, AccessKind.FREE: 2}


def _lock_key(lock) -> str:
    return str(lock)


@dataclass(frozen=True)
class FieldAccess:
    method: str
    path: FieldPath
    kind: AccessKind
    lockset: frozenset
    site: int

    def sort_key(self) -> tuple:
        return (self.method, self.site, _KIND_ORDER[self.kind], self.path)

    def to_json(self) -> dict:
        return {"method": self.method, "site": f"0x{self.site:x}", "kind": self.kind.value,
                "lockset": sorted(_lock_key(k) for k in self.lockset)}


@dataclass(frozen=True)
class VtableStoreFact:
    function: str
    site: int
    object: AbstractValue
    field_offset: int
    vtable_addr: int


@dataclass(frozen=True)
class ValueUse:
    """A loaded field value or fresh allocation dereferenced or passed on."""
    site: int
    value: AbstractValue


@dataclass
class MethodSummary:
    method: str
    accesses: list[FieldAccess]
    diagnostics: list[str] = field(default_factory=list)
    stored_values: dict[int, AbstractValue] = field(default_factory=dict)
    uses: list[ValueUse] = field(default_factory=list)
    null_guarded: frozenset[int] = frozenset()   # free sites under a null test of the freed value
    max_block_updates: int = 0
    lock_ids: frozenset = frozenset()            # every lock identity touched

    def paths(self) -> set[FieldPath]:
        return {a.path for a in self.accesses}

    def to_json(self) -> dict:
        return {"method": self.method,
                "accesses": [{"path": str(a.path), "kind": a.kind.value,
                              "lockset": sorted(_lock_key(k) for k in a.lockset),
                              "site": f"0x{a.site:x}"} for a in self.accesses]}


@dataclass
class _Record:
    states: dict[int, MachineState] = field(default_factory=dict)
    accesses: list[FieldAccess] = field(default_factory=list)
    facts: list[VtableStoreFact] = field(default_factory=list)
    uses: list[ValueUse] = field(default_factory=list)
    stores: dict[int, AbstractValue] = field(default_factory=dict)
    calls: list[tuple[int, int, AbstractValue]] = field(default_factory=list)


@dataclass
class FunctionRun:
    cfg: Cfg
    record: _Record
    exit: Optional[MachineState]
    max_updates: int
    block_in: dict[int, MachineState]


def _clobber(state: MachineState) -> MachineState:
    return state.set_regs({r: UNKNOWN for r in VOLATILE})


class _Engine:
    def __init__(self, image: BinaryImage, resolved: Mapping, opts: AnalysisOpts,
                 method: str = "", recurse: bool = True):
        self.image = image
        self.resolved = resolved or {}
        self.opts = opts
        self.method = method
        self.recurse = recurse
        self.diagnostics: set[str] = set()
        self.lock_ids: set = set()
        self._cfgs: dict[str, Cfg] = {}
        self._runs: dict[tuple, FunctionRun] = {}

    def cfg(self, func: Function) -> Cfg:
        if func.name not in self._cfgs:
            cfg = build_cfg(func)
            for bid, reasons in sorted(cfg.flags.items()):
                for reason in reasons:
                    self.diagnostics.add(f"{func.name}: block {bid}: {reason}")
            self._cfgs[func.name] = cfg
        return self._cfgs[func.name]

    # -- fixpoint -----------------------------------------------------------

    def run(self, func: Function, state: MachineState, stack: tuple[str, ...]) -> FunctionRun:
        key = (func.name, state.key(), stack)
        if key not in self._runs:
            self._runs[key] = self._run(func, state, stack)
        return self._runs[key]

    def _run(self, func: Function, state: MachineState, stack: tuple[str, ...]) -> FunctionRun:
        cfg = self.cfg(func)
        if not cfg.blocks:
            return FunctionRun(cfg, _Record(), state, 0, {})
        order = bfs_order(cfg)
        ins: dict[int, MachineState] = {}
        outs: dict[int, MachineState] = {}
        updates: dict[int, int] = {}
        self._fixpoint(cfg, order, {cfg.entry: state}, ins, outs, updates, stack)
        dead = sorted(cfg.unreachable)
        if dead:
            self._fixpoint(cfg, dead, {b: state for b in dead}, ins, outs, updates, stack)
        rec = _Record()
        for bid in order + dead:
            self._block(cfg.blocks[bid], ins[bid], stack, rec)
        returns = [outs[b.id] for b in cfg.blocks
                   if b.terminator.kind is TermKind.RETURN and b.id not in cfg.unreachable]
        exit_state = None
        for out in returns:
            exit_state = out if exit_state is None else merge_states(exit_state, out)
        return FunctionRun(cfg, rec, exit_state, max(updates.values(), default=0), ins)

    def _fixpoint(self, cfg: Cfg, blocks: list[int], seeds: dict[int, MachineState],
                  ins, outs, updates, stack) -> None:
        members = set(blocks)
        rank = {b: i for i, b in enumerate(blocks)}
        for bid, seed in seeds.items():
            ins[bid] = seed
        heap = [(rank[b], b) for b in seeds]
        heapq.heapify(heap)
        queued = set(seeds)
        while heap:
            _, bid = heapq.heappop(heap)
            queued.discard(bid)
            out = self._block(cfg.blocks[bid], ins[bid], stack, None)
            if outs.get(bid) == out:
                continue
            outs[bid] = out
            for succ in cfg.successors[bid]:
                if succ not in members:
                    continue
                incoming = [outs[p] for p in cfg.predecessors[succ] if p in members and p in outs]
                if succ in seeds:
                    incoming.append(seeds[succ])
                new = incoming[0]
                for other in incoming[1:]:
                    new = merge_states(new, other)
                if ins.get(succ) == new:
                    continue
                updates[succ] = updates.get(succ, 0) + 1
                if updates[succ] > self.opts.max_block_updates:
                    self.diagnostics.add(f"{cfg.function}: block {succ}: iteration limit hit")
                    continue
                ins[succ] = new
                if succ not in queued:
                    queued.add(succ)
                    heapq.heappush(heap, (rank[succ], succ))

    def _block(self, block, state: MachineState, stack, rec: Optional[_Record]) -> MachineState:
        for insn in block.instructions:
            if rec is not None:
                rec.states[insn.address] = state
            state = self.step(state, insn, stack, rec)
        return state

    # -- transfer -----------------------------------------------------------

    def step(self, state: MachineState, insn: Instruction, stack: tuple[str, ...],
             rec: Optional[_Record]) -> MachineState:
        m, ops = insn.mnemonic, insn.operands
        if m in ("nop", "ret", "jmp", "jcc"):
            return state
        if m == "call":
            return self._call(state, insn, stack, rec)
        if m == "mov":
            dst, src = ops
            if isinstance(dst, Reg):
                if isinstance(src, (Mem, RipRel)):
                    value = self._load(state, src, insn, rec)
                else:
                    value = self._value(state, src)
                return self._set(state, dst.reg, value)
            return self._store(state, dst, self._value(state, src), insn, stack, rec)
        if m == "lea":
            return self._set(state, ops[0].reg, self._address(state, ops[1]))
        if m in ("cmp", "test"):
            for op in ops:
                if isinstance(op, (Mem, RipRel)):
                    self._load(state, op, insn, rec)
            return state
        if m in ARITH:
            dst = ops[0]
            for op in ops[1:]:
                if isinstance(op, (Mem, RipRel)):
                    self._load(state, op, insn, rec)
            if isinstance(dst, Reg):
                return self._set(state, dst.reg, UNKNOWN)
            self._load(state, dst, insn, rec)
            return self._store(state, dst, UNKNOWN, insn, stack, rec)
        raise AnalysisError(f"unhandled mnemonic {m}")

    @staticmethod
    def _set(state: MachineState, reg: Register, value: AbstractValue) -> MachineState:
        if reg is Register.RSP:
            return state
        return state.set_reg(reg, value)

    def _value(self, state: MachineState, op) -> AbstractValue:
        if isinstance(op, Reg):
            return StackAddr(0) if op.reg is Register.RSP else state.get(op.reg)
        if isinstance(op, Imm):
            return VtableRef(op.value) if op.value in self.image.data else UNKNOWN
        return UNKNOWN

    def _address(self, state: MachineState, op) -> AbstractValue:
        if isinstance(op, RipRel):
            return VtableRef(op.addr) if op.addr in self.image.data else UNKNOWN
        if op.index is not None:
            return UNKNOWN
        if op.base is Register.RSP:
            return StackAddr(op.disp)
        base = state.get(op.base)
        if isinstance(base, ThisDerived):
            return ThisDerived(base.disp + op.disp)
        if isinstance(base, StackAddr):
            return StackAddr(base.disp + op.disp)
        return UNKNOWN

    def _use(self, value: AbstractValue, site: int, rec: Optional[_Record]) -> None:
        if rec is not None and isinstance(value, (FieldContents, AllocFresh)):
            rec.uses.append(ValueUse(site, value))

    def _emit(self, state, path: FieldPath, kind: AccessKind, site: int, rec) -> None:
        if rec is not None:
            rec.accesses.append(FieldAccess(self.method, path, kind, state.lockset(), site))

    def _child(self, base: FieldContents, disp: int, site: int) -> Optional[FieldPath]:
        if not self.opts.deref_recursion:
            return None
        if len(base.path) >= self.opts.depth:
            self.diagnostics.add(f"0x{site:x}: field path {base.path} at depth limit "
                                 f"{self.opts.depth}, access truncated")
            return None
        return base.path.child(disp)

    def _load(self, state: MachineState, op, insn: Instruction, rec) -> AbstractValue:
        if isinstance(op, RipRel):
            return UNKNOWN
        if op.index is not None:
            self._use(state.get(op.base), insn.address, rec)
            return UNKNOWN
        if op.base is Register.RSP:
            return state.slot(op.disp) if self.opts.track_spills else UNKNOWN
        base = state.get(op.base)
        self._use(base, insn.address, rec)
        if isinstance(base, StackAddr):
            return state.slot(base.disp + op.disp) if self.opts.track_spills else UNKNOWN
        if isinstance(base, ThisDerived):
            path = FieldPath((base.disp + op.disp,))
            self._emit(state, path, AccessKind.READ, insn.address, rec)
            return FieldContents(path)
        if isinstance(base, FieldContents):
            path = self._child(base, op.disp, insn.address)
            if path is not None:
                self._emit(state, path, AccessKind.READ, insn.address, rec)
                return FieldContents(path)
            return VtablePtr(base) if op.disp == 0 else UNKNOWN
        if isinstance(base, (AllocFresh, CallResult)):
            return VtablePtr(base) if op.disp == 0 else UNKNOWN
        return UNKNOWN

    def _store(self, state: MachineState, op, value: AbstractValue, insn: Instruction,
               stack, rec) -> MachineState:
        if isinstance(op, RipRel):
            return state
        site = insn.address
        if op.index is not None:
            self._use(state.get(op.base), site, rec)
            return state
        if op.base is Register.RSP:
            return state.set_slot(op.disp, value) if self.opts.track_spills else state
        base = state.get(op.base)
        self._use(base, site, rec)
        if isinstance(base, StackAddr):
            if self.opts.track_spills:
                return state.set_slot(base.disp + op.disp, value)
            return state
        if isinstance(value, VtableRef) and base is not UNKNOWN and rec is not None:
            if isinstance(base, ThisDerived):
                rec.facts.append(VtableStoreFact(stack[-1], site, THIS, base.disp + op.disp,
                                                 value.addr))
            else:
                rec.facts.append(VtableStoreFact(stack[-1], site, base, op.disp, value.addr))
        path = None
        if isinstance(base, ThisDerived):
            path = FieldPath((base.disp + op.disp,))
        elif isinstance(base, FieldContents):
            path = self._child(base, op.disp, site)
        if path is not None:
            self._emit(state, path, AccessKind.WRITE, site, rec)
            if rec is not None:
                rec.stores[site] = value
        return state

    def _call(self, state: MachineState, insn: Instruction, stack, rec) -> MachineState:
        op = insn.operands[0]
        site = insn.address
        rcx = state.get(Register.RCX)
        if not isinstance(op, Imm):
            resolved = self.resolved.get(site)
            if not resolved:
                return _clobber(state)
            outs = []
            for cand in sorted(resolved.candidates, key=lambda c: (c.target, c.vtable)):
                func = self.image.function_at(cand.target)
                if func is not None:
                    outs.append(self._direct(state, func, insn, stack, rec))
            if not outs:
                return _clobber(state)
            joined = outs[0]
            for other in outs[1:]:
                joined = merge_states(joined, other)
            return joined
        target = op.value
        sym = self.image.symbol_at(target)
        tag = sym.tag if sym is not None else SymbolTag.PLAIN
        if tag in (SymbolTag.LOCK_ACQUIRE, SymbolTag.LOCK_RELEASE):
            if is_lock_id(rcx):
                self.lock_ids.add(rcx)
                delta = 1 if tag is SymbolTag.LOCK_ACQUIRE else -1
                state = state.adjust_lock(rcx, delta, self.opts.lock_cap)
            else:
                self.diagnostics.add(f"0x{site:x}: {tag.value} on unknown lock identity ignored")
            return _clobber(state)
        if tag is SymbolTag.FREE:
            if isinstance(rcx, FieldContents):
                self._emit(state, rcx.path, AccessKind.FREE, site, rec)
            return _clobber(state)
        if tag is SymbolTag.ALLOC:
            return _clobber(state).set_reg(Register.RAX, AllocFresh(site))
        self._use(rcx, site, rec)
        func = self.image.function_at(target)
        if func is None:
            return _clobber(state)
        return self._direct(state, func, insn, stack, rec)

    def _direct(self, state: MachineState, func: Function, insn: Instruction, stack,
                rec) -> MachineState:
        site = insn.address
        rcx = state.get(Register.RCX)
        if not self.recurse:
            if rec is not None:
                rec.calls.append((site, func.entry, rcx))
            return _clobber(state).set_reg(Register.RAX, CallResult(func.entry))
        member = rcx == THIS or (isinstance(rcx, FieldContents) and self.opts.deref_recursion)
        if not member:
            if isinstance(rcx, ThisDerived):
                self.diagnostics.add(f"0x{site:x}: call to {func.name} with rcx={rcx} "
                                     "is not a member call, callee accesses unattributed")
            return _clobber(state)
        if stack.count(func.name) > self.opts.unroll or len(stack) >= self.opts.max_call_depth:
            self.diagnostics.add(f"0x{site:x}: recursive call to {func.name} cut, "
                                 "treated as unknown effect")
            return _clobber(state)
        run = self.run(func, MachineState(state.regs, {}, state.locks), stack + (func.name,))
        if rec is not None:
            rec.accesses.extend(run.record.accesses)
            rec.facts.extend(run.record.facts)
        if run.exit is None:
            return _clobber(state)
        after = _clobber(state).with_locks(run.exit.locks)
        return after.set_reg(Register.RAX, run.exit.get(Register.RAX))


def transfer(state: MachineState, instr: Instruction, image: BinaryImage,
             resolved: Mapping | None = None, opts: AnalysisOpts | None = None,
             method: str = "") -> tuple[MachineState, list[FieldAccess], list[VtableStoreFact]]:
    """Abstract effect of one instruction: new state plus emitted accesses and vtable facts."""
    engine = _Engine(image, resolved or {}, opts or AnalysisOpts(), method)
    rec = _Record()
    new = engine.step(state, instr, (method,), rec)
    return new, rec.accesses, rec.facts


def run_function(image: BinaryImage, func: Function, opts: AnalysisOpts | None = None, *,
                 resolved: Mapping | None = None, recurse: bool = True,
                 state: MachineState | None = None) -> tuple[FunctionRun, _Engine]:
    engine = _Engine(image, resolved or {}, opts or AnalysisOpts(), func.name, recurse)
    run = engine.run(func, state or entry_state(), (func.name,))
    return run, engine


def _dedupe(accesses: Iterable[FieldAccess]) -> list[FieldAccess]:
    merged: dict[tuple, FieldAccess] = {}
    for acc in accesses:
        key = (acc.path, acc.kind, acc.site)
        prev = merged.get(key)
        # same site reached under different locks: keep only what is always held
        merged[key] = acc if prev is None else replace(prev, lockset=prev.lockset & acc.lockset)
    return sorted(merged.values(), key=lambda a: (a.site, _KIND_ORDER[a.kind], a.path))


def _null_guarded(run: FunctionRun, frees: list[FieldAccess]) -> frozenset[int]:
    cfg, states = run.cfg, run.record.states
    tests = []
    for block in cfg.blocks:
        if block.terminator.kind is not TermKind.BRANCH or len(block.instructions) < 2:
            continue
        test = block.instructions[-2]
        if test.address not in states:
            continue
        ops = test.operands
        if test.mnemonic == "test" and isinstance(ops[0], Reg) and ops[0] == ops[1]:
            reg = ops[0].reg
        elif test.mnemonic == "cmp" and isinstance(ops[0], Reg) and ops[1] == Imm(0):
            reg = ops[0].reg
        else:
            continue
        tests.append((block.id, states[test.address].get(reg), block.terminator.targets))
    guarded = set()
    for acc in frees:
        if acc.site not in states:
            continue
        freed = states[acc.site].get(Register.RCX)
        target = cfg.block_of(acc.site).id
        for bid, value, succs in tests:
            if value == freed and any(edge_dominates(cfg, (bid, s), target) for s in succs):
                guarded.add(acc.site)
    return frozenset(guarded)


def analyze_method(image: BinaryImage, method: str, resolved: Mapping | None = None,
                   opts: AnalysisOpts | None = None) -> MethodSummary:
    """Summarize the field accesses of one entry method."""
    if method not in image.functions:
        raise AnalysisError(f"no function named {method!r}")
    func = image.functions[method]
    opts = opts or AnalysisOpts()
    run, engine = run_function(image, func, opts, resolved=resolved)
    own = {insn.address for insn in func.instructions}
    accesses = _dedupe(run.record.accesses)
    frees = [a for a in accesses if a.kind is AccessKind.FREE]
    return MethodSummary(
        method=method,
        accesses=accesses,
        diagnostics=sorted(engine.diagnostics),
        stored_values={s: v for s, v in run.record.stores.items() if s in own},
        uses=sorted({u for u in run.record.uses if u.site in own}, key=lambda u: (u.site, str(u.value))),
        null_guarded=_null_guarded(run, frees),
        max_block_updates=run.max_updates,
        lock_ids=frozenset(engine.lock_ids),
    )
