"""Virtual-call resolution through vtable pointers.

A global pass runs every function once without inlining callees and keeps
three things per function: the ``VtableStoreFact``s it produces, the direct
calls it makes (with the ``rcx`` value at each) and the value it returns in
``rax``.  Virtual calls are then resolved by tracing the dispatched object
back to the vtable stored at its offset 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .domain import (THIS, UNKNOWN, AbstractValue, CallResult, FieldContents, FieldPath,
                     MachineState, VtablePtr)
from .isa import AddressNotMapped, BinaryImage, Function, Imm, Instruction, Mem, Reg, Register
from .taint import AnalysisOpts, VtableStoreFact, run_function


@dataclass(frozen=True, order=True)
class Candidate:
    vtable: int
    target: int
    name: Optional[str] = None

    def to_json(self) -> dict:
        return {"vtable": f"0x{self.vtable:x}", "target": f"0x{self.target:x}", "name": self.name}


@dataclass(frozen=True)
class ResolvedCall:
    call_site: int
    method_offset: int
    candidates: tuple[Candidate, ...]

    def to_json(self) -> dict:
        return {"call_site": f"0x{self.call_site:x}", "method_offset": f"0x{self.method_offset:x}",
                "candidates": [c.to_json() for c in self.candidates]}


@dataclass(frozen=True)
class Unresolved:
    call_site: int
    function: str
    reason: str

    def to_json(self) -> dict:
        return {"call_site": f"0x{self.call_site:x}", "function": self.function, "reason": self.reason}


@dataclass
class FunctionFacts:
    name: str
    states: dict[int, MachineState]
    facts: list[VtableStoreFact]
    calls: list[tuple[int, int, AbstractValue]]  # (site, target entry, rcx at the call)
    exit_rax: AbstractValue = UNKNOWN


@dataclass
class FactBase:
    functions: dict[str, FunctionFacts] = field(default_factory=dict)

    @property
    def facts(self) -> list[VtableStoreFact]:
        return [f for ff in self.functions.values() for f in ff.facts]


@dataclass
class VirtualCallRecovery:
    resolved: dict[int, ResolvedCall]
    unresolved: list[Unresolved]
    virtual_calls: int
    facts: list[VtableStoreFact]

    def to_json(self) -> dict:
        return {"resolved": [r.to_json() for _, r in sorted(self.resolved.items())],
                "unresolved": [u.to_json() for u in self.unresolved]}


def collect_calls(function: Function) -> list[Instruction]:
    return [insn for insn in function.instructions if insn.mnemonic == "call"]


def _dispatch_object(value: AbstractValue) -> Optional[AbstractValue]:
    """Object whose offset-0 word produced ``value``, if it is a vtable-pointer load."""
    if isinstance(value, VtablePtr):
        return value.obj
    if isinstance(value, FieldContents) and value.path.offsets[-1] == 0:
        if len(value.path) == 1:
            return THIS
        return FieldContents(FieldPath(value.path.offsets[:-1]))
    return None


def _base_register(call: Instruction) -> Optional[Register]:
    if call.mnemonic != "call" or not call.operands:
        return None
    op = call.operands[0]
    if isinstance(op, Reg):
        return op.reg
    if isinstance(op, Mem) and op.index is None:
        return op.base
    return None


def is_virtual_call(call: Instruction, state: MachineState) -> bool:
    reg = _base_register(call)
    return reg is not None and _dispatch_object(state.get(reg)) is not None


def trace_object(call: Instruction, state: MachineState) -> Optional[AbstractValue]:
    """The dispatched object, or None when the chain is broken."""
    reg = _base_register(call)
    if reg is None:
        return None
    return _dispatch_object(state.get(reg))


def parse_method_offset(call: Instruction) -> int:
    op = call.operands[0]
    return op.disp if isinstance(op, Mem) else 0


def lookup_vtable(image: BinaryImage, vtable_addr: int, offset: int) -> Optional[int]:
    try:
        word = image.read_data_word(vtable_addr + offset)
    except AddressNotMapped:
        return None
    return word if image.is_function_entry(word) else None


def collect_facts(image: BinaryImage, opts: AnalysisOpts | None = None) -> FactBase:
    """Run every function once, without inlining, and keep its vtable facts."""
    base = FactBase()
    for name, func in sorted(image.functions.items(), key=lambda kv: kv[1].entry):
        run, _ = run_function(image, func, opts, recurse=False)
        exit_rax = run.exit.get(Register.RAX) if run.exit is not None else UNKNOWN
        base.functions[name] = FunctionFacts(name, run.record.states, run.record.facts,
                                             run.record.calls, exit_rax)
    return base


def _chain(image: BinaryImage, base: FactBase, function: str, obj: AbstractValue,
           seen: set) -> set[int]:
    key = (function, obj)
    if key in seen or function not in base.functions:
        return set()
    seen.add(key)
    ff = base.functions[function]
    found = {f.vtable_addr for f in ff.facts if f.object == obj and f.field_offset == 0}
    # constructors invoked on the object store into their own this
    for _, target, rcx in ff.calls:
        if rcx == obj:
            callee = image.function_at(target)
            if callee is not None:
                found |= _chain(image, base, callee.name, THIS, seen)
    if found:
        return found
    if isinstance(obj, CallResult):
        factory = image.function_at(obj.target)
        if factory is not None and factory.name in base.functions:
            produced = base.functions[factory.name].exit_rax
            if produced is not UNKNOWN:
                return _chain(image, base, factory.name, produced, seen)
    return set()


def follow_object_chain(image: BinaryImage, obj: AbstractValue, facts: FactBase,
                        function: str) -> set[int]:
    """Candidate vtables for ``obj`` as seen inside ``function``.

    Tries stores and constructor calls on the object in the same function
    first, then the body of the factory that returned it.  Anything else is
    left unresolved.
    """
    return _chain(image, facts, function, obj, set())


def _secondary_only(base: FactBase, function: str, obj: AbstractValue) -> bool:
    ff = base.functions.get(function)
    return ff is not None and any(f.object == obj and f.field_offset != 0 for f in ff.facts)


def recover_virtual_calls(image: BinaryImage, opts: AnalysisOpts | None = None,
                          facts: FactBase | None = None) -> VirtualCallRecovery:
    base = facts or collect_facts(image, opts)
    resolved: dict[int, ResolvedCall] = {}
    unresolved: list[Unresolved] = []
    virtual = 0
    for name, func in sorted(image.functions.items(), key=lambda kv: kv[1].entry):
        states = base.functions[name].states
        for call in collect_calls(func):
            if isinstance(call.operands[0], Imm):
                continue
            state = states.get(call.address, MachineState())
            if not is_virtual_call(call, state):
                unresolved.append(Unresolved(call.address, name, "not-virtual"))
                continue
            virtual += 1
            obj = trace_object(call, state)
            offset = parse_method_offset(call)
            if obj is None:
                unresolved.append(Unresolved(call.address, name, "object-untraceable"))
                continue
            if offset < 0 or offset % 8:
                unresolved.append(Unresolved(call.address, name, "bad-method-offset"))
                continue
            vtables = follow_object_chain(image, obj, base, name)
            if not vtables:
                reason = ("secondary-vtable-only" if _secondary_only(base, name, obj)
                          else "no-candidate-vtables")
                unresolved.append(Unresolved(call.address, name, reason))
                continue
            cands = set()
            for vt in vtables:
                target = lookup_vtable(image, vt, offset)
                if target is not None:
                    cands.add(Candidate(vt, target, image.name_of(target)))
            if not cands:
                unresolved.append(Unresolved(call.address, name, "no-target-at-offset"))
                continue
            resolved[call.address] = ResolvedCall(call.address, offset, tuple(sorted(cands)))
    return VirtualCallRecovery(dict(sorted(resolved.items())), unresolved, virtual, base.facts)
