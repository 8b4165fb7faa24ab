"""Abstract values, field paths and the per-point machine state."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Union

from .isa import Register, hexs


def _off(value: int) -> str:
    return f"+0x{value:x}" if value >= 0 else f"-0x{-value:x}"


@dataclass(frozen=True, order=True)
class FieldPath:
    """Chain of byte offsets from ``this``, outermost first.

    ``FieldPath((0x20, 0x68))`` names the slot at offset 0x68 of the object
    whose pointer lives at ``this+0x20`` and renders as ``[this+0x20]+0x68``.
    """
    offsets: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.offsets:
            raise ValueError("field path needs at least one offset")

    def __str__(self) -> str:
        text = "this"
        for n, off in enumerate(self.offsets):
            text = f"{text}{_off(off)}" if n == 0 else f"[{text}]{_off(off)}"
        return text

    def __len__(self) -> int:
        return len(self.offsets)

    def child(self, offset: int) -> "FieldPath":
        return FieldPath(self.offsets + (offset,))

    @classmethod
    def parse(cls, text: str) -> "FieldPath":
        text = text.strip()
        offsets = []
        while text.startswith("["):
            close = text.rindex("]")
            offsets.insert(0, int(text[close + 1:].replace("+", ""), 0))
            text = text[1:close]
        if not text.startswith("this"):
            raise ValueError(f"bad field path {text!r}")
        offsets.insert(0, int(text[4:].replace("+", ""), 0))
        return cls(tuple(offsets))


@dataclass(frozen=True)
class ThisDerived:
    disp: int = 0

    def __str__(self) -> str:
        return f"this{_off(self.disp)}"


@dataclass(frozen=True)
class FieldContents:
    path: FieldPath

    def __str__(self) -> str:
        return f"[{self.path}]"


@dataclass(frozen=True)
class VtableRef:
    addr: int

    def __str__(self) -> str:
        return f"vtable@{hexs(self.addr)}"


@dataclass(frozen=True)
class StackAddr:
    disp: int

    def __str__(self) -> str:
        return f"rsp{_off(self.disp)}"


@dataclass(frozen=True)
class AllocFresh:
    site: int

    def __str__(self) -> str:
        return f"alloc@{hexs(self.site)}"


@dataclass(frozen=True)
class CallResult:
    """Return value of a direct call that was not analyzed inline."""
    target: int

    def __str__(self) -> str:
        return f"ret({hexs(self.target)})"


@dataclass(frozen=True)
class VtablePtr:
    """Word loaded from offset 0 of an object that has no tracked field path."""
    obj: "AbstractValue"

    def __str__(self) -> str:
        return f"*{self.obj}"


class _Unknown:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Unknown"

    __str__ = __repr__

    def __reduce__(self):
        return (_Unknown, ())


UNKNOWN = _Unknown()

AbstractValue = Union[ThisDerived, FieldContents, VtableRef, StackAddr, AllocFresh,
                      CallResult, VtablePtr, _Unknown]
LockId = Union[ThisDerived, FieldContents]

THIS = ThisDerived(0)


def is_lock_id(value: AbstractValue) -> bool:
    return isinstance(value, (ThisDerived, FieldContents))


def _vkey(value) -> str:
    return f"{type(value).__name__}:{value}"


@dataclass(frozen=True, eq=False)
class MachineState:
    """Registers, stack slots and lock counts.  Treated as immutable.

    Absent registers and slots are Unknown; zero lock counts are dropped so
    equality is structural.
    """
    regs: Mapping[Register, AbstractValue] = field(default_factory=dict)
    stack: Mapping[int, AbstractValue] = field(default_factory=dict)
    locks: Mapping[LockId, int] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MachineState):
            return NotImplemented
        return (dict(self.regs) == dict(other.regs) and dict(self.stack) == dict(other.stack)
                and dict(self.locks) == dict(other.locks))

    def __hash__(self) -> int:
        return hash(self.key())

    def key(self) -> tuple:
        return (tuple(sorted((r.value, _vkey(v)) for r, v in self.regs.items())),
                tuple(sorted((d, _vkey(v)) for d, v in self.stack.items())),
                tuple(sorted((_vkey(k), n) for k, n in self.locks.items())))

    def get(self, reg: Register) -> AbstractValue:
        return self.regs.get(reg, UNKNOWN)

    def slot(self, disp: int) -> AbstractValue:
        return self.stack.get(disp, UNKNOWN)

    def lock_count(self, lock: LockId) -> int:
        return self.locks.get(lock, 0)

    def lockset(self) -> frozenset:
        return frozenset(k for k, n in self.locks.items() if n >= 1)

    def set_reg(self, reg: Register, value: AbstractValue) -> "MachineState":
        regs = dict(self.regs)
        if value is UNKNOWN:
            regs.pop(reg, None)
        else:
            regs[reg] = value
        return MachineState(regs, self.stack, self.locks)

    def set_regs(self, values: Mapping[Register, AbstractValue]) -> "MachineState":
        state = self
        for reg, value in values.items():
            state = state.set_reg(reg, value)
        return state

    def set_slot(self, disp: int, value: AbstractValue) -> "MachineState":
        stack = dict(self.stack)
        if value is UNKNOWN:
            stack.pop(disp, None)
        else:
            stack[disp] = value
        return MachineState(self.regs, stack, self.locks)

    def adjust_lock(self, lock: LockId, delta: int, cap: int) -> "MachineState":
        locks = dict(self.locks)
        count = min(cap, max(0, locks.get(lock, 0) + delta))
        if count:
            locks[lock] = count
        else:
            locks.pop(lock, None)
        return MachineState(self.regs, self.stack, locks)

    def with_locks(self, locks: Mapping[LockId, int]) -> "MachineState":
        return MachineState(self.regs, self.stack, {k: n for k, n in locks.items() if n})

    def with_stack(self, stack: Mapping[int, AbstractValue]) -> "MachineState":
        return MachineState(self.regs, dict(stack), self.locks)

    def __repr__(self) -> str:
        regs = ", ".join(f"{r}={v}" for r, v in sorted(self.regs.items(), key=lambda kv: kv[0].value))
        stack = ", ".join(f"[rsp{_off(d)}]={v}" for d, v in sorted(self.stack.items()))
        locks = ", ".join(f"{k}:{n}" for k, n in sorted(self.locks.items(), key=lambda kv: str(kv[0])))
        return f"MachineState({regs} | {stack} | {locks})"


def entry_state() -> MachineState:
    return MachineState({Register.RCX: THIS})


def merge_states(a: MachineState, b: MachineState) -> MachineState:
    """Join two states: disagreeing values become Unknown, lock counts take the minimum."""
    regs = {r: v for r, v in a.regs.items() if b.regs.get(r) == v}
    stack = {d: v for d, v in a.stack.items() if b.stack.get(d) == v}
    locks = {k: min(n, b.locks.get(k, 0)) for k, n in a.locks.items()}
    return MachineState(regs, stack, {k: n for k, n in locks.items() if n})
