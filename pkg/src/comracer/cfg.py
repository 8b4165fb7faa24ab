"""Per-function control-flow graphs and the breadth-first block order."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .isa import Function, Instruction


class TermKind(Enum):
    FALLTHROUGH = "fallthrough"
    JUMP = "jump"
    BRANCH = "branch"
    RETURN = "return"


@dataclass(frozen=True)
class Terminator:
    kind: TermKind
    targets: tuple[int, ...] = ()  # BRANCH: (taken, fallthrough)


@dataclass(frozen=True)
class BasicBlock:
    id: int
    start: int  # index into the function's instruction list
    stop: int
    instructions: tuple[Instruction, ...]
    terminator: Terminator

    @property
    def address(self) -> int:
        return self.instructions[0].address

    @property
    def last_address(self) -> int:
        return self.instructions[-1].address


@dataclass
class Cfg:
    function: str
    blocks: list[BasicBlock]
    entry: int = 0
    successors: dict[int, list[int]] = field(default_factory=dict)
    predecessors: dict[int, list[int]] = field(default_factory=dict)
    flags: dict[int, list[str]] = field(default_factory=dict)
    unreachable: frozenset[int] = frozenset()
    back_edges: frozenset[tuple[int, int]] = frozenset()

    def block_of(self, address: int) -> BasicBlock:
        for block in self.blocks:
            if block.address <= address <= block.last_address:
                return block
        raise KeyError(f"0x{address:x} is not in {self.function}")


def build_cfg(function: Function | Sequence[Instruction], name: str = "") -> Cfg:
    """Split a function into basic blocks.

    Leaders are the entry, every in-function jump target and every
    instruction after a ``jmp``/``jcc``/``ret``.  ``call`` falls through.
    Jumps leaving the function drop their edge and flag the block.
    """
    if isinstance(function, Function):
        name = name or function.name
        insns = list(function.instructions)
    else:
        insns = list(function)
    if not insns:
        return Cfg(name, [])
    index_of = {insn.address: i for i, insn in enumerate(insns)}
    leaders = {0}
    for i, insn in enumerate(insns):
        if insn.mnemonic in ("jmp", "jcc", "ret"):
            if i + 1 < len(insns):
                leaders.add(i + 1)
            target = insn.direct_target
            if insn.mnemonic != "ret" and target in index_of:
                leaders.add(index_of[target])
    starts = sorted(leaders)
    block_at = {start: bid for bid, start in enumerate(starts)}
    flags: dict[int, list[str]] = {}
    blocks = []
    for bid, start in enumerate(starts):
        stop = starts[bid + 1] if bid + 1 < len(starts) else len(insns)
        last = insns[stop - 1]
        nxt = bid + 1 if bid + 1 < len(starts) else None
        target = last.direct_target
        inside = target in index_of
        if last.mnemonic == "ret":
            term = Terminator(TermKind.RETURN)
        elif last.mnemonic == "jmp":
            if inside:
                term = Terminator(TermKind.JUMP, (block_at[index_of[target]],))
            else:
                flags.setdefault(bid, []).append(
                    "indirect jump" if target is None else f"jump out of function to 0x{target:x}")
                term = Terminator(TermKind.RETURN)
        elif last.mnemonic == "jcc" and inside:
            taken = block_at[index_of[target]]
            if nxt is None:
                flags.setdefault(bid, []).append("conditional branch falls off the end")
                term = Terminator(TermKind.JUMP, (taken,))
            else:
                term = Terminator(TermKind.BRANCH, (taken, nxt))
        else:
            if last.mnemonic == "jcc":
                flags.setdefault(bid, []).append(
                    "indirect branch" if target is None else f"branch out of function to 0x{target:x}")
            if nxt is None:
                flags.setdefault(bid, []).append("falls off the end of the function")
                term = Terminator(TermKind.RETURN)
            else:
                term = Terminator(TermKind.FALLTHROUGH, (nxt,))
        blocks.append(BasicBlock(bid, start, stop, tuple(insns[start:stop]), term))

    succs = {b.id: sorted(set(b.terminator.targets)) for b in blocks}
    preds: dict[int, list[int]] = {b.id: [] for b in blocks}
    for src, dsts in succs.items():
        for dst in dsts:
            preds[dst].append(src)
    cfg = Cfg(name, blocks, 0, succs, preds, flags)
    order = bfs_order(cfg)
    reach = set(order)
    cfg.unreachable = frozenset(b.id for b in blocks if b.id not in reach)
    for bid in cfg.unreachable:
        flags.setdefault(bid, []).append("unreachable")
    pos = {bid: i for i, bid in enumerate(order)}
    cfg.back_edges = frozenset((u, v) for u in order for v in succs[u] if pos[v] <= pos[u])
    return cfg


def bfs_order(cfg: Cfg) -> list[int]:
    """Reachable block ids in breadth-first order, ties by ascending id."""
    if not cfg.blocks:
        return []
    seen = {cfg.entry}
    order = []
    queue = deque([cfg.entry])
    while queue:
        bid = queue.popleft()
        order.append(bid)
        for nxt in sorted(cfg.successors[bid]):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return order


def edge_dominates(cfg: Cfg, edge: tuple[int, int], block: int) -> bool:
    """True if every path from the entry to ``block`` passes through ``edge``."""
    if block == cfg.entry:
        return False
    seen = {cfg.entry}
    queue = deque([cfg.entry])
    while queue:
        bid = queue.popleft()
        for nxt in cfg.successors[bid]:
            if (bid, nxt) == edge or nxt in seen:
                continue
            if nxt == block:
                return False
            seen.add(nxt)
            queue.append(nxt)
    return True


def to_dot(cfgs: Sequence[Cfg]) -> str:
    lines = ["digraph cfg {", "  node [shape=box, fontname=monospace];"]
    for n, cfg in enumerate(cfgs):
        lines.append(f"  subgraph cluster_{n} {{")
        lines.append(f'    label="{cfg.function}";')
        for b in cfg.blocks:
            label = f"{b.id}: 0x{b.address:x}-0x{b.last_address:x}"
            style = ", style=dashed" if b.id in cfg.unreachable else ""
            lines.append(f'    "{cfg.function}.{b.id}" [label="{label}"{style}];')
        for src in sorted(cfg.successors):
            for dst in cfg.successors[src]:
                lines.append(f'    "{cfg.function}.{src}" -> "{cfg.function}.{dst}";')
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
