"""x86-64 subset instruction model and the textual fixture format.

A fixture is a line-oriented listing::

    .func SetPrintTicket @0x1000
    0x1000: mov rbx, rcx
    0x1003: mov rcx, [rbx+0x50]
    ...
    .data @0x5000
    dq 0x1100, 0x1200
    .sym 0x9000 free_buffer free
    .entry SetPrintTicket

``;`` starts a comment.  ``[rip+disp]`` is resolved against the address of
the instruction carrying it (fixtures have no encoded lengths), so
``0x1000: lea rax, [rip+0x4000]`` refers to 0x5000.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Union


class FixtureError(ValueError):
    """Malformed fixture text.  ``line``/``column`` are 1-based."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.message = message
        self.line = line
        self.column = column
        where = f"{line}:{column}: " if line else ""
        super().__init__(f"{where}{message}")


class AddressNotMapped(KeyError):
    pass


class Register(Enum):
    RAX = "rax"
    RBX = "rbx"
    RCX = "rcx"
    RDX = "rdx"
    RSI = "rsi"
    RDI = "rdi"
    RBP = "rbp"
    RSP = "rsp"
    R8 = "r8"
    R9 = "r9"
    R10 = "r10"
    R11 = "r11"
    R12 = "r12"
    R13 = "r13"
    R14 = "r14"
    R15 = "r15"

    def __str__(self) -> str:
        return self.value


REGISTERS = {r.value: r for r in Register}

# Windows x64 ABI
VOLATILE = frozenset({Register.RAX, Register.RCX, Register.RDX, Register.R8,
                      Register.R9, Register.R10, Register.R11})

MNEMONICS = frozenset({"mov", "lea", "call", "ret", "jmp", "jcc", "cmp", "test",
                       "add", "sub", "xor", "and", "neg", "sbb", "nop"})

# concrete condition codes all collapse to the generic conditional branch
JCC_ALIASES = frozenset({"je", "jne", "jz", "jnz", "ja", "jae", "jb", "jbe", "jg",
                         "jge", "jl", "jle", "js", "jns", "jo", "jno", "jp", "jnp"})

BRANCHES = frozenset({"call", "jmp", "jcc"})
ARITH = frozenset({"add", "sub", "xor", "and", "neg", "sbb"})

_ARITY = {
    "mov": 2, "lea": 2, "cmp": 2, "test": 2, "add": 2, "sub": 2, "xor": 2,
    "and": 2, "sbb": 2, "neg": 1, "call": 1, "jmp": 1, "jcc": 1, "ret": 0, "nop": 0,
}

INT64_MIN, INT64_MAX = -(1 << 63), (1 << 63) - 1
INT32_MIN, INT32_MAX = -(1 << 31), (1 << 31) - 1
UINT64_MAX = (1 << 64) - 1


def hexs(value: int) -> str:
    return f"-0x{-value:x}" if value < 0 else f"0x{value:x}"


@dataclass(frozen=True)
class Reg:
    reg: Register

    def __str__(self) -> str:
        return self.reg.value


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return hexs(self.value)


@dataclass(frozen=True)
class Mem:
    base: Register
    index: Optional[Register] = None
    scale: int = 1
    disp: int = 0

    def __str__(self) -> str:
        text = self.base.value
        if self.index is not None:
            text += f"+{self.index.value}"
            if self.scale != 1:
                text += f"*{self.scale}"
        if self.disp > 0:
            text += f"+0x{self.disp:x}"
        elif self.disp < 0:
            text += f"-0x{-self.disp:x}"
        return f"[{text}]"


@dataclass(frozen=True)
class RipRel:
    """Rip-relative memory operand, already resolved to its absolute target."""
    addr: int

    def render(self, site: int) -> str:
        disp = self.addr - site
        return f"[rip+0x{disp:x}]" if disp >= 0 else f"[rip-0x{-disp:x}]"


Operand = Union[Reg, Imm, Mem, RipRel]


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple = ()

    def __str__(self) -> str:
        ops = ", ".join(o.render(self.address) if isinstance(o, RipRel) else str(o)
                        for o in self.operands)
        return f"0x{self.address:x}: {self.mnemonic}" + (f" {ops}" if ops else "")

    @property
    def direct_target(self) -> Optional[int]:
        if self.mnemonic in BRANCHES and isinstance(self.operands[0], Imm):
            return self.operands[0].value
        return None


class SymbolTag(Enum):
    PLAIN = "plain"
    LOCK_ACQUIRE = "lock_acquire"
    LOCK_RELEASE = "lock_release"
    FREE = "free"
    ALLOC = "alloc"


@dataclass(frozen=True)
class SymbolEntry:
    address: int
    name: str
    tag: SymbolTag = SymbolTag.PLAIN


@dataclass(frozen=True)
class Function:
    name: str
    entry: int
    instructions: tuple[Instruction, ...] = ()

    @property
    def end(self) -> int:
        """Exclusive upper bound of the address range."""
        return (self.instructions[-1].address if self.instructions else self.entry) + 1


@dataclass
class BinaryImage:
    functions: dict[str, Function] = field(default_factory=dict)
    data: dict[int, int] = field(default_factory=dict)
    symbols: tuple[SymbolEntry, ...] = ()
    entries: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self._by_entry = {f.entry: f for f in self.functions.values()}
        self._sym = {s.address: s for s in self.symbols}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryImage):
            return NotImplemented
        return (self.functions == other.functions and self.data == other.data
                and self.symbols == other.symbols and self.entries == other.entries)

    def function_at(self, addr: int) -> Optional[Function]:
        return self._by_entry.get(addr)

    def is_function_entry(self, addr: int) -> bool:
        return addr in self._by_entry

    def symbol_at(self, addr: int) -> Optional[SymbolEntry]:
        return self._sym.get(addr)

    def read_data_word(self, addr: int) -> int:
        return read_data_word(self, addr)

    def name_of(self, addr: int) -> Optional[str]:
        sym = self._sym.get(addr)
        if sym is not None:
            return sym.name
        func = self._by_entry.get(addr)
        return func.name if func else None


def read_data_word(image: BinaryImage, addr: int) -> int:
    try:
        return image.data[addr]
    except KeyError:
        raise AddressNotMapped(f"address 0x{addr:x} is not mapped") from None


def symbol_at(image: BinaryImage, addr: int) -> Optional[SymbolEntry]:
    return image.symbol_at(addr)


def with_symbol_tags(image: BinaryImage, defaults: dict[str, str | SymbolTag]) -> BinaryImage:
    """Tag plain symbols by name from ``defaults``; explicit fixture tags win."""
    symbols = []
    for sym in image.symbols:
        if sym.tag is SymbolTag.PLAIN and sym.name in defaults:
            sym = SymbolEntry(sym.address, sym.name, SymbolTag(defaults[sym.name]))
        symbols.append(sym)
    return BinaryImage(dict(image.functions), dict(image.data), tuple(symbols), image.entries)


# -- parsing ---------------------------------------------------------------

_NUM = r"-?(?:0x[0-9a-fA-F]+|\d+)"
_FUNC_RE = re.compile(r"^\.func\s+(\S+)\s+@(\S+)$")
_DATA_RE = re.compile(r"^\.data\s+@(\S+)$")
_SYM_RE = re.compile(r"^\.sym\s+(\S+)\s+(\S+)(?:\s+(\S+))?$")
_ENTRY_RE = re.compile(r"^\.entry\s+(\S+)$")
_INSN_RE = re.compile(r"^(\S+):\s*([A-Za-z]+)\s*(.*)$")


def _int(text: str, line: int, col: int) -> int:
    if not re.fullmatch(_NUM, text):
        raise FixtureError(f"bad number {text!r}", line, col)
    return int(text, 0)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.functions: dict[str, Function] = {}
        self.data: dict[int, int] = {}
        self.symbols: dict[int, SymbolEntry] = {}
        self.entries: list[tuple[str, int]] = []
        self._func: Optional[tuple[str, int, list[Instruction], int]] = None
        self._data_cursor: Optional[int] = None
        self._lines: dict[str, int] = {}

    def parse(self) -> BinaryImage:
        for lineno, raw in enumerate(self.text.splitlines(), 1):
            line = raw.split(";", 1)[0].rstrip()
            stripped = line.strip()
            if not stripped:
                continue
            col = len(line) - len(line.lstrip()) + 1
            self._line(stripped, lineno, col, line)
        self._close_func()
        self._check_overlap()
        entries = []
        for name, lineno in self.entries:
            if name not in self.functions:
                raise FixtureError(f"entry references missing function {name!r}", lineno, 1)
            if name not in entries:
                entries.append(name)
        funcs = dict(sorted(self.functions.items(), key=lambda kv: kv[1].entry))
        syms = tuple(sorted(self.symbols.values(), key=lambda s: s.address))
        return BinaryImage(funcs, dict(sorted(self.data.items())), syms, tuple(entries))

    def _line(self, text: str, lineno: int, col: int, full: str) -> None:
        if text.startswith(".func"):
            m = _FUNC_RE.match(text)
            if not m:
                raise FixtureError("expected '.func <name> @<hex>'", lineno, col)
            self._close_func()
            self._data_cursor = None
            name = m.group(1)
            entry = _int(m.group(2), lineno, full.index("@") + 2)
            if name in self.functions:
                raise FixtureError(f"duplicate function name {name!r}", lineno, col)
            self._func = (name, entry, [], lineno)
        elif text.startswith(".data"):
            m = _DATA_RE.match(text)
            if not m:
                raise FixtureError("expected '.data @<hex>'", lineno, col)
            self._close_func()
            addr = _int(m.group(1), lineno, full.index("@") + 2)
            if addr % 8:
                raise FixtureError(f"data address 0x{addr:x} is not 8-aligned", lineno, col)
            self._data_cursor = addr
        elif text.startswith("dq"):
            if self._data_cursor is None:
                raise FixtureError("'dq' outside a .data run", lineno, col)
            body = text[2:]
            for tok in (t.strip() for t in body.split(",")):
                tcol = full.index(tok, col) + 1 if tok else col
                word = _int(tok, lineno, tcol)
                if not 0 <= word <= UINT64_MAX:
                    raise FixtureError(f"data word {tok} out of range", lineno, tcol)
                if self._data_cursor in self.data:
                    raise FixtureError(f"data address 0x{self._data_cursor:x} defined twice",
                                       lineno, tcol)
                self.data[self._data_cursor] = word
                self._data_cursor += 8
        elif text.startswith(".sym"):
            m = _SYM_RE.match(text)
            if not m:
                raise FixtureError("expected '.sym <hex> <name> [<tag>]'", lineno, col)
            addr = _int(m.group(1), lineno, col + 5)
            tag_text = m.group(3) or "plain"
            try:
                tag = SymbolTag(tag_text.strip("[]"))
            except ValueError:
                raise FixtureError(f"unknown symbol tag {tag_text!r}", lineno,
                                   full.rindex(tag_text) + 1) from None
            if addr in self.symbols:
                raise FixtureError(f"second symbol at 0x{addr:x}", lineno, col)
            self.symbols[addr] = SymbolEntry(addr, m.group(2), tag)
        elif text.startswith(".entry"):
            m = _ENTRY_RE.match(text)
            if not m:
                raise FixtureError("expected '.entry <func-name>'", lineno, col)
            self.entries.append((m.group(1), lineno))
        elif text.startswith("."):
            raise FixtureError(f"unknown directive {text.split()[0]!r}", lineno, col)
        else:
            self._instruction(text, lineno, col, full)

    def _instruction(self, text: str, lineno: int, col: int, full: str) -> None:
        m = _INSN_RE.match(text)
        if not m:
            raise FixtureError("expected '<hex>: <mnemonic> <operands>'", lineno, col)
        if self._func is None:
            raise FixtureError("instruction outside a .func block", lineno, col)
        addr = _int(m.group(1), lineno, col)
        mnem = m.group(2).lower()
        mcol = full.index(m.group(2), col - 1) + 1
        if mnem in JCC_ALIASES:
            mnem = "jcc"
        if mnem not in MNEMONICS:
            raise FixtureError(f"unknown mnemonic {m.group(2)!r}", lineno, mcol)
        ops_text = m.group(3).strip()
        ops = []
        if ops_text:
            pos = full.index(ops_text, mcol - 1)
            for tok in _split_operands(ops_text):
                tcol = full.index(tok, pos) + 1
                pos = tcol - 1 + len(tok)
                ops.append(_operand(tok, addr, lineno, tcol))
        _check_shape(mnem, ops, lineno, mcol)
        name, entry, insns, _ = self._func
        if not insns and addr != entry:
            raise FixtureError(f"first instruction 0x{addr:x} is not the function entry "
                               f"0x{entry:x}", lineno, col)
        if insns and addr <= insns[-1].address:
            raise FixtureError("instruction addresses must strictly increase", lineno, col)
        insns.append(Instruction(addr, mnem, tuple(ops)))

    def _close_func(self) -> None:
        if self._func is None:
            return
        name, entry, insns, lineno = self._func
        self._func = None
        self.functions[name] = Function(name, entry, tuple(insns))
        self._lines[name] = lineno

    def _check_overlap(self) -> None:
        funcs = sorted(self.functions.values(), key=lambda f: f.entry)
        for prev, cur in zip(funcs, funcs[1:]):
            if cur.entry == prev.entry:
                raise FixtureError(f"functions {prev.name!r} and {cur.name!r} share address "
                                   f"0x{cur.entry:x}", self._lines[cur.name], 1)
            if cur.entry < prev.end:
                raise FixtureError(f"function {cur.name!r} overlaps {prev.name!r}",
                                   self._lines[cur.name], 1)


def _split_operands(text: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    parts.append(cur.strip())
    return parts


def _register(text: str, lineno: int, col: int) -> Register:
    try:
        return REGISTERS[text.lower()]
    except KeyError:
        raise FixtureError(f"unknown register {text!r}", lineno, col) from None


def _operand(tok: str, site: int, lineno: int, col: int) -> Operand:
    if not tok:
        raise FixtureError("empty operand", lineno, col)
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise FixtureError(f"unterminated memory operand {tok!r}", lineno, col)
        return _memory(tok[1:-1].replace(" ", ""), site, lineno, col + 1)
    if re.fullmatch(_NUM, tok):
        value = int(tok, 0)
        if not INT64_MIN <= value <= UINT64_MAX:
            raise FixtureError(f"immediate {tok} out of range", lineno, col)
        if value > INT64_MAX:
            value -= 1 << 64
        return Imm(value)
    if re.fullmatch(r"[A-Za-z][A-Za-z0-9]*", tok):
        return Reg(_register(tok, lineno, col))
    raise FixtureError(f"bad operand {tok!r}", lineno, col)


def _memory(body: str, site: int, lineno: int, col: int) -> Operand:
    terms = re.findall(r"[+-]?[^+-]+", body)
    if not terms:
        raise FixtureError("empty memory operand", lineno, col)
    base: Optional[Register] = None
    index: Optional[Register] = None
    scale, disp, rip = 1, 0, False
    for term in terms:
        sign = -1 if term.startswith("-") else 1
        t = term.lstrip("+-")
        if re.fullmatch(_NUM, t):
            disp += sign * int(t, 0)
        elif "*" in t:
            reg_text, _, scale_text = t.partition("*")
            if sign < 0 or index is not None:
                raise FixtureError(f"bad index term {term!r}", lineno, col)
            index = _register(reg_text, lineno, col)
            scale = _int(scale_text, lineno, col)
            if scale not in (1, 2, 4, 8):
                raise FixtureError(f"scale must be 1, 2, 4 or 8, not {scale}", lineno, col)
        elif t.lower() == "rip":
            if sign < 0 or base is not None or rip:
                raise FixtureError("bad rip-relative operand", lineno, col)
            rip = True
        else:
            if sign < 0:
                raise FixtureError(f"negated register in {body!r}", lineno, col)
            reg = _register(t, lineno, col)
            if base is None:
                base = reg
            elif index is None:
                index = reg
            else:
                raise FixtureError(f"too many registers in [{body}]", lineno, col)
    if not INT32_MIN <= disp <= INT32_MAX:
        raise FixtureError(f"displacement {disp} exceeds 32 bits", lineno, col)
    if rip:
        if base is not None or index is not None:
            raise FixtureError("rip-relative operand cannot use other registers", lineno, col)
        return RipRel(site + disp)
    if base is None:
        raise FixtureError(f"memory operand [{body}] has no base register", lineno, col)
    if index is Register.RSP:
        raise FixtureError("rsp cannot be an index register", lineno, col)
    return Mem(base, index, scale, disp)


def _check_shape(mnem: str, ops: list, lineno: int, col: int) -> None:
    if len(ops) != _ARITY[mnem]:
        raise FixtureError(f"{mnem} takes {_ARITY[mnem]} operand(s), got {len(ops)}",
                           lineno, col)
    memory = [o for o in ops if isinstance(o, (Mem, RipRel))]
    if len(memory) > 1:
        raise FixtureError(f"{mnem} with two memory operands", lineno, col)
    if mnem == "lea" and not (isinstance(ops[0], Reg) and isinstance(ops[1], (Mem, RipRel))):
        raise FixtureError("lea needs a register and a memory operand", lineno, col)
    if mnem in ARITH | {"mov"} and isinstance(ops[0], Imm):
        raise FixtureError(f"{mnem} destination cannot be an immediate", lineno, col)


def parse_fixture(text: str) -> BinaryImage:
    return _Parser(text).parse()


def load_fixture(path) -> BinaryImage:
    with open(path, encoding="utf-8") as fh:
        return parse_fixture(fh.read())


# -- canonical serializer -------------------------------------------------

def _data_runs(data: dict[int, int]) -> Iterable[tuple[int, list[int]]]:
    start, words = None, []
    for addr in sorted(data):
        if start is not None and addr == start + 8 * len(words):
            words.append(data[addr])
            continue
        if start is not None:
            yield start, words
        start, words = addr, [data[addr]]
    if start is not None:
        yield start, words


def serialize(image: BinaryImage) -> str:
    sections = []
    for func in sorted(image.functions.values(), key=lambda f: f.entry):
        lines = [f".func {func.name} @0x{func.entry:x}"]
        lines.extend(str(insn) for insn in func.instructions)
        sections.append(lines)
    for start, words in _data_runs(image.data):
        sections.append([f".data @0x{start:x}", "dq " + ", ".join(f"0x{w:x}" for w in words)])
    if image.symbols:
        sections.append([f".sym 0x{s.address:x} {s.name}"
                         + ("" if s.tag is SymbolTag.PLAIN else f" {s.tag.value}")
                         for s in image.symbols])
    if image.entries:
        sections.append([f".entry {name}" for name in image.entries])
    return "\n\n".join("\n".join(lines) for lines in sections) + ("\n" if sections else "")
