import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comracer.isa import (AddressNotMapped, BinaryImage, FixtureError, Function, Imm, Instruction,
                          Mem, Reg, Register, RipRel, SymbolEntry, SymbolTag, parse_fixture,
                          read_data_word, serialize, symbol_at, with_symbol_tags)
from conftest import fixture_path
from comracer.isa import load_fixture


def test_empty_input_gives_empty_image():
    image = parse_fixture("")
    assert image.functions == {} and image.data == {} and image.symbols == () and image.entries == ()


def test_minimal_function():
    image = parse_fixture(".func f @0x1000\n0x1000: ret\n")
    assert list(image.functions) == ["f"]
    assert image.functions["f"].instructions == (Instruction(0x1000, "ret", ()),)


def test_set_print_ticket_field_operand():
    image = load_fixture(fixture_path("set_print_ticket.fx"))
    load = image.functions["SetPrintTicket"].instructions[3]
    assert load.mnemonic == "mov"
    assert load.operands[1] == Mem(Register.RBX, disp=80)  # 8 * 10
    assert str(load.operands[1]) == "[rbx+0x50]"


def test_operand_forms():
    text = """.func f @0x1000
0x1000: mov rax, [rbx+rcx*8+0x10]
0x1004: lea rax, [rip+0x1000]
0x1008: mov [rsp+0x20], rbx
0x100c: lea rax, [rcx-0x8]
0x1010: call [rax+0x10]
0x1014: call rax
0x1016: jne 0x1000
0x1018: ret
"""
    insns = parse_fixture(text).functions["f"].instructions
    assert insns[0].operands[1] == Mem(Register.RBX, Register.RCX, 8, 0x10)
    assert insns[1].operands[1] == RipRel(0x2004)
    assert insns[3].operands[1] == Mem(Register.RCX, disp=-8)
    assert insns[4].direct_target is None
    assert insns[5].operands == (Reg(Register.RAX),)
    assert insns[6].mnemonic == "jcc" and insns[6].direct_target == 0x1000


def test_read_data_word():
    image = parse_fixture(".data @0x5000\ndq 0x1100, 0x1200\n")
    assert read_data_word(image, 0x5000) == 0x1100
    assert read_data_word(image, 0x5008) == 0x1200
    with pytest.raises(AddressNotMapped):
        read_data_word(image, 0x5010)
    with pytest.raises(AddressNotMapped):
        parse_fixture(".data @0x5000\ndq 0x1100\n").read_data_word(0x5008)


def test_symbol_at():
    image = parse_fixture(".sym 0x2000 EnterCS lock_acquire\n.sym 0x3000 Other\n")
    assert symbol_at(image, 0x2000) == SymbolEntry(0x2000, "EnterCS", SymbolTag.LOCK_ACQUIRE)
    assert symbol_at(image, 0x2001) is None
    assert symbol_at(image, 0x3000).name == "Other"


def test_default_tags_do_not_override_fixture_tags():
    image = parse_fixture(".sym 0x2000 free plain\n.sym 0x3000 malloc\n.sym 0x4000 mine lock_acquire\n")
    tagged = with_symbol_tags(image, {"free": "free", "malloc": "alloc", "mine": "free"})
    assert tagged.symbol_at(0x2000).tag is SymbolTag.FREE  # plain is the default spelling
    assert tagged.symbol_at(0x3000).tag is SymbolTag.ALLOC
    assert tagged.symbol_at(0x4000).tag is SymbolTag.LOCK_ACQUIRE


@pytest.mark.parametrize("text, line, fragment", [
    (".func f @0x1000\n0x1000: frob rax\n", 2, "mnemonic"),
    (".func f @0x1000\n0x1000: mov eax, rbx\n", 2, "register"),
    (".func f @0x1000\n0x1000: ret\n.func f @0x2000\n0x2000: ret\n", 3, "duplicate"),
    (".func f @0x1000\n0x1000: ret\n.func g @0x1000\n0x1000: ret\n", 3, "share"),
    (".func f @0x1000\n0x1000: nop\n0x1008: ret\n.func g @0x1004\n0x1004: ret\n", 0, "overlap"),
    (".entry nope\n", 1, "missing"),
    (".data @0x5004\ndq 0x1\n", 1, "align"),
    (".func f @0x1000\n0x1004: ret\n", 2, "entry"),
    (".func f @0x1000\n0x1000: nop\n0x1000: ret\n", 3, "increas"),
    (".func f @0x1000\n0x1000: mov rax, [rbx+rcx*3]\n", 2, "scale"),
    (".func f @0x1000\n0x1000: mov [rax], [rbx]\n", 2, "memory"),
    (".func f @0x1000\n0x1000: mov 0x1, rax\n", 2, ""),
    (".bogus\n", 1, "directive"),
    ("dq 0x1\n", 1, ""),
])
def test_parse_errors_carry_location(text, line, fragment):
    with pytest.raises(FixtureError) as err:
        parse_fixture(text)
    if line:
        assert err.value.line == line
    assert err.value.column >= 1 or err.value.line == 0
    assert fragment.lower() in str(err.value).lower()


def test_all_fixtures_round_trip(fixtures_dir):
    for path in sorted(fixtures_dir.glob("*.fx")):
        image = load_fixture(path)
        text = serialize(image)
        assert parse_fixture(text) == image, path.name
        assert serialize(parse_fixture(text)) == text


def test_rip_operands_are_absolute_after_parse(fixtures_dir):
    image = load_fixture(fixtures_dir / "vtable_m1m2.fx")
    lea = image.functions["Worker_ctor"].instructions[1]
    assert lea.operands[1] == RipRel(0x6000)


# -- round-trip property ----------------------------------------------------------

_GP = [r for r in Register if r is not Register.RSP]
regs = st.sampled_from(_GP)
disps = st.integers(-2**31, 2**31 - 1)


@st.composite
def mems(draw):
    base = draw(st.sampled_from(list(Register)))
    if draw(st.booleans()):
        return Mem(base, None, 1, draw(disps))
    return Mem(base, draw(regs), draw(st.sampled_from([1, 2, 4, 8])), draw(disps))


@st.composite
def instructions(draw, addr):
    kind = draw(st.sampled_from(["mov_rr", "mov_rm", "mov_mr", "mov_ri", "lea", "lea_rip", "arith",
                                 "neg", "call", "callm", "ret", "nop", "jcc", "test"]))
    r1, r2 = draw(regs), draw(regs)
    imm = Imm(draw(st.integers(-2**63, 2**63 - 1)))
    ops = {
        "mov_rr": ("mov", (Reg(r1), Reg(r2))),
        "mov_rm": ("mov", (Reg(r1), draw(mems()))),
        "mov_mr": ("mov", (draw(mems()), Reg(r2))),
        "mov_ri": ("mov", (Reg(r1), imm)),
        "lea": ("lea", (Reg(r1), draw(mems()))),
        "lea_rip": ("lea", (Reg(r1), RipRel(addr + draw(st.integers(-2**20, 2**20))))),
        "arith": (draw(st.sampled_from(["add", "sub", "xor", "and", "sbb", "cmp"])), (Reg(r1), Reg(r2))),
        "neg": ("neg", (Reg(r1),)),
        "call": ("call", (Imm(draw(st.integers(0, 2**40))),)),
        "callm": ("call", (draw(mems()),)),
        "ret": ("ret", ()),
        "nop": ("nop", ()),
        "jcc": ("jcc", (Imm(draw(st.integers(0, 2**40))),)),
        "test": ("test", (Reg(r1), Reg(r2))),
    }[kind]
    return Instruction(addr, *ops)


@st.composite
def images(draw):
    functions = {}
    base = 0x1000
    for n in range(draw(st.integers(0, 3))):
        count = draw(st.integers(1, 6))
        steps = draw(st.lists(st.integers(1, 8), min_size=count, max_size=count))
        addrs, a = [], base
        for s in steps:
            addrs.append(a)
            a += s
        insns = tuple(draw(instructions(x)) for x in addrs)
        functions[f"f{n}"] = Function(f"f{n}", base, insns)
        base = a + 0x100
    data = {}
    for start in draw(st.lists(st.integers(0x100, 0x200), max_size=3, unique=True)):
        for i, w in enumerate(draw(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=3))):
            data[0x10000 + start * 0x40 + 8 * i] = w
    syms = tuple(SymbolEntry(0x90000 + 0x10 * i, f"s{i}", draw(st.sampled_from(list(SymbolTag))))
                 for i in range(draw(st.integers(0, 3))))
    entries = tuple(sorted(draw(st.sets(st.sampled_from(sorted(functions)), max_size=3))
                           if functions else []))
    return BinaryImage(functions, dict(sorted(data.items())), syms, entries)


@settings(max_examples=200, deadline=None)
@given(images())
def test_serialize_parse_round_trip(image):
    text = serialize(image)
    assert parse_fixture(text) == image
    assert serialize(parse_fixture(text)) == text
