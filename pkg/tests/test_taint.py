import json

import pytest

from comracer.domain import (THIS, UNKNOWN, AllocFresh, FieldContents, FieldPath, MachineState,
                             StackAddr, ThisDerived, VtableRef, entry_state)
from comracer.isa import Register, parse_fixture, with_symbol_tags
from comracer.symbols import DEFAULT_TAGS
from comracer.taint import (AccessKind, AnalysisError, AnalysisOpts, analyze_method, transfer)
from conftest import tagged_image

R = Register
E5 = AnalysisOpts(rr_filter=True, deref_recursion=True)


def image_of(text: str):
    return with_symbol_tags(parse_fixture(text), DEFAULT_TAGS)


def run(state, lines, image=None, opts=None):
    """Feed instruction lines through transfer, collecting emissions."""
    body = ".func f @0x1000\n" + "\n".join(f"0x{0x1000 + 4 * i:x}: {l}" for i, l in enumerate(lines))
    img = image or image_of(body + "\n.sym 0x9000 free\n.sym 0x9010 malloc\n"
                            ".sym 0x9100 EnterCriticalSection\n.sym 0x9110 LeaveCriticalSection\n"
                            ".data @0x6000\ndq 0x1000\n")
    accesses, facts = [], []
    for insn in img.functions["f"].instructions:
        state, acc, fac = transfer(state, insn, img, {}, opts or AnalysisOpts(), "f")
        accesses += acc
        facts += fac
    return state, accesses, facts


def test_this_copied_to_callee_saved_register():
    state, acc, _ = run(entry_state(), ["mov rdi, rcx"])
    assert state.get(R.RDI) == THIS and acc == []


def test_stack_round_trip():
    state, _, _ = run(entry_state(), ["mov rbx, rcx", "mov [rsp+0x20], rbx", "mov r12, [rsp+0x20]"])
    assert state.get(R.R12) == THIS
    off, _, _ = run(entry_state(), ["mov rbx, rcx", "mov [rsp+0x20], rbx", "mov r12, [rsp+0x20]"],
                    opts=AnalysisOpts(track_spills=False))
    assert off.get(R.R12) is UNKNOWN


def test_set_print_ticket_emissions_in_order():
    _, acc, _ = run(entry_state(), ["mov rbx, rcx", "mov rcx, [rbx+0x50]", "call 0x9000",
                                    "call 0x9010", "mov [rbx+0x50], rax"])
    assert [(a.kind, a.path) for a in acc] == [(AccessKind.READ, FieldPath((0x50,))),
                                               (AccessKind.FREE, FieldPath((0x50,))),
                                               (AccessKind.WRITE, FieldPath((0x50,)))]


def test_lea_and_data_addresses():
    state, _, _ = run(entry_state(), ["lea rax, [rcx-0x8]", "lea rdx, [rax+0x18]", "lea rsi, [rsp+0x10]",
                                      "mov rdi, 0x6000", "lea r8, [rip+0x4ff0]", "mov r9, 0x7000"])
    assert state.get(R.RAX) == ThisDerived(-8)
    assert state.get(R.RDX) == ThisDerived(0x10)
    assert state.get(R.RSI) == StackAddr(0x10)
    assert state.get(R.RDI) == VtableRef(0x6000)
    assert state.get(R.R8) == VtableRef(0x6000)
    assert state.get(R.R9) is UNKNOWN


def test_field_load_through_adjusted_this():
    state, acc, _ = run(entry_state(), ["lea rax, [rcx+0x20]", "mov rdx, [rax+0x8]"])
    assert acc[0].path == FieldPath((0x28,))
    assert state.get(R.RDX) == FieldContents(FieldPath((0x28,)))


def test_arithmetic_kills_destination():
    state, acc, _ = run(entry_state(), ["mov rbx, rcx", "add rbx, 0x8", "xor rax, rax", "add [rcx+0x10], rdx"])
    assert state.get(R.RBX) is UNKNOWN and state.get(R.RAX) is UNKNOWN
    assert [a.kind for a in acc] == [AccessKind.READ, AccessKind.WRITE]


def test_unknown_payload_still_counts_as_write():
    _, acc, _ = run(entry_state(), ["mov [rcx+0x18], rdx"])
    assert [(a.kind, a.path) for a in acc] == [(AccessKind.WRITE, FieldPath((0x18,)))]


def test_free_and_alloc_semantics():
    state, acc, _ = run(entry_state(), ["call 0x9010", "mov rcx, rax", "call 0x9000"])
    assert acc == []  # freeing a fresh allocation touches no field
    assert state.get(R.RAX) is UNKNOWN
    state, _, _ = run(entry_state(), ["call 0x9010"])
    assert state.get(R.RAX) == AllocFresh(0x1000)


def test_calls_clobber_volatile_registers_only():
    start = MachineState({R.RCX: THIS, R.RBX: THIS, R.RDX: THIS, R.R12: THIS})
    state, _, _ = run(start, ["call 0x9000"])
    assert state.get(R.RBX) == THIS and state.get(R.R12) == THIS
    assert state.get(R.RDX) is UNKNOWN and state.get(R.RCX) is UNKNOWN


def test_lock_counting():
    state, _, _ = run(entry_state(), ["mov rbx, rcx", "lea rcx, [rbx+0x30]", "call 0x9100"])
    assert state.lockset() == {ThisDerived(0x30)}
    state, _, _ = run(state, ["lea rcx, [rbx+0x30]", "call 0x9110"])
    assert state.lockset() == frozenset()


def test_vtable_store_fact():
    _, _, facts = run(entry_state(), ["mov rdi, rcx", "lea rax, [rip+0x4ffc]", "mov [rdi], rax"])
    assert len(facts) == 1
    assert (facts[0].object, facts[0].field_offset, facts[0].vtable_addr) == (THIS, 0, 0x6000)


LOCKED_READ = """
.func Read @0x1000
0x1000: mov rbx, rcx
0x1003: lea rcx, [rbx+0x30]
0x1007: call 0x9100
0x100c: mov rax, [rbx+0x10]
0x1010: lea rcx, [rbx+0x30]
0x1014: call 0x9110
0x1019: ret
.sym 0x9100 EnterCriticalSection
.sym 0x9110 LeaveCriticalSection
"""


def test_read_under_lock():
    summary = analyze_method(image_of(LOCKED_READ), "Read")
    assert [(a.kind, str(a.path), a.lockset) for a in summary.accesses] == [
        (AccessKind.READ, "this+0x10", frozenset({ThisDerived(0x30)}))]


def test_lock_on_one_branch_gives_no_protection():
    summary = analyze_method(tagged_image("lock_one_branch.fx"), "Update")
    (write,) = summary.accesses
    assert write.kind is AccessKind.WRITE and write.lockset == frozenset()
    summary = analyze_method(tagged_image("lock_both_branches.fx"), "Update")
    assert summary.accesses[0].lockset == {ThisDerived(0x30)}


def test_sub_object_remapping():
    image = tagged_image("subobject_e5.fx")
    summary = analyze_method(image, "Outer_Set", {}, E5)
    paths = {(a.kind, str(a.path)) for a in summary.accesses}
    assert (AccessKind.WRITE, "[this+0x20]+0x68") in paths
    base = analyze_method(image, "Outer_Set", {}, AnalysisOpts())
    assert all(len(a.path) == 1 for a in base.accesses)


def test_depth_limit_truncates_with_diagnostic():
    text = """.func Outer @0x1000
0x1000: mov rcx, [rcx+0x20]
0x1004: call 0x2000
0x1009: ret
.func Mid @0x2000
0x2000: mov rcx, [rcx+0x30]
0x2004: call 0x3000
0x2009: ret
.func Leaf @0x3000
0x3000: mov rax, [rcx+0x8]
0x3004: ret
"""
    image = image_of(text)
    deep = analyze_method(image, "Outer", {}, AnalysisOpts(deref_recursion=True, depth=3))
    assert "[[this+0x20]+0x30]+0x8" in {str(a.path) for a in deep.accesses}
    capped = analyze_method(image, "Outer", {}, E5)
    assert max(len(a.path) for a in capped.accesses) == 2
    assert any("depth limit" in d for d in capped.diagnostics)


def test_member_call_and_recursion_cut():
    summary = analyze_method(tagged_image("member_calls.fx"), "Reset")
    kinds = [(a.kind.value, str(a.path)) for a in summary.accesses]
    assert kinds == [("read", "this+0x40"), ("free", "this+0x40"), ("write", "this+0x40"),
                     ("read", "this+0x48")]
    assert any("recursive call to Walk cut" in d for d in summary.diagnostics)


def test_unknown_lock_identity_is_ignored():
    text = """.func f @0x1000
0x1000: mov rbx, rcx
0x1003: mov rcx, rdx
0x1006: call 0x9100
0x100b: mov rax, [rbx+0x10]
0x100f: ret
.sym 0x9100 EnterCriticalSection
"""
    summary = analyze_method(image_of(text), "f")
    assert summary.accesses[0].lockset == frozenset()
    assert any("unknown lock identity" in d for d in summary.diagnostics)


def test_branch_free_adjustment_loses_attribution():
    for name in ("produce_adjust.fx", "produce_direct.fx"):
        summary = analyze_method(tagged_image(name), "Produce", {}, E5)
        assert summary.accesses == [], name


def test_loop_updates_are_bounded():
    text = """.func Spin @0x1000
0x1000: mov rbx, rcx
0x1003: lea rcx, [rbx+0x30]
0x1007: call 0x9100
0x100c: mov rax, [rbx+0x10]
0x1010: test rax, rax
0x1013: jne 0x1003
0x1015: ret
.sym 0x9100 EnterCriticalSection
"""
    opts = AnalysisOpts(lock_cap=4)
    summary = analyze_method(image_of(text), "Spin", {}, opts)
    # one lock identity, capped counts, plus the register agreement height
    assert summary.max_block_updates <= (opts.lock_cap + 1) * 1 + 16
    assert summary.accesses[0].lockset == {ThisDerived(0x30)}


def test_missing_method():
    with pytest.raises(AnalysisError):
        analyze_method(image_of(LOCKED_READ), "Nope")


ALL_FIXTURE_METHODS = [
    ("set_print_ticket.fx", "SetPrintTicket"), ("set_print_ticket_guarded.fx", "SetPrintTicket"),
    ("setter_getter_c0.fx", "put_Source"), ("setter_getter_c0.fx", "get_Source"),
    ("lock_one_branch.fx", "Update"), ("lock_one_branch.fx", "Query"),
    ("locks_distinct.fx", "Reader"), ("subobject_e5.fx", "Outer_Set"), ("member_calls.fx", "Reset"),
]


@pytest.mark.parametrize("name, method", ALL_FIXTURE_METHODS)
@pytest.mark.parametrize("opts", [AnalysisOpts(), E5], ids=["base", "e5"])
def test_summary_invariants(name, method, opts):
    image = tagged_image(name)
    summary = analyze_method(image, method, {}, opts)
    again = analyze_method(image, method, {}, opts)
    assert json.dumps(summary.to_json()) == json.dumps(again.to_json())
    sites = [a.site for a in summary.accesses]
    assert sites == sorted(sites)
    keys = [(a.path, a.kind, a.site) for a in summary.accesses]
    assert len(keys) == len(set(keys))
    for acc in summary.accesses:
        assert acc.lockset <= summary.lock_ids  # no phantom locks
        if not opts.deref_recursion:
            assert len(acc.path) == 1
        if acc.kind is AccessKind.FREE:
            insn = next(i for f in image.functions.values() for i in f.instructions if i.address == acc.site)
            assert insn.mnemonic == "call"
