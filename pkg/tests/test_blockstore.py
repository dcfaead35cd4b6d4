import hashlib
from collections import defaultdict
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from semanticbbv.asmnorm import normalize, parse_instruction
from semanticbbv.blockstore import (
    BasicBlock, BlockStore, EmptyTrace, IntervalProfile, TraceParseError, cosine, first_seen_ordering,
    load_profiles, save_profiles, segment_trace, slice_intervals, traditional_bbv,
)
from semanticbbv.oracle import PhaseSpec, WorkloadSpec, gen_program, nested_loop_program, trace_program

CONTROL = {"jmp", "je", "jne", "jl", "jge", "call", "ret"}


def recount(trace, interval_len):
    """Independent oracle: per-interval instruction counts keyed by block content hash."""
    blocks = []  # list of lists of (pc, code)
    cur, prev = [], None
    for line in trace:
        pc_hex, code = line.split("\t", 1)
        pc = int(pc_hex, 16)
        if cur and pc != prev + 4:
            blocks.append(cur)
            cur = []
        cur.append(code)
        prev = pc
        if code.split(";")[0].split()[0] in CONTROL:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    out = [defaultdict(int)]
    filled = 0
    for b in blocks:
        texts = [normalize(parse_instruction(c)).text for c in b]
        bid = hashlib.sha1("\n".join(texts).encode()).hexdigest()[:16]
        for _ in b:
            if filled == interval_len:
                out.append(defaultdict(int))
                filled = 0
            out[-1][bid] += 1
            filled += 1
    return [dict(d) for d in out]


def test_nested_loop_has_seven_blocks():
    store = BlockStore()
    list(segment_trace(trace_program(nested_loop_program()), store))
    assert len(store) == 7


def test_block_identity_is_content_hash():
    a = BasicBlock.from_instructions([parse_instruction("add rax, 1"), parse_instruction("ret")])
    b = BasicBlock.from_instructions([parse_instruction("add rax, 99"), parse_instruction("ret")])
    assert a.block_id == b.block_id and a.static_len == 2


def test_control_transfer_must_end_block():
    with pytest.raises(ValueError):
        BasicBlock.from_instructions([parse_instruction("ret"), parse_instruction("nop")])


def test_empty_trace():
    with pytest.raises(EmptyTrace):
        slice_intervals([], 16)


def test_bad_trace_line_offset():
    with pytest.raises(TraceParseError) as exc:
        list(segment_trace(["400000\tnop", "garbage"]))
    assert exc.value.offset == 1


def test_straddling_block_fractional_counts():
    trace = [f"{0x400000 + 4 * i:x}\tnop" for i in range(5)] + ["400014\tret"]
    profiles = slice_intervals(trace, 4)
    assert [p.instr_total for p in profiles] == [4, 2]
    (bid,) = profiles[0].counts
    assert profiles[0].counts[bid] == Fraction(4, 6)
    assert profiles[1].counts[bid] == Fraction(2, 6)
    assert profiles[1].partial and not profiles[0].partial


def _spec(seed, kinds):
    return WorkloadSpec(f"w{seed}", seed, tuple(PhaseSpec(k, 700) for k in kinds))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.sampled_from(["compute", "memory_stream", "branchy", "mixed"]),
                                        min_size=1, max_size=3), st.integers(7, 300))
def test_weights_match_independent_recount(seed, kinds, interval_len):
    trace = trace_program(gen_program(_spec(seed, kinds)), seed)
    store = BlockStore()
    profiles = slice_intervals(trace, interval_len, "p", store)
    expected = recount(trace, interval_len)
    assert [p.weights(store) for p in profiles] == expected
    assert all(sum(p.weights(store).values()) == p.instr_total for p in profiles)
    assert sum(p.instr_total for p in profiles) == len(trace)


def test_profiles_roundtrip(tmp_path):
    trace = trace_program(nested_loop_program())
    store = BlockStore()
    profiles = slice_intervals(trace, 10, "p", store)
    profiles[0].cpi_true = 1.25
    save_profiles(profiles, tmp_path / "p.jsonl")
    assert load_profiles(tmp_path / "p.jsonl") == profiles
    assert BlockStore.loads(store.dumps()).dumps() == store.dumps()


def test_store_rejects_tampered_record():
    trace = trace_program(nested_loop_program())
    store = BlockStore()
    list(segment_trace(trace, store))
    text = store.dumps().replace("inc", "dec", 1)
    with pytest.raises(ValueError):
        BlockStore.loads(text)


def test_traditional_bbv_ordering_and_l1():
    store = BlockStore()
    profiles = slice_intervals(trace_program(nested_loop_program()), 50, "p", store)
    order = first_seen_ordering(profiles)
    assert sorted(order.values()) == list(range(len(order)))
    bbv = traditional_bbv(profiles[0], store, order, normalize_l1=True)
    assert abs(bbv.l1() - 1.0) < 1e-12
    dense = bbv.dense()
    assert dense.shape == (len(order),) and abs(dense.sum() - 1.0) < 1e-12


def test_traditional_weight_example():
    a = BasicBlock.from_instructions([parse_instruction(t) for t in ("add rax, 1", "inc rbx", "ret")])
    b = BasicBlock.from_instructions([parse_instruction(t) for t in ("nop", "jmp L")])
    store = BlockStore()
    store.add(a)
    store.add(b)
    iv = IntervalProfile("p", 0, {a.block_id: Fraction(4), b.block_id: Fraction(1)}, 14)
    assert iv.weights(store) == {a.block_id: 12, b.block_id: 2}


def test_cosine():
    assert cosine({"a": 1.0}, {"a": 3.0}) == pytest.approx(1.0)
    assert cosine({"a": 1.0}, {"b": 3.0}) == 0.0
