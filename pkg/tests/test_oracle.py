import pytest
from hypothesis import assume, given, settings, strategies as st

from semanticbbv.blockstore import BlockStore, slice_intervals
from semanticbbv.oracle import (
    COMPLEX, PHASE_KINDS, SIMPLE, BudgetInfeasible, PhaseSpec, WorkloadSpec, assemble, cost_breakdown,
    cost_cpi, expected_length, gen_program, make_suite, trace_program,
)
from semanticbbv.oracle.machine import ExecutionError


def lines(codes, start=0x400000):
    return [f"{start + 4 * i:x}\t{c}" for i, c in enumerate(codes)]


def test_all_nop_interval_cpi_is_one():
    assert cost_cpi(lines(["nop"] * 64), 64, SIMPLE) == [1.0]


def test_loads_hitting_one_line_hand_trace():
    trace = lines([f"mov rax, [rbx] ; ea=0x{0x1000 + 8 * (i % 8):x}" for i in range(8)])
    # one cold miss, seven hits; base cycles 8
    assert cost_cpi(trace, 8, SIMPLE) == [(8 + 20) / 8]
    assert cost_cpi(trace, 8, COMPLEX) == [(8 / 2 + 40) / 8]


def test_conflicting_lines_miss_every_time():
    # 64 sets x 64 bytes: addresses 4096 apart share a set
    trace = lines([f"mov rax, [rbx] ; ea=0x{0x1000 + 4096 * (i % 2):x}" for i in range(6)])
    assert cost_breakdown(trace, 6, SIMPLE)[0].misses == 6


def test_branch_predictor_hand_trace():
    # a taken jne at the same pc three times: counter 1 -> mispredict, 2 -> hit, 3 -> hit
    trace = []
    for _ in range(3):
        trace += ["400000\tjne L", "400010\tnop"]
    bd = cost_breakdown(trace, 6, SIMPLE)[0]
    assert bd.mispredicts == 1
    assert bd.cpi(SIMPLE) == (3 * 2 + 3 * 1 + 1 * 3) / 6


def test_state_persists_across_intervals():
    trace = lines(["mov rax, [rbx] ; ea=0x1000"] * 8)
    bds = cost_breakdown(trace, 4, SIMPLE)
    assert [b.misses for b in bds] == [1, 0]


def test_same_spec_same_trace():
    spec = WorkloadSpec("w", 7, (PhaseSpec("mixed", 5000), PhaseSpec("branchy", 5000)))
    assert gen_program(spec) == gen_program(spec)
    assert trace_program(gen_program(spec), 7) == trace_program(gen_program(spec), 7)


def test_single_phase_compute_dominant_block():
    spec = WorkloadSpec("c", 3, (PhaseSpec("compute", 20000),))
    trace = trace_program(gen_program(spec), 3)
    store = BlockStore()
    (iv,) = slice_intervals(trace, len(trace), "c", store)
    w = iv.weights(store)
    assert max(w.values()) / sum(w.values()) >= 0.9


def test_random_costlier_than_stream():
    cpis = {}
    for kind in ("memory_stream", "memory_random"):
        trace = trace_program(gen_program(WorkloadSpec(kind, 1, (PhaseSpec(kind, 40000),))), 1)
        cpis[kind] = sum(cost_cpi(trace, len(trace), SIMPLE))
    assert cpis["memory_random"] > cpis["memory_stream"]


def test_warmup_monotonicity():
    trace = trace_program(gen_program(WorkloadSpec("s", 2, (PhaseSpec("memory_stream", 40000, 4096),))), 2)
    cpis = cost_cpi(trace, 4096, SIMPLE)
    assert all(c <= cpis[0] for c in cpis[1:-1])


def test_model_separation_on_compute():
    trace = trace_program(gen_program(WorkloadSpec("c", 1, (PhaseSpec("compute", 8192),))), 1)
    assert cost_cpi(trace, 4096, SIMPLE)[0] != cost_cpi(trace, 4096, COMPLEX)[0]


def test_cpi_lower_bound_over_suite():
    for spec in make_suite(4, 11, 2048):
        trace = trace_program(gen_program(spec), spec.seed)
        for model in (SIMPLE, COMPLEX):
            assert min(cost_cpi(trace, 2048, model)) >= model.min_cpi


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1 << 20), st.lists(st.tuples(st.sampled_from(PHASE_KINDS), st.integers(2000, 30000)),
                                         min_size=1, max_size=5))
def test_budget_within_one_percent(seed, plan):
    spec = WorkloadSpec("h", seed, tuple(PhaseSpec(k, n) for k, n in plan))
    try:
        text = gen_program(spec)
    except BudgetInfeasible:
        assume(False)
    n = len(trace_program(text, seed))
    assert n == expected_length(spec)
    assert abs(n - spec.budget) <= 0.01 * spec.budget


def test_budget_infeasible():
    with pytest.raises(BudgetInfeasible):
        gen_program(WorkloadSpec("x", 0, (PhaseSpec("compute", 5),)))
    with pytest.raises(BudgetInfeasible):
        gen_program(WorkloadSpec("x", 0, ()))


def test_undefined_label_rejected():
    with pytest.raises(ValueError):
        assemble("jmp nowhere\n")


def test_workload_roundtrip():
    spec = make_suite(2, 5)[0]
    assert WorkloadSpec.from_dict(spec.to_dict()) == spec


def test_step_limit():
    from semanticbbv.oracle.machine import interpret
    prog = assemble("top:\n    jmp top\n")
    with pytest.raises(ExecutionError):
        list(interpret(prog, 0, max_steps=100))
