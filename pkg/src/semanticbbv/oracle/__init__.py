"""Synthetic workloads, a deterministic interpreter and the CPI cost-model oracle."""

from .cost import COMPLEX, MODELS, SIMPLE, CostModel, IntervalCost, cost_breakdown, cost_cpi, get_model
from .machine import ExecutionError, Program, assemble, interpret, run
from .workload import (
    PHASE_KINDS,
    BudgetInfeasible,
    PhaseSpec,
    WorkloadSpec,
    expected_length,
    gen_program,
    make_suite,
    nested_loop_program,
)


def trace_program(program: "str | Program", input_seed: int = 0) -> list[str]:
    """Assemble (if needed) and run a program, returning its trace lines."""
    if isinstance(program, str):
        program = assemble(program)
    return run(program, input_seed)


__all__ = [
    "COMPLEX", "MODELS", "PHASE_KINDS", "SIMPLE", "BudgetInfeasible", "CostModel", "ExecutionError",
    "IntervalCost", "PhaseSpec", "Program", "WorkloadSpec", "assemble", "cost_breakdown", "cost_cpi",
    "expected_length", "gen_program", "get_model", "interpret", "make_suite", "nested_loop_program",
    "run", "trace_program",
]
