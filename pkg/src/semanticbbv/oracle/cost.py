"""Closed-form CPI oracle: per-class base cycles, a direct-mapped cache and a 2-bit branch predictor.

This is ground truth by construction, not a model of any real core. Cycles for an
interval are::

    base / issue_width + misses * miss_penalty + mispredicts * mispredict_penalty

Cache and predictor state carry across interval boundaries and start cold.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Iterable

from ..asmnorm import CONDITIONAL_JUMPS, mnemonic_info, parse_instruction
from .machine import INSN_BYTES

_EA = re.compile(r"ea=0x([0-9a-f]+)")

DEFAULT_BASE = {
    "arith": 1, "logic": 1, "datamove": 1, "compare": 1,
    "control": 2, "stack": 1, "other": 1,
}
DEFAULT_OVERRIDES = {"imul": 3, "mul": 3}


@dataclass(frozen=True)
class CostModel:
    name: str
    base_cycles: dict = field(default_factory=lambda: dict(DEFAULT_BASE))
    mnemonic_cycles: dict = field(default_factory=lambda: dict(DEFAULT_OVERRIDES))
    line_bytes: int = 64
    cache_sets: int = 64
    miss_penalty: float = 20.0
    predictor_entries: int = 256
    mispredict_penalty: float = 3.0
    issue_width: int = 1

    def __post_init__(self):
        if self.miss_penalty < 0 or self.mispredict_penalty < 0:
            raise ValueError("penalties must be non-negative")
        if self.issue_width < 1 or self.cache_sets < 1 or self.line_bytes < 1 or self.predictor_entries < 1:
            raise ValueError("cost model sizes must be >= 1")

    def base_of(self, mnemonic: str) -> float:
        if mnemonic in self.mnemonic_cycles:
            return self.mnemonic_cycles[mnemonic]
        return self.base_cycles[mnemonic_info(mnemonic).instr_type]

    @property
    def min_cpi(self) -> float:
        return min([*self.base_cycles.values(), *self.mnemonic_cycles.values()]) / self.issue_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        return cls(**d)


SIMPLE = CostModel("simple")
COMPLEX = CostModel("complex", miss_penalty=40.0, mispredict_penalty=12.0, issue_width=2)
MODELS = {"simple": SIMPLE, "complex": COMPLEX}


def get_model(name: str) -> CostModel:
    try:
        return MODELS[name]
    except KeyError:
        raise ValueError(f"unknown cost model {name!r}; expected one of {sorted(MODELS)}") from None


@dataclass
class IntervalCost:
    instructions: int = 0
    base: float = 0.0
    misses: int = 0
    mispredicts: int = 0

    def cycles(self, model: CostModel) -> float:
        return (self.base / model.issue_width + self.misses * model.miss_penalty
                + self.mispredicts * model.mispredict_penalty)

    def cpi(self, model: CostModel) -> float:
        return self.cycles(model) / self.instructions


def _decode_line(line: str) -> tuple[int, str, int | None]:
    pc_hex, _, rest = line.partition("\t")
    m = _EA.search(rest)
    return int(pc_hex, 16), rest, int(m.group(1), 16) if m else None


def cost_breakdown(trace: Iterable[str], interval_len: int, model: CostModel) -> list[IntervalCost]:
    """Per-interval cycle components for a trace."""
    if interval_len < 1:
        raise ValueError("interval_len must be >= 1")

    @lru_cache(maxsize=None)
    def classify(code: str) -> tuple[float, bool]:
        ins = parse_instruction(code)
        return model.base_of(ins.mnemonic), ins.mnemonic in CONDITIONAL_JUMPS

    tags = [-1] * model.cache_sets
    counters = [1] * model.predictor_entries  # weakly not-taken
    out: list[IntervalCost] = []
    pending_branch: tuple[int, IntervalCost] | None = None  # (pc, interval) awaiting its outcome
    cur = IntervalCost()

    def resolve(pc: int, next_pc: int | None, iv: IntervalCost) -> None:
        taken = next_pc is not None and next_pc != pc + INSN_BYTES
        slot = (pc // INSN_BYTES) % model.predictor_entries
        c = counters[slot]
        if (c >= 2) != taken:
            iv.mispredicts += 1
        counters[slot] = min(3, c + 1) if taken else max(0, c - 1)

    for line in trace:
        pc, rest, ea = _decode_line(line)
        if pending_branch is not None:
            resolve(pending_branch[0], pc, pending_branch[1])
            pending_branch = None
        base, is_cond = classify(rest.split(";", 1)[0])
        cur.base += base
        cur.instructions += 1
        if ea is not None:
            line_no = ea // model.line_bytes
            s = line_no % model.cache_sets
            tag = line_no // model.cache_sets
            if tags[s] != tag:
                cur.misses += 1
                tags[s] = tag
        if is_cond:
            pending_branch = (pc, cur)
        if cur.instructions == interval_len:
            out.append(cur)
            cur = IntervalCost()
    if pending_branch is not None:
        resolve(pending_branch[0], None, pending_branch[1])
    if cur.instructions:
        out.append(cur)
    return out


def cost_cpi(trace: Iterable[str], interval_len: int, model: CostModel) -> list[float]:
    """CPI of each consecutive ``interval_len`` window; the final window may be partial."""
    return [iv.cpi(model) for iv in cost_breakdown(trace, interval_len, model)]
