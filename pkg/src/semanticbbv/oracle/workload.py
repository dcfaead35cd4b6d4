"""Seeded synthetic workloads built from phase templates.

Every phase is a function ``p<i>`` holding one counted loop; ``main`` calls the phases in
plan order and returns. Loop bodies have a fixed dynamic length per iteration (the two
arms of the branchy phase are padded to equal length), so the executed instruction count
of a program is known in closed form before it runs.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field

from ..asmnorm.isa import GP64

PHASE_KINDS = ("compute", "memory_stream", "memory_random", "branchy", "mixed")
DEFAULT_WORKING_SET = {"memory_stream": 32 << 10, "memory_random": 256 << 10, "mixed": 64 << 10}
DATA_BASE = 0x20000
BUDGET_TOLERANCE = 0.01

LCG_MUL = 6364136223846793005
LCG_ADD = 1442695040888963407


class BudgetInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class PhaseSpec:
    kind: str
    instructions: int
    working_set: int | None = None

    def __post_init__(self):
        if self.kind not in PHASE_KINDS:
            raise ValueError(f"unknown phase kind {self.kind!r}")
        ws = self.resolved_working_set
        if ws is not None and (ws < 64 or ws & (ws - 1)):
            raise ValueError(f"working set must be a power of two >= 64, got {ws}")

    @property
    def resolved_working_set(self) -> int | None:
        return self.working_set if self.working_set is not None else DEFAULT_WORKING_SET.get(self.kind)


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    seed: int
    phases: tuple[PhaseSpec, ...] = field(default_factory=tuple)

    @property
    def budget(self) -> int:
        return sum(p.instructions for p in self.phases)

    def to_dict(self) -> dict:
        return {"name": self.name, "seed": self.seed, "phases": [asdict(p) for p in self.phases]}

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(d["name"], int(d["seed"]), tuple(PhaseSpec(**p) for p in d["phases"]))


# Template: (roles, prologue lines, loop body lines, instructions per iteration).
# Body lines may hold labels; "{L}" is the phase's label prefix.
_TEMPLATES: dict[str, tuple[tuple[str, ...], list[str], list[str], int]] = {
    "compute": (
        ("cnt", "a", "b", "c"),
        ["mov {cnt}, {N}", "mov {a}, 1", "mov {b}, 3", "mov {c}, 7"],
        ["{L}_loop:", "add {a}, {b}", "imul {b}, 3", "xor {c}, {a}", "shl {a}, 1",
         "sub {c}, {b}", "or {a}, {c}", "dec {cnt}", "jne {L}_loop"],
        8,
    ),
    "memory_stream": (
        ("cnt", "p", "t", "acc"),
        ["mov {cnt}, {N}", "mov {p}, 0", "mov {acc}, 0"],
        ["{L}_loop:", "mov {t}, [{p}+{BASE}]", "add {acc}, {t}", "mov {t}, [{p}+{BASE8}]",
         "add {acc}, {t}", "add {p}, 16", "and {p}, {WSMASK}", "dec {cnt}", "jne {L}_loop"],
        8,
    ),
    "memory_random": (
        ("cnt", "x", "t", "acc"),
        ["mov {cnt}, {N}", "mov {x}, {SEED}", "mov {acc}, 0"],
        ["{L}_loop:", f"imul {{x}}, {LCG_MUL}", f"add {{x}}, {LCG_ADD}", "mov {t}, {x}",
         "shr {t}, 24", "and {t}, {WSMASK8}", "mov {t}, [{t}+{BASE}]", "add {acc}, {t}",
         "dec {cnt}", "jne {L}_loop"],
        9,
    ),
    "branchy": (
        ("cnt", "x", "t", "acc"),
        ["mov {cnt}, {N}", "mov {x}, {SEED}", "mov {acc}, 0"],
        ["{L}_loop:", f"imul {{x}}, {LCG_MUL}", f"add {{x}}, {LCG_ADD}", "mov {t}, {x}",
         "shr {t}, 40", "test {t}, 1", "je {L}_skip", "add {acc}, 3", "jmp {L}_join",
         "{L}_skip:", "sub {acc}, 1", "nop", "{L}_join:", "dec {cnt}", "jne {L}_loop"],
        10,
    ),
    "mixed": (
        ("cnt", "a", "b", "p", "t"),
        ["mov {cnt}, {N}", "mov {p}, 0", "mov {a}, 1", "mov {b}, 5"],
        ["{L}_loop:", "mov {t}, [{p}+{BASE}]", "add {a}, {t}", "imul {b}, 3", "xor {a}, {b}",
         "add {p}, 8", "and {p}, {WSMASK}", "shl {a}, 1", "dec {cnt}", "jne {L}_loop"],
        9,
    ),
}

# registers available to templates; rsp/rbp are reserved
_POOL = tuple(r for r in GP64)


def phase_cost(kind: str) -> tuple[int, int]:
    """(fixed instructions including call and ret, instructions per loop iteration)."""
    roles, prologue, _, per_iter = _TEMPLATES[kind]
    return 1 + len(prologue) + 1, per_iter


def iterations_for(phase: PhaseSpec) -> int:
    fixed, per_iter = phase_cost(phase.kind)
    n = round((phase.instructions - fixed) / per_iter)
    if n < 1:
        raise BudgetInfeasible(
            f"{phase.kind} phase needs at least {fixed + per_iter} instructions, budget is {phase.instructions}")
    return n


def expected_length(spec: WorkloadSpec) -> int:
    """Executed instruction count of the generated program (closed form)."""
    total = 1  # main's final ret
    for ph in spec.phases:
        fixed, per_iter = phase_cost(ph.kind)
        total += fixed + per_iter * iterations_for(ph)
    return total


def _render_phase(index: int, phase: PhaseSpec, rng: random.Random) -> list[str]:
    roles, prologue, body, _ = _TEMPLATES[phase.kind]
    regs = rng.sample(_POOL, len(roles))
    ws = phase.resolved_working_set or 64
    subst = dict(zip(roles, regs))
    subst.update(
        L=f"p{index}",
        N=str(iterations_for(phase)),
        BASE=hex(DATA_BASE),
        BASE8=hex(DATA_BASE + 8),
        WSMASK=hex(ws - 1),
        WSMASK8=hex((ws - 1) & ~7),
        SEED=str(rng.randrange(1, 1 << 31)),
    )
    out = [f"p{index}:"]
    for line in prologue + body + ["ret"]:
        text = line.format(**subst)
        out.append(text if text.endswith(":") else "    " + text)
    return out


def gen_program(spec: WorkloadSpec) -> str:
    """Program text for ``spec``; identical specs give identical text."""
    if not spec.phases:
        raise BudgetInfeasible("workload has no phases")
    total = expected_length(spec)
    if abs(total - spec.budget) > BUDGET_TOLERANCE * spec.budget:
        raise BudgetInfeasible(f"cannot meet budget {spec.budget} within 1% (closest is {total})")
    rng = random.Random(spec.seed)
    lines = [f"; workload {spec.name} seed={spec.seed}", "main:"]
    lines += [f"    call p{i}" for i in range(len(spec.phases))]
    lines.append("    ret")
    for i, ph in enumerate(spec.phases):
        lines += _render_phase(i, ph, rng)
    return "\n".join(lines) + "\n"


def nested_loop_program(outer: int = 4, inner: int = 8) -> str:
    """Two-level counted loop in unoptimized-compiler shape: seven basic blocks when traced."""
    return "\n".join([
        "    mov rcx, 0",
        "    jmp cond_i",
        "body_i:",
        "    mov rdx, 0",
        "    jmp cond_j",
        "body_j:",
        "    add rax, rdx",
        "    inc rdx",
        "cond_j:",
        f"    cmp rdx, {inner}",
        "    jl body_j",
        "    inc rcx",
        "cond_i:",
        f"    cmp rcx, {outer}",
        "    jl body_i",
        "    ret",
    ]) + "\n"


def random_plan(rng: random.Random, interval_len: int, n_phases: int,
                kinds: tuple[str, ...] = PHASE_KINDS, min_intervals: int = 2,
                max_intervals: int = 6) -> tuple[PhaseSpec, ...]:
    phases = []
    for _ in range(n_phases):
        kind = rng.choice(kinds)
        budget = rng.randint(min_intervals * interval_len, max_intervals * interval_len)
        phases.append(PhaseSpec(kind, budget))
    return tuple(phases)


def make_suite(n_programs: int, seed: int, interval_len: int = 4096, prefix: str = "prog",
               uniform: bool = True) -> list[WorkloadSpec]:
    """A deterministic suite of heterogeneous programs.

    With ``uniform`` the last program is single-phase, the fingerprint-concentration case.
    """
    rng = random.Random(seed)
    suite = []
    for i in range(n_programs):
        name = f"{prefix}{i:02d}"
        pseed = rng.randrange(1 << 31)
        if uniform and i == n_programs - 1:
            kind = rng.choice(PHASE_KINDS)
            phases = (PhaseSpec(kind, rng.randint(8, 12) * interval_len),)
        else:
            # every program mixes at least three distinct kinds
            kinds = rng.sample(PHASE_KINDS, 3)
            extra = rng.randint(0, 2)
            kinds += [rng.choice(PHASE_KINDS) for _ in range(extra)]
            rng.shuffle(kinds)
            phases = tuple(PhaseSpec(k, rng.randint(2 * interval_len, 5 * interval_len)) for k in kinds)
        suite.append(WorkloadSpec(name, pseed, phases))
    return suite
