"""Assembler and deterministic interpreter for the dialect.

The interpreter emits the trace format consumed by :mod:`semanticbbv.blockstore`:
``<pc-hex>\\t<asm-text>``, one executed instruction per line. Instructions that touch
memory carry a trailing ``; ea=0x...`` comment with the effective address, which the
parser ignores and the cost model reads.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Callable, Iterator

from ..asmnorm import Instruction, MalformedOperand, Operand, parse_instruction, strip_comment
from ..asmnorm.isa import ALIAS64, GP64

TEXT_BASE = 0x400000
INSN_BYTES = 4
MEM_BYTES = 1 << 20
MEM_WORDS = MEM_BYTES // 8
STACK_TOP = 0xF0000
MASK64 = (1 << 64) - 1

_LABEL_DEF = re.compile(r"([A-Za-z_.$][\w.$]*):\Z")


class ExecutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]
    labels: dict[str, int]
    text: str

    def pc(self, index: int) -> int:
        return TEXT_BASE + INSN_BYTES * index


def assemble(text: str) -> Program:
    """Parse a listing with ``label:`` definition lines into an executable program."""
    instructions: list[Instruction] = []
    labels: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        code = strip_comment(line)
        if not code:
            continue
        m = _LABEL_DEF.match(code)
        if m:
            if m.group(1) in labels:
                raise MalformedOperand(f"duplicate label {m.group(1)!r}", lineno)
            labels[m.group(1)] = len(instructions)
            continue
        instructions.append(parse_instruction(code, lineno))
    for ins in instructions:
        for op in ins.operands:
            if op.kind == "label" and op.label not in labels:
                raise MalformedOperand(f"undefined label {op.label!r} in {ins.text!r}")
    return Program(tuple(instructions), labels, text)


def _signed(v: int) -> int:
    return v - (1 << 64) if v >> 63 else v


class _Machine:
    __slots__ = ("regs", "mem", "zf", "lt")

    def __init__(self, seed: int):
        rng = random.Random(seed)
        self.regs = {r: rng.getrandbits(16) for r in GP64}
        self.regs["rsp"] = STACK_TOP
        self.regs["rbp"] = STACK_TOP
        self.regs["rip"] = TEXT_BASE
        self.mem = [0] * MEM_WORDS
        self.zf = False
        self.lt = False

    def set_flags(self, result: int) -> None:
        self.zf = result == 0
        self.lt = bool(result >> 63)


def _reg_reader(name: str) -> Callable[[_Machine], int]:
    if name in ALIAS64:
        full = ALIAS64[name]
        return lambda m: m.regs[full] & 0xFFFFFFFF
    return lambda m: m.regs[name]


def _reg_writer(name: str) -> Callable[[_Machine, int], None]:
    full = ALIAS64.get(name, name)
    if name in ALIAS64:
        def write(m: _Machine, v: int) -> None:
            m.regs[full] = v & 0xFFFFFFFF
    else:
        def write(m: _Machine, v: int) -> None:
            m.regs[full] = v & MASK64
    return write


def _ea_fn(op: Operand) -> Callable[[_Machine], int]:
    base = _reg_reader(op.reg)
    disp = op.value or 0
    return lambda m: (base(m) + disp) & MASK64


# Each compiled step returns (next_index, effective_address or None); next_index None halts.
Step = Callable[[_Machine], "tuple[int | None, int | None]"]

_ALU: dict[str, Callable[[int, int], int]] = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "imul": lambda a, b: a * b,
    "xor": lambda a, b: a ^ b,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "shl": lambda a, b: a << (b & 63),
    "shr": lambda a, b: a >> (b & 63),
}


def _compile(index: int, ins: Instruction, labels: dict[str, int], n: int) -> Step:
    mn = ins.mnemonic
    ops = ins.operands
    nxt = index + 1 if index + 1 < n else None

    def src(op: Operand):
        """Returns fn(m) -> (value, ea)."""
        if op.kind == "register":
            rd = _reg_reader(op.reg)
            return lambda m: (rd(m), None)
        if op.kind == "immediate":
            if op.value is None:
                raise ExecutionError(f"normalized immediate cannot execute: {ins.text!r}")
            v = op.value & MASK64
            return lambda m: (v, None)
        if op.kind == "memory":
            ea = _ea_fn(op)

            def load(m):
                a = ea(m)
                return m.mem[(a % MEM_BYTES) >> 3], a
            return load
        raise ExecutionError(f"label is not a value operand: {ins.text!r}")

    def dst(op: Operand):
        """Returns (read fn, write fn(m, value, ea)) pair."""
        if op.kind == "register":
            w = _reg_writer(op.reg)
            return src(op), lambda m, v, a: w(m, v)
        if op.kind == "memory":
            def store(m, v, a):
                m.mem[(a % MEM_BYTES) >> 3] = v & MASK64
            return src(op), store
        raise ExecutionError(f"operand is not writable: {ins.text!r}")

    def target(op: Operand) -> int:
        if op.kind != "label":
            raise ExecutionError(f"branch target must be a label: {ins.text!r}")
        return labels[op.label]

    if mn == "nop":
        return lambda m: (nxt, None)

    if mn == "mov":
        read_d, write = dst(ops[0])
        read_s = src(ops[1])
        if ops[0].kind == "memory":
            ea = _ea_fn(ops[0])

            def step(m):
                v, _ = read_s(m)
                a = ea(m)
                write(m, v, a)
                return nxt, a
        else:
            def step(m):
                v, a = read_s(m)
                write(m, v, None)
                return nxt, a
        return step

    if mn == "lea":
        if ops[1].kind != "memory":
            raise ExecutionError(f"lea needs a memory operand: {ins.text!r}")
        w = _reg_writer(ops[0].reg)
        ea = _ea_fn(ops[1])

        def step(m):
            w(m, ea(m))
            return nxt, None
        return step

    if mn in _ALU:
        f = _ALU[mn]
        read_d, write = dst(ops[0])
        read_s = src(ops[1])

        def step(m):
            a, ea_d = read_d(m)
            b, ea_s = read_s(m)
            r = f(a, b) & MASK64
            write(m, r, ea_d)
            m.set_flags(r)
            return nxt, ea_d if ea_d is not None else ea_s
        return step

    if mn in ("inc", "dec"):
        delta = 1 if mn == "inc" else -1
        read_d, write = dst(ops[0])

        def step(m):
            a, ea = read_d(m)
            r = (a + delta) & MASK64
            write(m, r, ea)
            m.set_flags(r)
            return nxt, ea
        return step

    if mn == "mul":
        read_s = src(ops[0])

        def step(m):
            b, ea = read_s(m)
            p = m.regs["rax"] * b
            m.regs["rax"] = p & MASK64
            m.regs["rdx"] = (p >> 64) & MASK64
            m.set_flags(m.regs["rax"])
            return nxt, ea
        return step

    if mn in ("cmp", "test"):
        ra, rb = src(ops[0]), src(ops[1])
        is_cmp = mn == "cmp"

        def step(m):
            a, ea_a = ra(m)
            b, ea_b = rb(m)
            if is_cmp:
                m.zf = a == b
                m.lt = _signed(a) < _signed(b)
            else:
                m.set_flags(a & b)
            return nxt, ea_a if ea_a is not None else ea_b
        return step

    if mn == "jmp":
        t = target(ops[0])
        return lambda m: (t, None)

    if mn in ("je", "jne", "jl", "jge"):
        t = target(ops[0])
        cond = {
            "je": lambda m: m.zf,
            "jne": lambda m: not m.zf,
            "jl": lambda m: m.lt,
            "jge": lambda m: not m.lt,
        }[mn]
        return lambda m: (t if cond(m) else nxt, None)

    if mn == "push":
        read_s = src(ops[0])

        def step(m):
            v, _ = read_s(m)
            sp = (m.regs["rsp"] - 8) & MASK64
            m.regs["rsp"] = sp
            m.mem[(sp % MEM_BYTES) >> 3] = v
            return nxt, sp
        return step

    if mn == "pop":
        w = _reg_writer(ops[0].reg) if ops[0].kind == "register" else None
        if w is None:
            raise ExecutionError(f"pop needs a register: {ins.text!r}")

        def step(m):
            sp = m.regs["rsp"]
            w(m, m.mem[(sp % MEM_BYTES) >> 3])
            m.regs["rsp"] = (sp + 8) & MASK64
            return nxt, sp
        return step

    if mn == "call":
        t = target(ops[0])
        ret_to = index + 1

        def step(m):
            sp = (m.regs["rsp"] - 8) & MASK64
            m.regs["rsp"] = sp
            m.mem[(sp % MEM_BYTES) >> 3] = ret_to
            return t, sp
        return step

    if mn == "ret":
        def step(m):
            sp = m.regs["rsp"]
            if sp >= STACK_TOP:
                return None, None
            m.regs["rsp"] = sp + 8
            return m.mem[(sp % MEM_BYTES) >> 3], sp
        return step

    raise ExecutionError(f"interpreter does not implement {mn!r}")


def interpret(program: Program, input_seed: int = 0, max_steps: int = 50_000_000) -> Iterator[str]:
    """Execute ``program`` from its first instruction, yielding trace lines.

    Execution halts on a ``ret`` with an empty call stack or on falling off the end.
    """
    n = len(program.instructions)
    steps = [_compile(i, ins, program.labels, n) for i, ins in enumerate(program.instructions)]
    prefixes = [f"{program.pc(i):x}\t{ins.raw_text}" for i, ins in enumerate(program.instructions)]
    m = _Machine(input_seed)
    i: int | None = 0 if n else None
    count = 0
    while i is not None:
        if count >= max_steps:
            raise ExecutionError(f"step budget {max_steps} exhausted")
        nxt, ea = steps[i](m)
        yield prefixes[i] if ea is None else f"{prefixes[i]} ; ea=0x{ea:x}"
        count += 1
        i = nxt


def run(program: Program, input_seed: int = 0) -> list[str]:
    return list(interpret(program, input_seed))
