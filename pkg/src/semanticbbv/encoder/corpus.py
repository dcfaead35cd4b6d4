"""Synthetic function corpus for similarity training and evaluation.

Compiler optimization levels are stood in for by semantics-preserving rewrites:
register renaming among the general-purpose registers, swapping independent adjacent
instructions, ``imul r, 2`` <-> ``shl r, 1``, and ``nop`` insertion.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..asmnorm import Instruction, mnemonic_info, parse_instruction
from ..asmnorm.isa import ALIAS64, GP64

_REGS = GP64

# (template, weight); R/S are distinct registers, I an immediate, D a stack displacement
_SHAPES = (
    ("mov R, S", 3), ("mov R, I", 2), ("mov R, [rsp+D]", 2), ("mov [rsp+D], R", 2),
    ("add R, S", 3), ("add R, I", 2), ("sub R, S", 2), ("sub R, I", 1), ("imul R, S", 1),
    ("imul R, 2", 1), ("shl R, 1", 1), ("xor R, S", 2), ("and R, I", 1), ("or R, S", 1),
    ("shr R, I", 1), ("lea R, [S+D]", 2), ("inc R", 1), ("dec R", 1), ("push R", 1),
    ("pop R", 1), ("cmp R, S", 1), ("test R, S", 1), ("add R, [rsp+D]", 1),
)


@dataclass(frozen=True)
class Function:
    name: str
    lines: tuple[str, ...]

    @property
    def instructions(self) -> list[Instruction]:
        return [parse_instruction(line) for line in self.lines]


def random_function(rng: random.Random, name: str, min_len: int = 6, max_len: int = 14) -> Function:
    shapes, weights = zip(*_SHAPES)
    regs = rng.sample(_REGS, rng.randint(3, 5))
    lines = []
    for _ in range(rng.randint(min_len, max_len)):
        shape = rng.choices(shapes, weights)[0]
        r, s = rng.sample(regs, 2)
        line = (shape.replace("R", r).replace("S", s)
                .replace("I", str(rng.randint(1, 255))).replace("D", str(8 * rng.randint(1, 16))))
        lines.append(line)
    lines.append("ret")
    return Function(name, tuple(lines))


def _effects(line: str) -> tuple[set[str], set[str]]:
    """(reads, writes) over registers, 'flags' and 'mem'."""
    ins = parse_instruction(line)
    info = mnemonic_info(ins.mnemonic)
    reads: set[str] = set()
    writes: set[str] = set()
    for pos, op in enumerate(ins.operands):
        acc = info.access_at(pos)
        if op.kind == "register":
            reg = ALIAS64.get(op.reg, op.reg)
            if acc in ("read", "readwrite"):
                reads.add(reg)
            if acc in ("write", "readwrite"):
                writes.add(reg)
        elif op.kind == "memory":
            reads.add(op.reg)
            if acc in ("read", "readwrite"):
                reads.add("mem")
            if acc in ("write", "readwrite"):
                writes.add("mem")
    if info.flag_effect in ("sets_flags", "sets_and_reads"):
        writes.add("flags")
    if info.flag_effect in ("reads_flags", "sets_and_reads"):
        reads.add("flags")
    if ins.mnemonic in ("push", "pop", "call", "ret"):
        reads |= {"rsp", "mem"}
        writes |= {"rsp", "mem"}
    if ins.mnemonic == "mul":
        reads.add("rax")
        writes |= {"rax", "rdx"}
    return reads, writes


def independent(a: str, b: str) -> bool:
    ra, wa = _effects(a)
    rb, wb = _effects(b)
    return not (wa & (rb | wb)) and not (wb & ra)


def rename_registers(lines: list[str], rng: random.Random) -> list[str]:
    perm = dict(zip(_REGS, rng.sample(_REGS, len(_REGS))))
    out = []
    for line in lines:
        ins = parse_instruction(line)
        parts = []
        for op in ins.operands:
            if op.kind == "register" and op.reg in perm:
                parts.append(perm[op.reg])
            elif op.kind == "memory" and op.reg in perm:
                parts.append(op.text.replace(op.reg, perm[op.reg], 1))
            else:
                parts.append(op.text)
        out.append(ins.mnemonic + (" " + ", ".join(parts) if parts else ""))
    return out


def reorder(lines: list[str], rng: random.Random, swaps: int = 3) -> list[str]:
    lines = list(lines)
    body = len(lines) - 1  # ret stays last
    for _ in range(swaps):
        cands = [i for i in range(body - 1) if independent(lines[i], lines[i + 1])]
        if not cands:
            break
        i = rng.choice(cands)
        lines[i], lines[i + 1] = lines[i + 1], lines[i]
    return lines


def strength_reduce(lines: list[str]) -> list[str]:
    out = []
    for line in lines:
        ins = parse_instruction(line)
        ops = ins.operands
        if ins.mnemonic == "imul" and len(ops) == 2 and ops[1].kind == "immediate" and ops[1].value == 2:
            out.append(f"shl {ops[0].text}, 1")
        elif ins.mnemonic == "shl" and len(ops) == 2 and ops[1].kind == "immediate" and ops[1].value == 1:
            out.append(f"imul {ops[0].text}, 2")
        else:
            out.append(line)
    return out


def insert_nops(lines: list[str], rng: random.Random, count: int) -> list[str]:
    lines = list(lines)
    for _ in range(count):
        lines.insert(rng.randrange(len(lines)), "nop")  # never after the final ret
    return lines


def variant(fn: Function, rng: random.Random) -> Function:
    """A randomly transformed, semantically equivalent copy of ``fn``."""
    lines = list(fn.lines)
    lines = rename_registers(lines, rng)
    lines = reorder(lines, rng, swaps=rng.randint(0, 4))
    if rng.random() < 0.5:
        lines = strength_reduce(lines)
    lines = insert_nops(lines, rng, rng.choice((0, 0, 1, 2)))
    return Function(fn.name, tuple(lines))


def make_functions(n: int, seed: int, prefix: str = "f") -> list[Function]:
    rng = random.Random(seed)
    return [random_function(rng, f"{prefix}{i:04d}") for i in range(n)]
