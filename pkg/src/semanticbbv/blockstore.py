"""Trace ingestion: basic-block segmentation, content-addressed block store, interval
profiles and the traditional (instruction-weighted) basic block vector."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator

from .asmnorm import CONTROL_TRANSFERS, Instruction, MalformedOperand, normalize, parse_instruction
from .oracle.machine import INSN_BYTES

DEFAULT_INTERVAL_LEN = 4096


class EmptyTrace(ValueError):
    pass


class TraceParseError(ValueError):
    def __init__(self, offset: int, cause: Exception):
        self.offset = offset
        super().__init__(f"trace line {offset}: {cause}")


def block_hash(texts: Iterable[str]) -> str:
    return hashlib.sha1("\n".join(texts).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class BasicBlock:
    block_id: str
    instructions: tuple[Instruction, ...]

    @property
    def static_len(self) -> int:
        return len(self.instructions)

    @property
    def texts(self) -> list[str]:
        return [ins.text for ins in self.instructions]

    @classmethod
    def from_instructions(cls, instructions: Iterable[Instruction]) -> "BasicBlock":
        norm = tuple(normalize(ins) for ins in instructions)
        if not norm:
            raise ValueError("a basic block holds at least one instruction")
        for ins in norm[:-1]:
            if ins.mnemonic in CONTROL_TRANSFERS:
                raise ValueError(f"control transfer {ins.text!r} before the end of a block")
        return cls(block_hash(ins.text for ins in norm), norm)


class BlockStore:
    """Registry of distinct blocks keyed by content hash; shared across programs."""

    def __init__(self) -> None:
        self.blocks: dict[str, BasicBlock] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    def __contains__(self, block_id: str) -> bool:
        return block_id in self.blocks

    def __getitem__(self, block_id: str) -> BasicBlock:
        return self.blocks[block_id]

    def add(self, block: BasicBlock) -> bool:
        """Register ``block``; True if it was new."""
        if block.block_id in self.blocks:
            return False
        self.blocks[block.block_id] = block
        return True

    def static_len(self, block_id: str) -> int:
        return self.blocks[block_id].static_len

    def dumps(self) -> str:
        lines = []
        for bid in sorted(self.blocks):
            b = self.blocks[bid]
            lines.append(f"{bid} {b.static_len}")
            lines.extend("\t" + t for t in b.texts)
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def loads(cls, text: str) -> "BlockStore":
        store = cls()
        header: tuple[str, int] | None = None
        body: list[Instruction] = []

        def flush():
            if header is None:
                return
            block = BasicBlock.from_instructions(body)
            if block.block_id != header[0] or block.static_len != header[1]:
                raise ValueError(f"block record {header[0]} does not match its content")
            store.add(block)

        for line in text.splitlines():
            if line.startswith("\t"):
                body.append(parse_instruction(line[1:]))
            elif line.strip():
                flush()
                bid, n = line.split()
                header, body = (bid, int(n)), []
        flush()
        return store

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "BlockStore":
        return cls.loads(Path(path).read_text())


def _split(line: str, offset: int) -> tuple[int, Instruction]:
    pc_hex, sep, code = line.partition("\t")
    try:
        if not sep:
            raise MalformedOperand("expected '<pc-hex>\\t<asm>'")
        return int(pc_hex, 16), parse_instruction(code)
    except (ValueError, MalformedOperand) as exc:
        raise TraceParseError(offset, exc) from None


def segment_trace(trace: Iterable[str], store: BlockStore | None = None
                  ) -> Iterator[tuple[str, BasicBlock | None]]:
    """Cut a dynamic trace into basic blocks.

    A block ends after a control transfer, or before an instruction whose pc does not
    follow the previous one. Yields ``(block_id, block)`` the first time a block is seen
    by ``store`` and ``(block_id, None)`` afterwards.
    """
    store = store if store is not None else BlockStore()
    cur: list[Instruction] = []
    prev_pc: int | None = None
    cache: dict[tuple[str, ...], BasicBlock] = {}

    def close():
        key = tuple(ins.raw_text for ins in cur)
        block = cache.get(key)
        if block is None:
            block = cache[key] = BasicBlock.from_instructions(cur)
        return block.block_id, (block if store.add(block) else None)

    for offset, line in enumerate(trace):
        pc, ins = _split(line, offset)
        if cur and prev_pc is not None and pc != prev_pc + INSN_BYTES:
            yield close()
            cur = []
        cur.append(ins)
        prev_pc = pc
        if ins.mnemonic in CONTROL_TRANSFERS:
            yield close()
            cur = []
    if cur:
        yield close()


@dataclass
class IntervalProfile:
    program_id: str
    interval_index: int
    counts: dict[str, Fraction] = field(default_factory=dict)
    instr_total: int = 0
    partial: bool = False
    cpi_true: float | None = None

    def weights(self, store: BlockStore) -> dict[str, int]:
        """Instructions executed per block: count x static length (always integral)."""
        out = {}
        for bid, c in self.counts.items():
            w = c * store.static_len(bid)
            if w.denominator != 1:
                raise ValueError(f"non-integral instruction weight for block {bid}")
            out[bid] = int(w)
        return out

    def to_record(self) -> dict:
        return {
            "program_id": self.program_id,
            "interval_index": self.interval_index,
            "instr_total": self.instr_total,
            "partial": self.partial,
            "cpi_true": self.cpi_true,
            "counts": [[bid, str(self.counts[bid])] for bid in sorted(self.counts)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "IntervalProfile":
        return cls(rec["program_id"], rec["interval_index"],
                   {bid: Fraction(c) for bid, c in rec["counts"]},
                   rec["instr_total"], rec["partial"], rec["cpi_true"])


def slice_intervals(trace: Iterable[str], interval_len: int = DEFAULT_INTERVAL_LEN,
                    program_id: str = "", store: BlockStore | None = None) -> list[IntervalProfile]:
    """Non-overlapping ``interval_len`` windows over the executed instructions.

    A block execution that straddles a boundary contributes to each interval the fraction
    of its instructions that executed inside it. The final partial window is kept and
    flagged.
    """
    if interval_len < 1:
        raise ValueError("interval_len must be >= 1")
    store = store if store is not None else BlockStore()
    profiles: list[IntervalProfile] = []
    cur = IntervalProfile(program_id, 0)
    for bid, _ in segment_trace(trace, store):
        n = store.static_len(bid)
        left = n
        while left:
            room = interval_len - cur.instr_total
            take = min(room, left)
            frac = Fraction(1) if take == n else Fraction(take, n)
            cur.counts[bid] = cur.counts.get(bid, Fraction(0)) + frac
            cur.instr_total += take
            left -= take
            if cur.instr_total == interval_len:
                profiles.append(cur)
                cur = IntervalProfile(program_id, cur.interval_index + 1)
    if cur.instr_total:
        cur.partial = True
        profiles.append(cur)
    if not profiles:
        raise EmptyTrace(f"no instructions in trace for program {program_id!r}")
    return profiles


def save_profiles(profiles: Iterable[IntervalProfile], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in profiles:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def load_profiles(path: str | Path) -> list[IntervalProfile]:
    with open(path) as fh:
        return [IntervalProfile.from_record(json.loads(line)) for line in fh if line.strip()]


@dataclass
class TraditionalBBV:
    dims: dict[str, float]
    ordering: dict[str, int]

    def l1(self) -> float:
        return sum(abs(v) for v in self.dims.values())

    def normalized(self) -> "TraditionalBBV":
        total = self.l1()
        return TraditionalBBV({b: v / total for b, v in self.dims.items()}, self.ordering)

    def dense(self, size: int | None = None):
        import numpy as np

        size = size if size is not None else len(self.ordering)
        out = np.zeros(size)
        for b, v in self.dims.items():
            out[self.ordering[b]] = v
        return out


def first_seen_ordering(profiles: Iterable[IntervalProfile]) -> dict[str, int]:
    """Per-program sequential block ids in order of first execution."""
    order: dict[str, int] = {}
    for p in profiles:
        for bid in p.counts:
            order.setdefault(bid, len(order))
    return order


def traditional_bbv(iv: IntervalProfile, store: BlockStore, ordering: dict[str, int] | None = None,
                    normalize_l1: bool = False) -> TraditionalBBV:
    if not iv.counts:
        raise ValueError("interval has no executed blocks")
    bbv = TraditionalBBV({b: float(w) for b, w in iv.weights(store).items()},
                         ordering if ordering is not None else first_seen_ordering([iv]))
    return bbv.normalized() if normalize_l1 else bbv


def cosine(a: dict[str, float], b: dict[str, float]) -> float:
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    return dot / (na * nb) if na and nb else 0.0
