"""Six-dimensional tokenization and per-dimension vocabularies."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .isa import ACCESS_TYPES, FLAG_EFFECTS, INSTR_TYPES, OPERAND_TYPES, REGISTER_CLASSES, mnemonic_info
from .parse import IMM, LABEL, MEM, Instruction

PAD = "<pad>"
UNK = "<unk>"
BOS = "<bos>"
SPECIALS = (PAD, UNK, BOS, IMM, MEM, LABEL)

DIMENSIONS = ("asm_token", "instr_type", "operand_type", "register_class", "access_type", "flag_effect")
# dims 2-6 are closed enums; PAD occupies id 0 everywhere so padded positions are well defined
_ENUMS = (INSTR_TYPES, OPERAND_TYPES, REGISTER_CLASSES, ACCESS_TYPES, FLAG_EFFECTS)


@dataclass(frozen=True)
class TokenRecord:
    asm_token: str
    instr_type: str
    operand_type: str
    register_class: str
    access_type: str
    flag_effect: str

    def as_tuple(self) -> tuple[str, ...]:
        return (self.asm_token, self.instr_type, self.operand_type,
                self.register_class, self.access_type, self.flag_effect)


def tokenize(ins: Instruction) -> list[TokenRecord]:
    """One mnemonic token plus one token per operand; memory operands collapse to a single MEM token."""
    info = mnemonic_info(ins.mnemonic)
    out = [TokenRecord(ins.mnemonic, info.instr_type, "none", "none", "none", info.flag_effect)]
    for pos, op in enumerate(ins.operands):
        if op.kind == "register":
            asm = op.reg
        elif op.kind == "immediate":
            asm = IMM
        elif op.kind == "memory":
            asm = MEM
        else:
            asm = LABEL
        out.append(TokenRecord(asm, info.instr_type, op.kind, op.register_class, info.access_at(pos), "none"))
    return out


def tokenize_block(instructions: Iterable[Instruction]) -> tuple[list[TokenRecord], list[int]]:
    """Tokens of a block and, per token, the index of the instruction it came from."""
    tokens: list[TokenRecord] = []
    owner: list[int] = []
    for i, ins in enumerate(instructions):
        toks = tokenize(ins)
        tokens.extend(toks)
        owner.extend([i] * len(toks))
    return tokens, owner


class Vocabulary:
    """Per-dimension token <-> id bijections. Ids are positions in the stored lists."""

    def __init__(self, tables: Sequence[Sequence[str]]):
        if len(tables) != len(DIMENSIONS):
            raise ValueError(f"expected {len(DIMENSIONS)} dimension tables, got {len(tables)}")
        self.tables = [tuple(t) for t in tables]
        self._index = [{tok: i for i, tok in enumerate(t)} for t in self.tables]
        for t, idx in zip(self.tables, self._index):
            if len(idx) != len(t):
                raise ValueError("duplicate token in vocabulary")
            if t[0] != PAD:
                raise ValueError("PAD must be id 0 in every dimension")

    pad_id = 0

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.tables)

    @property
    def unk_id(self) -> int:
        return self._index[0][UNK]

    def encode(self, rec: TokenRecord) -> tuple[int, ...]:
        ids = []
        for dim, tok in enumerate(rec.as_tuple()):
            idx = self._index[dim].get(tok)
            if idx is None:
                if dim != 0:
                    raise KeyError(f"{tok!r} is not a member of dimension {DIMENSIONS[dim]}")
                idx = self.unk_id
            ids.append(idx)
        return tuple(ids)

    def decode(self, ids: Sequence[int]) -> TokenRecord:
        return TokenRecord(*(self.tables[d][i] for d, i in enumerate(ids)))

    def dumps(self) -> str:
        return "".join(f"{name}\t{' '.join(t)}\n" for name, t in zip(DIMENSIONS, self.tables))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        rows = {}
        for line in text.splitlines():
            if line.strip():
                name, _, toks = line.partition("\t")
                rows[name] = toks.split()
        return cls([rows[name] for name in DIMENSIONS])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tables == other.tables


def build_vocab(corpus: Iterable) -> Vocabulary:
    """Dimension 1 is specials followed by the sorted corpus tokens; dims 2-6 are the full enums.

    ``corpus`` holds basic blocks or plain instruction sequences.
    """
    seen: set[str] = set()
    for block in corpus:
        for ins in getattr(block, "instructions", block):
            for rec in tokenize(ins):
                seen.add(rec.asm_token)
    dim1 = list(SPECIALS) + sorted(seen - set(SPECIALS))
    return Vocabulary([dim1] + [[PAD, *enum] for enum in _ENUMS])
