"""Parsing and normalization of the Intel-syntax subset."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import lru_cache

from .isa import REGISTERS

IMM = "IMM"
MEM = "MEM"
LABEL = "LABEL"

_IDENT = re.compile(r"[A-Za-z_.$][\w.$]*\Z")
_INT = re.compile(r"[+-]?(0x[0-9a-fA-F]+|\d+)\Z")
_SIZE_PREFIX = re.compile(r"(byte|word|dword|qword)\s+ptr\s+", re.IGNORECASE)


class MalformedOperand(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class Operand:
    kind: str  # register | immediate | memory | label
    register_class: str = "none"
    displacement_present: bool = False
    reg: str | None = None  # register name, or memory base register
    value: int | None = None  # immediate value or signed displacement; None once normalized
    label: str | None = None

    @property
    def text(self) -> str:
        if self.kind == "register":
            return self.reg
        if self.kind == "immediate":
            return IMM if self.value is None else str(self.value)
        if self.kind == "label":
            return self.label
        if not self.displacement_present:
            return f"[{self.reg}]"
        if self.value is None:
            return f"[{self.reg}+{IMM}]"
        sign = "-" if self.value < 0 else "+"
        return f"[{self.reg}{sign}{abs(self.value)}]"


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...]
    raw_text: str

    @property
    def text(self) -> str:
        if not self.operands:
            return self.mnemonic
        return f"{self.mnemonic} " + ", ".join(op.text for op in self.operands)


def _parse_int(tok: str) -> int:
    return int(tok, 16) if tok.lstrip("+-").startswith("0x") else int(tok, 10)


def _parse_memory(body: str, line: int | None) -> Operand:
    body = body.replace(" ", "")
    if not body:
        raise MalformedOperand("empty memory operand", line)
    m = re.fullmatch(r"([A-Za-z]\w*)(?:([+-])(.+))?", body)
    if m is None:
        raise MalformedOperand(f"cannot parse memory operand [{body}]", line)
    base, sign, disp = m.groups()
    base = base.lower()
    if base not in REGISTERS:
        raise MalformedOperand(f"memory base {base!r} is not a register", line)
    if disp is None:
        return Operand("memory", REGISTERS[base], False, base)
    if disp == IMM:
        return Operand("memory", REGISTERS[base], True, base)
    if disp.lower() in REGISTERS or "*" in disp:
        raise MalformedOperand(f"index registers are not part of the dialect: [{body}]", line)
    if not _INT.match(disp):
        raise MalformedOperand(f"bad displacement {disp!r}", line)
    value = _parse_int(disp)
    return Operand("memory", REGISTERS[base], True, base, -value if sign == "-" else value)


def parse_operand(text: str, line: int | None = None) -> Operand:
    tok = _SIZE_PREFIX.sub("", text.strip())
    if not tok:
        raise MalformedOperand("empty operand", line)
    if "[" in tok or "]" in tok:
        if not (tok.startswith("[") and tok.endswith("]")) or tok.count("[") != 1 or tok.count("]") != 1:
            raise MalformedOperand(f"unbalanced brackets in {text.strip()!r}", line)
        return _parse_memory(tok[1:-1], line)
    low = tok.lower()
    if low in REGISTERS:
        return Operand("register", REGISTERS[low], reg=low)
    if tok == IMM:
        return Operand("immediate")
    if _INT.match(tok):
        return Operand("immediate", value=_parse_int(tok))
    if _IDENT.match(tok):
        return Operand("label", label=tok)
    raise MalformedOperand(f"cannot classify operand {tok!r}", line)


@lru_cache(maxsize=65536)
def _parse_cached(code: str) -> Instruction:
    head, _, rest = code.partition(" ")
    mnemonic = head.strip().lower()
    rest = rest.strip()
    if not rest:
        return Instruction(mnemonic, (), code)
    parts = rest.split(",")
    if len(parts) > 3:
        raise MalformedOperand(f"more than 3 operands in {code!r}")
    return Instruction(mnemonic, tuple(parse_operand(p) for p in parts), code)


def strip_comment(line: str) -> str:
    return line.split(";", 1)[0].strip()


def parse_instruction(line: str, lineno: int | None = None) -> Instruction:
    """Parse one instruction line (comments already allowed). Raises on blank input."""
    code = " ".join(strip_comment(line).split())
    if not code:
        raise MalformedOperand("no instruction on line", lineno)
    try:
        return _parse_cached(code)
    except MalformedOperand as exc:
        if lineno is None:
            raise
        raise MalformedOperand(str(exc), lineno) from None


def parse_listing(text: str) -> list[Instruction]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if strip_comment(line):
            out.append(parse_instruction(line, lineno))
    return out


def normalize_operand(op: Operand) -> Operand:
    if op.kind == "immediate" or (op.kind == "memory" and op.displacement_present):
        return replace(op, value=None)
    if op.kind == "label":
        return replace(op, label=LABEL)
    return op


def normalize(ins: Instruction) -> Instruction:
    """Replace immediates, displacements and label targets with generic tokens."""
    ops = tuple(normalize_operand(op) for op in ins.operands)
    norm = Instruction(ins.mnemonic, ops, "")
    return replace(norm, raw_text=norm.text)
