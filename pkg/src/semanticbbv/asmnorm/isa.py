"""Dialect tables: register classes, token-dimension enums and the mnemonic semantic table."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

INSTR_TYPES = ("arith", "logic", "datamove", "control", "compare", "stack", "other")
OPERAND_TYPES = ("none", "register", "immediate", "memory", "label")
REGISTER_CLASSES = ("none", "gp64", "gp32", "stack_ptr", "base_ptr", "instr_ptr", "flags_reg")
ACCESS_TYPES = ("none", "read", "write", "readwrite")
FLAG_EFFECTS = ("none", "sets_flags", "reads_flags", "sets_and_reads")

GP64 = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
GP32 = (
    "eax", "ebx", "ecx", "edx", "esi", "edi",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
)

REGISTERS: dict[str, str] = {r: "gp64" for r in GP64}
REGISTERS.update({r: "gp32" for r in GP32})
REGISTERS.update({"rsp": "stack_ptr", "rbp": "base_ptr", "rip": "instr_ptr", "rflags": "flags_reg"})

# 32-bit alias -> 64-bit register it lives in
ALIAS64 = dict(zip(GP32, GP64))

CONTROL_TRANSFERS = frozenset({"jmp", "je", "jne", "jl", "jge", "call", "ret"})
CONDITIONAL_JUMPS = frozenset({"je", "jne", "jl", "jge"})

_ACCESS_CODES = {"r": "read", "w": "write", "rw": "readwrite", "n": "none"}


@dataclass(frozen=True)
class MnemonicInfo:
    instr_type: str
    flag_effect: str
    access: tuple[str, ...]

    def access_at(self, pos: int) -> str:
        if pos < len(self.access):
            return self.access[pos]
        return "read"


UNKNOWN_MNEMONIC = MnemonicInfo("other", "none", ())


def parse_semantic_table(text: str) -> dict[str, MnemonicInfo]:
    table: dict[str, MnemonicInfo] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"semantic table line {lineno}: expected 4 columns, got {len(parts)}")
        mnemonic, itype, flags, access = parts
        if itype not in INSTR_TYPES:
            raise ValueError(f"semantic table line {lineno}: unknown instr_type {itype!r}")
        if flags not in FLAG_EFFECTS:
            raise ValueError(f"semantic table line {lineno}: unknown flag effect {flags!r}")
        codes = () if access == "-" else tuple(_ACCESS_CODES[c] for c in access.split(","))
        table[mnemonic] = MnemonicInfo(itype, flags, codes)
    return table


@lru_cache(maxsize=None)
def semantic_table() -> dict[str, MnemonicInfo]:
    """The shipped table, loaded once."""
    text = resources.files("semanticbbv.asmnorm").joinpath("data/semantics.tbl").read_text()
    return parse_semantic_table(text)


def mnemonic_info(mnemonic: str) -> MnemonicInfo:
    return semantic_table().get(mnemonic, UNKNOWN_MNEMONIC)
