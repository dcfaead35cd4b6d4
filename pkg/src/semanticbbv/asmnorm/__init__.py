"""Intel-syntax subset: parsing, normalization and six-dimensional tokenization."""

from .isa import CONDITIONAL_JUMPS, CONTROL_TRANSFERS, mnemonic_info, semantic_table
from .parse import (
    IMM,
    LABEL,
    MEM,
    Instruction,
    MalformedOperand,
    Operand,
    normalize,
    parse_instruction,
    parse_listing,
    strip_comment,
)
from .tokens import (
    BOS,
    DIMENSIONS,
    PAD,
    SPECIALS,
    UNK,
    TokenRecord,
    Vocabulary,
    build_vocab,
    tokenize,
    tokenize_block,
)

__all__ = [
    "BOS", "CONDITIONAL_JUMPS", "CONTROL_TRANSFERS", "DIMENSIONS", "IMM", "LABEL", "MEM", "PAD",
    "SPECIALS", "UNK", "Instruction", "MalformedOperand", "Operand", "TokenRecord", "Vocabulary",
    "build_vocab", "mnemonic_info", "normalize", "parse_instruction", "parse_listing",
    "semantic_table", "strip_comment", "tokenize", "tokenize_block",
]
