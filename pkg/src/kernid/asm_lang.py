"""Assembly instruction tokenization, numeric blurring, vocabularies, and
out-of-vocabulary reporting.

An instruction splits into an opcode and operand tokens.  Compound memory
operands like ``[rbx+0x73ff]`` decompose into sub-tokens (base register,
index register, displacement).  Numeric literals are blurred: values whose
magnitude reaches 1000 collapse onto the single token ``large``, smaller
ones are normalized to their decimal rendering so hex and decimal spellings
collide.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from kernid.errors import DataError

BLUR_THRESHOLD = 1000
LARGE_TOKEN = "large"
UNK_KEY = "special:<unk>"
NO_OPERAND_KEY = "special:<no_operand>"
LARGE_KEY = "arg:" + LARGE_TOKEN

_NUMERIC_RE = re.compile(r"^-?(0[xX][0-9a-fA-F]+|\d+)$")
_LEXEME_RE = re.compile(r"-?0[xX][0-9a-fA-F]+|-?\d+|[a-zA-Z_$.@][\w$.@]*")


class TokenRole(Enum):
    OPCODE = "op"
    OPERAND = "arg"


@dataclass(frozen=True)
class Token:
    role: TokenRole
    text: str

    @property
    def key(self) -> str:
        """Role-prefixed vocabulary key, e.g. ``op:push`` / ``arg:rbx``."""
        return f"{self.role.value}:{self.text}"


@dataclass(frozen=True)
class ParsedInstruction:
    opcode: Token
    operands: tuple[Token, ...]

    def token_keys(self) -> list[str]:
        return [self.opcode.key] + [t.key for t in self.operands]


class ParseError(DataError):
    """Raised for instruction text that cannot be tokenized."""


def blur_value(literal: str) -> str:
    """Blur a numeric literal; non-numeric text passes through unchanged.

    Magnitudes below 1000 keep their (decimal-normalized) value; everything
    else becomes the ``large`` token.  Idempotent by construction.
    """
    if not _NUMERIC_RE.match(literal):
        return literal
    value = int(literal, 16) if "0x" in literal.lower() else int(literal, 10)
    if abs(value) < BLUR_THRESHOLD:
        return str(value)
    return LARGE_TOKEN


def parse_instruction(line: str) -> ParsedInstruction:
    """Split one instruction line into an opcode token and operand tokens.

    The first whitespace-delimited word is the opcode; the remainder splits
    on commas, and each piece decomposes into register/symbol/number
    sub-tokens with numbers routed through blur_value.
    """
    text = line.strip().lower()
    if not text:
        raise ParseError("empty instruction line")
    parts = text.split(None, 1)
    opcode = Token(TokenRole.OPCODE, parts[0])
    operands: list[Token] = []
    if len(parts) > 1:
        for chunk in parts[1].split(","):
            for lexeme in _LEXEME_RE.findall(chunk):
                operands.append(Token(TokenRole.OPERAND, blur_value(lexeme)))
    return ParsedInstruction(opcode=opcode, operands=tuple(operands))


@dataclass
class Vocabulary:
    """Token index with dense ids 0..|V|-1.

    ``counts`` keeps raw occurrence counts for every token ever seen in the
    training corpus, including ones pruned by min_count; ``entries`` holds
    only indexed tokens.  The three specials (large, unk, no-operand) are
    always indexed.
    """

    entries: dict[str, int]
    counts: dict[str, int]
    min_count: int = 1
    specials: tuple[str, ...] = (LARGE_KEY, UNK_KEY, NO_OPERAND_KEY)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def unk_index(self) -> int:
        return self.entries[UNK_KEY]

    @property
    def no_operand_index(self) -> int:
        return self.entries[NO_OPERAND_KEY]

    def lookup(self, key: str) -> int:
        return self.entries.get(key, self.entries[UNK_KEY])

    def seen_in_training(self, key: str) -> bool:
        return key in self.counts

    def content_hash(self) -> str:
        from kernid.hashutil import fnv1a64

        desc = ";".join(f"{k}={i}:{self.counts.get(k, 0)}" for k, i in sorted(self.entries.items()))
        return f"{fnv1a64(desc):016x}"


def iter_corpus_instructions(corpus) -> list[ParsedInstruction]:
    parsed = []
    for fn in corpus.functions:
        for line in fn.instruction_lines():
            parsed.append(parse_instruction(line))
    return parsed


def build_vocab(train, min_count: int = 1) -> Vocabulary:
    """Count tokens over the training corpus and assign deterministic ids.

    Indices go to tokens with count >= min_count plus the specials, ordered
    by descending count then lexicographic key.
    """
    if not train.functions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for ins in iter_corpus_instructions(train):
        for key in ins.token_keys():
            counts[key] = counts.get(key, 0) + 1
    kept = {k for k, c in counts.items() if c >= min_count}
    kept.update((LARGE_KEY, UNK_KEY, NO_OPERAND_KEY))
    ordered = sorted(kept, key=lambda k: (-counts.get(k, 0), k))
    entries = {k: i for i, k in enumerate(ordered)}
    return Vocabulary(entries=entries, counts=counts, min_count=min_count)


@dataclass
class OovReport:
    """Out-of-vocabulary ratios of a test corpus against training data.

    native_ratio treats each whole instruction string as one word;
    fine_ratio counts instructions with at least one blurred token never
    seen in training.  fine_ratio <= native_ratio always holds: an
    instruction string present in training contributes all its tokens.
    """

    native_ratio: float
    fine_ratio: float
    test_instructions: int
    train_instructions: int = 0

    def to_json(self) -> dict:
        return {
            "native_ratio": self.native_ratio,
            "fine_ratio": self.fine_ratio,
            "test_instructions": self.test_instructions,
            "train_instructions": self.train_instructions,
            "version": 1,
        }


def render_instruction(line: str) -> str:
    """Canonical whole-instruction string for native (word-level) OOV."""
    return " ".join(line.strip().lower().split())


def oov_report(vocab: Vocabulary, train, test) -> OovReport:
    """Compute native and fine-grained OOV ratios of test against train."""
    test_lines = [line for fn in test.functions for line in fn.instruction_lines()]
    if not test_lines:
        raise DataError("cannot compute OOV ratios on an empty test corpus")
    train_lines = [line for fn in train.functions for line in fn.instruction_lines()]
    train_strings = {render_instruction(line) for line in train_lines}

    native_misses = 0
    fine_misses = 0
    for line in test_lines:
        if render_instruction(line) not in train_strings:
            native_misses += 1
        tokens = parse_instruction(line).token_keys()
        if any(not vocab.seen_in_training(k) for k in tokens):
            fine_misses += 1
    n = len(test_lines)
    return OovReport(
        native_ratio=native_misses / n,
        fine_ratio=fine_misses / n,
        test_instructions=n,
        train_instructions=len(train_lines),
    )
