"""Command language: AST types, rendering, parsing back and seeded sampling.

Surface template::

    VERB the [SIZE] [COLOR] SHAPE
         [that is REL the NP2 [and REL the NP3]]
         [while ADVERB]

Sampling probabilities (all independent):

    =====================  ===================================
    verb                   uniform over walk_to, push, pull
    adverb present         0.3, then uniform over the adverbs
    size word present      0.5, then uniform over small, big
    color present          0.5, then uniform over the colors
    head shape word        uniform over the 5 shape words
    relation count         uniform over 0..max_relations
    relation kind          uniform over the 4 relations
    nested shape word      uniform over the 5 shape words,
                           forced to ``box`` under inside_of
    =====================  ===================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from syngrid.errors import MalformedCommand
from syngrid.gridworld import COLORS

VERBS = ("walk_to", "push", "pull")
ADVERBS = ("zigzagging", "spinning")
SIZE_WORDS = ("small", "big")
SHAPE_WORDS = ("circle", "square", "cylinder", "box", "object")
RELATIONS = ("same_row", "same_column", "same_color", "inside_of")

VERB_TOKENS = {"walk_to": ("walk", "to"), "push": ("push",), "pull": ("pull",)}
RELATION_TOKENS = {
    "same_row": ("in", "the", "same", "row", "as"),
    "same_column": ("in", "the", "same", "column", "as"),
    "same_color": ("in", "the", "same", "color", "as"),
    "inside_of": ("inside", "of"),
}
# content word of each relation phrase; the dependency head of the phrase
RELATION_HEADS = {"same_row": "row", "same_column": "column", "same_color": "color", "inside_of": "inside"}

P_ADVERB = 0.3
P_SIZE = 0.5
P_COLOR = 0.5

GRAMMAR_VERSION = "1"


def _vocabulary() -> tuple[str, ...]:
    words: list[str] = []
    for seq in VERB_TOKENS.values():
        words.extend(seq)
    words.append("the")
    words.extend(SIZE_WORDS)
    words.extend(COLORS)
    words.extend(SHAPE_WORDS)
    words.extend(["that", "is"])
    for seq in RELATION_TOKENS.values():
        words.extend(seq)
    words.extend(["and", "while"])
    words.extend(ADVERBS)
    return tuple(dict.fromkeys(words))


VOCABULARY = _vocabulary()


@dataclass(frozen=True)
class NounPhrase:
    shape_word: str
    color: Optional[str] = None
    size_word: Optional[str] = None
    relations: tuple = ()

    def __post_init__(self):
        if self.shape_word not in SHAPE_WORDS:
            raise ValueError(f"unknown shape word {self.shape_word!r}")
        if self.color is not None and self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size_word is not None and self.size_word not in SIZE_WORDS:
            raise ValueError(f"unknown size word {self.size_word!r}")
        rels = tuple((kind, np_) for kind, np_ in self.relations)
        if len(rels) > 2:
            raise ValueError("a noun phrase takes at most two relations")
        for kind, nested in rels:
            if kind not in RELATIONS:
                raise ValueError(f"unknown relation {kind!r}")
            if not isinstance(nested, NounPhrase):
                raise TypeError("relation target must be a NounPhrase")
            if nested.relations:
                raise ValueError("nested noun phrases cannot carry relations")
        object.__setattr__(self, "relations", rels)

    def tokens(self) -> list[str]:
        out = ["the"]
        if self.size_word:
            out.append(self.size_word)
        if self.color:
            out.append(self.color)
        out.append(self.shape_word)
        for i, (kind, nested) in enumerate(self.relations):
            out.extend(["that", "is"] if i == 0 else ["and"])
            out.extend(RELATION_TOKENS[kind])
            out.extend(nested.tokens())
        return out

    def has_attribute_pair(self, color: str, shape: str) -> bool:
        """True if this NP or any nested NP mentions ``color`` and ``shape`` together."""
        if self.color == color and self.shape_word == shape:
            return True
        return any(n.has_attribute_pair(color, shape) for _, n in self.relations)


@dataclass(frozen=True)
class CommandAst:
    verb: str
    target: NounPhrase
    adverb: Optional[str] = None

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.adverb is not None and self.adverb not in ADVERBS:
            raise ValueError(f"unknown adverb {self.adverb!r}")

    @property
    def relation_kinds(self) -> tuple[str, ...]:
        return tuple(kind for kind, _ in self.target.relations)

    def to_dict(self) -> dict:
        def np_dict(np_: NounPhrase) -> dict:
            return {
                "shape_word": np_.shape_word,
                "color": np_.color,
                "size_word": np_.size_word,
                "relations": [[k, np_dict(n)] for k, n in np_.relations],
            }

        return {"verb": self.verb, "target": np_dict(self.target), "adverb": self.adverb}

    @classmethod
    def from_dict(cls, data: dict) -> "CommandAst":
        def np_from(d: dict) -> NounPhrase:
            rels = tuple((k, np_from(n)) for k, n in d.get("relations", []))
            return NounPhrase(d["shape_word"], d.get("color"), d.get("size_word"), rels)

        return cls(data["verb"], np_from(data["target"]), data.get("adverb"))


def render(ast: CommandAst) -> list[str]:
    tokens = list(VERB_TOKENS[ast.verb])
    tokens.extend(ast.target.tokens())
    if ast.adverb:
        tokens.extend(["while", ast.adverb])
    return tokens


def render_text(ast: CommandAst) -> str:
    return " ".join(render(ast))


def tokenize(command: Union[str, Sequence[str]]) -> list[str]:
    tokens = command.split() if isinstance(command, str) else list(command)
    for tok in tokens:
        if tok not in VOCABULARY:
            raise MalformedCommand(f"out-of-vocabulary token {tok!r}")
    return tokens


class _Reader:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, *expected: str) -> str:
        tok = self.peek()
        if tok is None or (expected and tok not in expected):
            want = " or ".join(repr(e) for e in expected) or "a token"
            raise MalformedCommand(f"expected {want} at position {self.pos}, got {tok!r}")
        self.pos += 1
        return tok

    def take_seq(self, seq: Sequence[str]) -> None:
        for word in seq:
            self.take(word)


def _parse_np(reader: _Reader, allow_relations: bool) -> NounPhrase:
    reader.take("the")
    size_word = reader.take() if reader.peek() in SIZE_WORDS else None
    color = reader.take() if reader.peek() in COLORS else None
    shape = reader.take(*SHAPE_WORDS)
    relations = []
    if allow_relations and reader.peek() == "that":
        reader.take_seq(("that", "is"))
        relations.append(_parse_relation(reader))
        if reader.peek() == "and":
            reader.take("and")
            relations.append(_parse_relation(reader))
    return NounPhrase(shape, color, size_word, tuple(relations))


def _parse_relation(reader: _Reader) -> tuple[str, NounPhrase]:
    first = reader.peek()
    if first == "inside":
        kind = "inside_of"
    elif first == "in":
        word = reader.tokens[reader.pos + 3] if reader.pos + 3 < len(reader.tokens) else None
        kinds = {RELATION_HEADS[k]: k for k in ("same_row", "same_column", "same_color")}
        if word not in kinds:
            raise MalformedCommand(f"unknown relation phrase at position {reader.pos}")
        kind = kinds[word]
    else:
        raise MalformedCommand(f"expected a relation phrase at position {reader.pos}, got {first!r}")
    reader.take_seq(RELATION_TOKENS[kind])
    return kind, _parse_np(reader, allow_relations=False)


def parse_ast(tokens: Union[str, Sequence[str]]) -> CommandAst:
    """Inverse of :func:`render`; raises :class:`MalformedCommand` off-grammar."""
    reader = _Reader(tokenize(tokens))
    first = reader.take("walk", "push", "pull")
    if first == "walk":
        reader.take("to")
        verb = "walk_to"
    else:
        verb = first
    target = _parse_np(reader, allow_relations=True)
    adverb = None
    if reader.peek() == "while":
        reader.take("while")
        adverb = reader.take(*ADVERBS)
    if reader.peek() is not None:
        raise MalformedCommand(f"trailing tokens from position {reader.pos}: {reader.tokens[reader.pos:]}")
    return CommandAst(verb, target, adverb)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _sample_np(rng: np.random.Generator, shape_choices: Sequence[str]) -> NounPhrase:
    size_word = SIZE_WORDS[rng.integers(2)] if rng.random() < P_SIZE else None
    color = COLORS[rng.integers(len(COLORS))] if rng.random() < P_COLOR else None
    shape = shape_choices[rng.integers(len(shape_choices))]
    return NounPhrase(shape, color, size_word)


def sample_command(rng_seed, max_relations: int = 2) -> CommandAst:
    """Draw a command; deterministic for an integer seed (or a seeded Generator)."""
    if not 0 <= max_relations <= 2:
        raise ValueError("max_relations must be in [0, 2]")
    rng = _as_rng(rng_seed)
    verb = VERBS[rng.integers(len(VERBS))]
    adverb = ADVERBS[rng.integers(len(ADVERBS))] if rng.random() < P_ADVERB else None
    head = _sample_np(rng, SHAPE_WORDS)
    n_rel = int(rng.integers(max_relations + 1))
    relations = []
    for _ in range(n_rel):
        kind = RELATIONS[rng.integers(len(RELATIONS))]
        nested = _sample_np(rng, ("box",) if kind == "inside_of" else SHAPE_WORDS)
        relations.append((kind, nested))
    target = NounPhrase(head.shape_word, head.color, head.size_word, tuple(relations))
    return CommandAst(verb, target, adverb)
