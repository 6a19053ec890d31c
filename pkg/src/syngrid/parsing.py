"""Rule-based dependency and constituency parsing of grammar commands, and
the boolean self-attention masks derived from the parse trees.

Dependency attachment rules, applied to the command AST:

* the verb token (``walk`` of ``walk to``) is the root; ``to`` is ``fixed`` on it
* the target NP's noun is the verb's ``obj``
* ``the`` is ``det`` and size/color words are ``amod`` on their noun
* the first relation word (``row``/``column``/``color``/``inside``) is ``acl``
  on the governing noun; the remaining relation-phrase words attach to it
  (``in`` as ``case``, the rest ``fixed``) and ``that``/``is`` as ``mark``
* the embedded NP's noun is ``nmod`` on its relation word
* a second relation word is ``conj`` on the first, with ``and`` as its ``cc``
* the adverb is ``advmod`` on the verb and ``while`` is ``mark`` on the adverb

Heads are 0-based token indices; the root's head is ``ROOT`` (-1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from syngrid.errors import MalformedCommand
from syngrid.grammar import (
    RELATION_HEADS,
    RELATION_TOKENS,
    VERB_TOKENS,
    CommandAst,
    NounPhrase,
    parse_ast,
    render,
)

ROOT = -1
LABELS = ("root", "det", "amod", "case", "obj", "obl", "acl", "nmod", "cc", "conj", "mark", "advmod", "fixed")
PHRASE_LABELS = ("VP", "NP", "RELP", "ADVP")


@dataclass(frozen=True)
class DependencyTree:
    tokens: tuple
    heads: tuple
    labels: tuple

    @property
    def n(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        """Check a single root, in-range heads and acyclicity."""
        n = self.n
        if len(self.heads) != n or len(self.labels) != n:
            raise ValueError("heads/labels length must match token count")
        roots = [i for i, h in enumerate(self.heads) if h == ROOT]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        for i, h in enumerate(self.heads):
            if h != ROOT and not 0 <= h < n:
                raise ValueError(f"head of token {i} out of range: {h}")
            if h == i:
                raise ValueError(f"token {i} heads itself")
        for i in range(n):
            seen = set()
            j = i
            while j != ROOT:
                if j in seen:
                    raise ValueError(f"cycle through token {i}")
                seen.add(j)
                j = self.heads[j]

    def edges(self) -> list[tuple[int, int]]:
        return [(i, h) for i, h in enumerate(self.heads) if h != ROOT]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "heads": list(self.heads), "labels": list(self.labels)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class Constituent:
    label: str
    children: list = field(default_factory=list)  # Constituent or int leaf index

    def leaves(self) -> list[int]:
        out: list[int] = []
        for child in self.children:
            if isinstance(child, Constituent):
                out.extend(child.leaves())
            else:
                out.append(child)
        return out

    def nodes(self):
        yield self
        for child in self.children:
            if isinstance(child, Constituent):
                yield from child.nodes()


@dataclass
class ConstituencyTree:
    tokens: tuple
    root: Constituent

    @property
    def n(self) -> int:
        return len(self.tokens)

    def leaf_parents(self) -> list[Constituent]:
        parents: list[Optional[Constituent]] = [None] * self.n
        for node in self.root.nodes():
            for child in node.children:
                if not isinstance(child, Constituent):
                    parents[child] = node
        return parents  # type: ignore[return-value]

    def bracketed(self) -> str:
        def show(node: Constituent) -> str:
            parts = [node.label]
            for child in node.children:
                parts.append(show(child) if isinstance(child, Constituent) else self.tokens[child])
            return "(" + " ".join(parts) + ")"

        return show(self.root)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    allow: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return np.array_equal(self.allow, other.allow)

    __hash__ = None

    @property
    def n(self) -> int:
        return self.allow.shape[0]

    def to_list(self) -> list[list[int]]:
        return self.allow.astype(int).tolist()

    def to_json(self) -> str:
        return json.dumps(self.to_list())

    @classmethod
    def from_list(cls, rows) -> "AttentionMask":
        return cls(np.asarray(rows, dtype=bool))


def _coerce(ast: Optional[CommandAst], tokens) -> tuple[CommandAst, list[str]]:
    if tokens is None:
        if ast is None:
            raise ValueError("need an AST or tokens")
        return ast, render(ast)
    toks = tokens.split() if isinstance(tokens, str) else list(tokens)
    if ast is None:
        ast = parse_ast(toks)
    if render(ast) != toks:
        raise MalformedCommand("tokens do not match the rendering of the AST")
    return ast, toks


class _Builder:
    def __init__(self, n: int):
        self.heads = [ROOT] * n
        self.labels = ["root"] * n
        self.pos = 0

    def attach(self, dep: int, head: int, label: str) -> None:
        self.heads[dep] = head
        self.labels[dep] = label


def _dep_np(b: _Builder, np_: NounPhrase, governor: int, label: str) -> int:
    """Attach the NP starting at ``b.pos``; return its noun index."""
    start = b.pos
    n_mods = (np_.size_word is not None) + (np_.color is not None)
    noun = start + 1 + n_mods
    b.attach(start, noun, "det")
    for k in range(n_mods):
        b.attach(start + 1 + k, noun, "amod")
    b.attach(noun, governor, label)
    b.pos = noun + 1
    first_rel = None
    for i, (kind, nested) in enumerate(np_.relations):
        connective = [b.pos, b.pos + 1] if i == 0 else [b.pos]
        b.pos += len(connective)
        phrase = RELATION_TOKENS[kind]
        rel_idx = b.pos + phrase.index(RELATION_HEADS[kind])
        if i == 0:
            first_rel = rel_idx
            b.attach(rel_idx, noun, "acl")
            for c in connective:
                b.attach(c, rel_idx, "mark")
        else:
            b.attach(rel_idx, first_rel, "conj")
            b.attach(connective[0], rel_idx, "cc")
        for k, word in enumerate(phrase):
            idx = b.pos + k
            if idx != rel_idx:
                b.attach(idx, rel_idx, "case" if word == "in" else "fixed")
        b.pos += len(phrase)
        _dep_np(b, nested, rel_idx, "nmod")
    return noun


def parse_dependency(ast: Optional[CommandAst] = None, tokens=None) -> DependencyTree:
    ast, toks = _coerce(ast, tokens)
    b = _Builder(len(toks))
    verb = 0
    b.attach(verb, ROOT, "root")
    for k in range(1, len(VERB_TOKENS[ast.verb])):
        b.attach(k, verb, "fixed")
    b.pos = len(VERB_TOKENS[ast.verb])
    _dep_np(b, ast.target, verb, "obj")
    if ast.adverb:
        b.attach(b.pos, b.pos + 1, "mark")
        b.attach(b.pos + 1, verb, "advmod")
        b.pos += 2
    assert b.pos == len(toks)
    tree = DependencyTree(tuple(toks), tuple(b.heads), tuple(b.labels))
    tree.validate()
    return tree


def _const_np(np_: NounPhrase, pos: int) -> tuple[Constituent, int]:
    width = 2 + (np_.size_word is not None) + (np_.color is not None)
    base = Constituent("NP", list(range(pos, pos + width)))
    pos += width
    if not np_.relations:
        return base, pos
    outer = Constituent("NP", [base])
    for i, (kind, nested) in enumerate(np_.relations):
        connective = [pos, pos + 1] if i == 0 else [pos]
        outer.children.extend(connective)
        pos += len(connective)
        phrase_len = len(RELATION_TOKENS[kind])
        relp = Constituent("RELP", list(range(pos, pos + phrase_len)))
        pos += phrase_len
        inner, pos = _const_np(nested, pos)
        relp.children.append(inner)
        outer.children.append(relp)
    return outer, pos


def parse_constituency(ast: Optional[CommandAst] = None, tokens=None) -> ConstituencyTree:
    ast, toks = _coerce(ast, tokens)
    n_verb = len(VERB_TOKENS[ast.verb])
    root = Constituent("VP", list(range(n_verb)))
    np_node, pos = _const_np(ast.target, n_verb)
    root.children.append(np_node)
    if ast.adverb:
        root.children.append(Constituent("ADVP", [pos, pos + 1]))
        pos += 2
    assert pos == len(toks)
    return ConstituencyTree(tuple(toks), root)


def mask_from_dependency(tree: DependencyTree) -> AttentionMask:
    n = tree.n
    allow = np.eye(n, dtype=bool)
    for dep, head in tree.edges():
        allow[dep, head] = True
        allow[head, dep] = True
    return AttentionMask(allow)


def mask_from_constituency(tree: ConstituencyTree) -> AttentionMask:
    n = tree.n
    allow = np.eye(n, dtype=bool)
    for i, parent in enumerate(tree.leaf_parents()):
        span = parent.leaves()
        allow[i, span] = True
        allow[span, i] = True
    return AttentionMask(allow)


def full_mask(n: int) -> AttentionMask:
    return AttentionMask(np.ones((n, n), dtype=bool))


def command_mask(command: Union[str, Sequence[str], CommandAst], source: str = "dependency") -> AttentionMask:
    """Convenience wrapper: parse a command and derive its mask."""
    if isinstance(command, CommandAst):
        ast, toks = command, None
    else:
        ast, toks = None, command
    if source == "dependency":
        return mask_from_dependency(parse_dependency(ast, toks))
    if source == "constituency":
        return mask_from_constituency(parse_constituency(ast, toks))
    raise ValueError(f"unknown mask source {source!r}")
