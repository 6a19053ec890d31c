"""Episode generation, compositional splits and JSON-lines corpus files.

Every episode is drawn from its own generator seeded by
``(seed, pool, index)``, so pools are reproducible, disjoint across pools and
can be generated in independent shards and concatenated by index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from syngrid.errors import AmbiguousReferent, EmptySplit, GenerationExhausted, NoReferent
from syngrid.grammar import GRAMMAR_VERSION, CommandAst, NounPhrase, parse_ast, render, sample_command
from syngrid.gridworld import COLORS, GRID_SIZE, ORIENTATIONS, SHAPES, AgentState, ObjectSpec, World
from syngrid.oracle import Referent, oracle, plan, resolve
from syngrid.parsing import AttentionMask, DependencyTree, mask_from_dependency, parse_dependency

logger = logging.getLogger(__name__)

MIN_OBJECTS = 3
MAX_OBJECTS = 8
WORLD_ATTEMPTS = 40  # world samples per command before drawing a new command
COMMAND_ATTEMPTS = 200  # commands per episode before GenerationExhausted
PREDICATE_ATTEMPTS = 5000  # command draws when conditioning on a split predicate

POOL_TRAIN = 0
POOL_TEST = 100
POOL_VAL = 200


@dataclass(frozen=True)
class Episode:
    world: World
    tokens: tuple
    ast: CommandAst
    dep_tree: DependencyTree
    mask: AttentionMask
    actions: tuple
    split_tag: str = ""

    @property
    def command(self) -> str:
        return " ".join(self.tokens)

    @classmethod
    def build(cls, world: World, ast: CommandAst, split_tag: str = "") -> "Episode":
        tokens = tuple(render(ast))
        tree = parse_dependency(ast, tokens)
        return cls(world, tokens, ast, tree, mask_from_dependency(tree), tuple(oracle(world, ast)), split_tag)

    def to_record(self, include_mask: bool = False) -> dict:
        rec = {
            "world": self.world.to_dict(),
            "command": self.command,
            "dep_heads": list(self.dep_tree.heads),
            "actions": list(self.actions),
            "split": self.split_tag,
        }
        if include_mask:
            rec["mask"] = self.mask.to_list()
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        world = World.from_dict(rec["world"])
        ast = parse_ast(rec["command"])
        ep = cls.build(world, ast, rec.get("split", ""))
        if list(ep.dep_tree.heads) != list(rec.get("dep_heads", ep.dep_tree.heads)):
            raise ValueError(f"stored dependency heads disagree with the parser for {rec['command']!r}")
        if "mask" in rec and rec["mask"] is not None:
            stored = np.asarray(rec["mask"], dtype=bool)
            if not np.array_equal(stored, ep.mask.allow):
                raise ValueError(f"stored mask disagrees with the parser for {rec['command']!r}")
        if tuple(rec["actions"]) != ep.actions:
            raise ValueError(f"stored actions disagree with the oracle for {rec['command']!r}")
        return ep


# -- split predicates -------------------------------------------------------


def _a1_ast(ast: CommandAst) -> bool:
    return ast.target.has_attribute_pair("yellow", "square")


def _b2_ast(ast: CommandAst) -> bool:
    kinds = set(ast.relation_kinds)
    return "same_row" in kinds and "inside_of" in kinds


def _c1_ast(ast: CommandAst) -> bool:
    return len(ast.target.relations) == 2


def _a1_tokens(tokens: Sequence[str]) -> bool:
    # a color word always sits directly before its NP's shape word
    return any(a == "yellow" and b == "square" for a, b in zip(tokens, tokens[1:]))


def _b2_tokens(tokens: Sequence[str]) -> bool:
    return "row" in tokens and "inside" in tokens


def _c1_tokens(tokens: Sequence[str]) -> bool:
    return "and" in tokens


@dataclass(frozen=True)
class SplitSpec:
    """A held-out predicate, decidable both on the AST and on the token string."""

    name: str
    predicate: Optional[Callable[[CommandAst], bool]] = field(default=None, compare=False)
    token_predicate: Optional[Callable[[Sequence[str]], bool]] = field(default=None, compare=False)

    def held_out(self, ast: CommandAst) -> bool:
        return bool(self.predicate and self.predicate(ast))

    def held_out_tokens(self, tokens: Sequence[str]) -> bool:
        return bool(self.token_predicate and self.token_predicate(tokens))

    @property
    def compositional(self) -> bool:
        return self.predicate is not None


SPLITS = {
    "random": SplitSpec("random"),
    "a1": SplitSpec("a1_color_shape", _a1_ast, _a1_tokens),
    "b2": SplitSpec("b2_relation_cooccur", _b2_ast, _b2_tokens),
    "c1": SplitSpec("c1_clause_depth", _c1_ast, _c1_tokens),
}


def get_split(name: str) -> SplitSpec:
    for key, spec in SPLITS.items():
        if name in (key, spec.name):
            return spec
    raise KeyError(f"unknown split {name!r}; choose from {sorted(SPLITS)}")


# -- world sampling ---------------------------------------------------------


def _concrete(np_: NounPhrase, rng: np.random.Generator, color: Optional[str] = None) -> ObjectSpec:
    shape = np_.shape_word if np_.shape_word != "object" else SHAPES[rng.integers(len(SHAPES))]
    color = np_.color or color or COLORS[rng.integers(len(COLORS))]
    return ObjectSpec(color, shape, int(rng.integers(1, 5)))


def _empty_cells(occupied: dict) -> list[tuple[int, int]]:
    return [(r, c) for r in range(GRID_SIZE) for c in range(GRID_SIZE) if (r, c) not in occupied]


def _pick(rng: np.random.Generator, cells: list):
    return cells[int(rng.integers(len(cells)))] if cells else None


def _near_miss(obj: ObjectSpec, rng: np.random.Generator) -> ObjectSpec:
    """Copy of ``obj`` with one attribute changed (or the same object at another size)."""
    which = int(rng.integers(3))
    if which == 0:
        return ObjectSpec(COLORS[rng.integers(len(COLORS))], obj.shape, obj.size)
    if which == 1:
        return ObjectSpec(obj.color, SHAPES[rng.integers(len(SHAPES))], obj.size)
    return ObjectSpec(obj.color, obj.shape, int(rng.integers(1, 5)))


def sample_world(ast: CommandAst, rng: np.random.Generator) -> Optional[World]:
    """Place a referent, objects satisfying its relations, and distractors.

    Returns ``None`` when the relations cannot be satisfied by this draw.
    """
    target_np = ast.target
    color_hint = None
    for kind, nested in target_np.relations:
        if kind == "same_color" and nested.color is not None:
            if target_np.color is not None and target_np.color != nested.color:
                return None
            color_hint = nested.color
    target = _concrete(target_np, rng, color_hint)
    occupied: dict = {}
    cell = _pick(rng, _empty_cells(occupied))
    occupied[cell] = target
    tr, tc = cell

    for kind, nested in target_np.relations:
        if kind == "inside_of":
            size = int(rng.integers(2, 5))
            anchors = [
                (r, c)
                for r in range(max(0, tr - size + 1), min(tr, GRID_SIZE - size) + 1)
                for c in range(max(0, tc - size + 1), min(tc, GRID_SIZE - size) + 1)
                if (r, c) not in occupied
            ]
            spot = _pick(rng, anchors)
            color = nested.color or COLORS[rng.integers(len(COLORS))]
            obj = ObjectSpec(color, "box", size)
        else:
            free = _empty_cells(occupied)
            if kind == "same_row":
                free = [p for p in free if p[0] == tr]
            elif kind == "same_column":
                free = [p for p in free if p[1] == tc]
            spot = _pick(rng, free)
            obj = _concrete(nested, rng, target.color if kind == "same_color" else None)
            if kind == "same_color" and obj.color != target.color:
                return None
        if spot is None:
            return None
        occupied[spot] = obj

    n_total = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    while len(occupied) < n_total:
        spot = _pick(rng, _empty_cells(occupied))
        if rng.random() < 0.5:
            obj = _near_miss(target, rng)
        else:
            obj = ObjectSpec(
                COLORS[rng.integers(len(COLORS))], SHAPES[rng.integers(len(SHAPES))], int(rng.integers(1, 5))
            )
        occupied[spot] = obj

    ar, ac = _pick(rng, _empty_cells(occupied))
    agent = AgentState(ar, ac, ORIENTATIONS[rng.integers(4)])
    return World(agent, tuple(occupied.items()))


def _try_episode(ast: CommandAst, rng: np.random.Generator, split_tag: str) -> Optional[Episode]:
    for _ in range(WORLD_ATTEMPTS):
        world = sample_world(ast, rng)
        if world is None:
            continue
        try:
            resolve(world, ast)
        except (NoReferent, AmbiguousReferent):
            continue
        return Episode.build(world, ast, split_tag)
    return None


def sample_episode(
    seed_key: Sequence[int],
    max_relations: int,
    accept: Optional[Callable[[CommandAst], bool]] = None,
    split_tag: str = "",
) -> Episode:
    """Draw one episode whose command satisfies ``accept`` and whose referent is unique."""
    rng = np.random.default_rng(list(seed_key))
    for _ in range(COMMAND_ATTEMPTS):
        for _ in range(PREDICATE_ATTEMPTS):
            ast = sample_command(rng, max_relations)
            if accept is None or accept(ast):
                break
        else:
            raise GenerationExhausted(f"no command satisfied the predicate after {PREDICATE_ATTEMPTS} draws")
        episode = _try_episode(ast, rng, split_tag)
        if episode is not None:
            return episode
    raise GenerationExhausted(f"no valid episode for seed key {tuple(seed_key)} after {COMMAND_ATTEMPTS} commands")


def generate_pool(
    seed: int,
    pool: int,
    start: int,
    stop: int,
    max_relations: int,
    accept: Optional[Callable[[CommandAst], bool]] = None,
    split_tag: str = "",
) -> list[Episode]:
    """Episodes ``start..stop-1`` of one pool; shards concatenate by index."""
    return [sample_episode((seed, pool, i), max_relations, accept, split_tag) for i in range(start, stop)]


@dataclass
class Corpus:
    seed: int
    max_relations: int
    train: list
    tests: dict
    vals: dict = field(default_factory=dict)
    exclude: Optional[str] = None


def generate_corpus(
    seed: int,
    n_train: int,
    n_test_per_split: int,
    max_relations: int = 2,
    splits: Iterable[str] = ("random", "a1", "b2", "c1"),
    exclude: Optional[str] = None,
    n_val_per_split: int = 0,
) -> Corpus:
    """Generate a training pool plus one test (and optional validation) pool per split.

    Test and validation pools of compositional splits contain only commands
    satisfying the split's held-out predicate; they are always drawn with up to
    two relations so the depth split has material. ``exclude`` names a split
    whose held-out commands are rejected from the training pool.
    """
    if n_train < 1 or n_test_per_split < 1:
        raise ValueError("corpus sizes must be >= 1")
    splits = list(splits)
    reject = get_split(exclude) if exclude else None
    accept_train = (lambda a: not reject.held_out(a)) if reject and reject.compositional else None
    train = generate_pool(seed, POOL_TRAIN, 0, n_train, max_relations, accept_train, "train")
    tests, vals = {}, {}
    for k, name in enumerate(splits):
        spec = get_split(name)
        accept = spec.predicate if spec.compositional else None
        depth = 2 if spec.compositional else max_relations
        tests[name] = generate_pool(seed, POOL_TEST + k, 0, n_test_per_split, depth, accept, f"test_{name}")
        if n_val_per_split:
            vals[name] = generate_pool(seed, POOL_VAL + k, 0, n_val_per_split, depth, accept, f"val_{name}")
    logger.info("generated %d train episodes and %d test pools", len(train), len(tests))
    return Corpus(seed, max_relations, train, tests, vals, exclude)


def apply_split(corpus: Corpus, spec) -> tuple[list, list]:
    """Filter the training pool and pick the split's test pool."""
    spec = get_split(spec) if isinstance(spec, str) else spec
    key = next(k for k, s in SPLITS.items() if s == spec)
    if key not in corpus.tests:
        raise EmptySplit(f"corpus has no test pool for split {spec.name}")
    train = [ep for ep in corpus.train if not spec.held_out(ep.ast)]
    test = [ep for ep in corpus.tests[key] if not spec.compositional or spec.held_out(ep.ast)]
    if not train or not test:
        raise EmptySplit(f"split {spec.name} leaves train={len(train)} test={len(test)}")
    return train, test


# -- files ------------------------------------------------------------------


def write_jsonl(path, episodes: Iterable[Episode], include_mask: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record(include_mask), sort_keys=True) + "\n")


def read_jsonl(path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return [Episode.from_record(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path, **fields) -> None:
    data = {"grammar_version": GRAMMAR_VERSION, **fields}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def referent_of(ep: Episode) -> Referent:
    return resolve(ep.world, ep.ast)


def replan(ep: Episode) -> list[str]:
    ref = referent_of(ep)
    return plan(ep.world, ref, ep.ast.verb, ep.ast.adverb)
