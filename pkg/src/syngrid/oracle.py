"""Referent resolution and the demonstration policy producing gold plans.

Navigation policy: turn to face the row direction and walk, then the column
direction. Turns use the fewest rotations; a half turn is two ``turn_right``.
``zigzagging`` alternates single steps between axes (column axis first) while
both displacements remain. ``spinning`` inserts four ``turn_left`` before each
``walk``. ``push``/``pull`` are appended once for sizes 1-2 and twice for 3-4.

A box of size ``s`` anchored at ``(r, c)`` covers cells ``r..r+s-1`` by
``c..c+s-1``; an object is "inside of" it when its cell lies in that footprint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from syngrid.errors import AmbiguousReferent, NoReferent
from syngrid.gridworld import ORIENTATIONS, ObjectSpec, World, replay
from syngrid.grammar import CommandAst, NounPhrase


@dataclass(frozen=True)
class Referent:
    row: int
    col: int
    object: ObjectSpec


def _matches(obj: ObjectSpec, np_: NounPhrase) -> bool:
    if np_.shape_word != "object" and obj.shape != np_.shape_word:
        return False
    return np_.color is None or obj.color == np_.color


def _apply_size(items: list, np_: NounPhrase) -> list:
    if np_.size_word is None or not items:
        return items
    sizes = [o.size for _, _, o in items]
    keep = min(sizes) if np_.size_word == "small" else max(sizes)
    return [it for it in items if it[2].size == keep]


def _in_box(r: int, c: int, box_r: int, box_c: int, box: ObjectSpec) -> bool:
    return box_r <= r < box_r + box.size and box_c <= c < box_c + box.size


def _related(kind: str, cand: tuple, other: tuple) -> bool:
    (r, c, obj), (r2, c2, obj2) = cand, other
    if (r, c) == (r2, c2):
        return False
    if kind == "same_row":
        return r == r2
    if kind == "same_column":
        return c == c2
    if kind == "same_color":
        return obj.color == obj2.color
    if kind == "inside_of":
        return obj2.shape == "box" and _in_box(r, c, r2, c2, obj2)
    raise ValueError(f"unknown relation {kind!r}")


def denotation(world: World, np_: NounPhrase) -> list[tuple[int, int, ObjectSpec]]:
    """All objects the noun phrase can refer to (possibly several, possibly none)."""
    items = [it for it in world.iter_objects() if _matches(it[2], np_)]
    for kind, nested in np_.relations:
        others = denotation(world, nested)
        items = [it for it in items if any(_related(kind, it, o) for o in others)]
    return _apply_size(items, np_)


def resolve(world: World, ast: CommandAst) -> Referent:
    found = denotation(world, ast.target)
    if not found:
        raise NoReferent("no object matches the command")
    if len(found) > 1:
        cells = [(r, c) for r, c, _ in found]
        raise AmbiguousReferent(f"{len(found)} objects match the command: {cells}")
    r, c, obj = found[0]
    return Referent(r, c, obj)


def _rotate(facing: str, target: str) -> list[str]:
    diff = (ORIENTATIONS.index(target) - ORIENTATIONS.index(facing)) % 4
    return {0: [], 1: ["turn_right"], 2: ["turn_right", "turn_right"], 3: ["turn_left"]}[diff]


def plan(world: World, referent: Referent, verb: str, adverb: Optional[str] = None) -> list[str]:
    agent = world.agent
    dr, dc = referent.row - agent.row, referent.col - agent.col
    row_dir = "south" if dr > 0 else "north"
    col_dir = "east" if dc > 0 else "west"
    if adverb == "zigzagging" and dr and dc:
        steps: list[str] = []
        nr, nc = abs(dr), abs(dc)
        while nr and nc:
            steps.extend([col_dir, row_dir])
            nr -= 1
            nc -= 1
        steps.extend([row_dir] * nr + [col_dir] * nc)
    else:
        steps = [row_dir] * abs(dr) + [col_dir] * abs(dc)

    actions: list[str] = []
    facing = agent.orientation
    for direction in steps:
        actions.extend(_rotate(facing, direction))
        facing = direction
        if adverb == "spinning":
            actions.extend(["turn_left"] * 4)
        actions.append("walk")
    if verb in ("push", "pull"):
        actions.extend([verb] * (1 if referent.object.size <= 2 else 2))
    return actions


def oracle(world: World, ast: CommandAst) -> list[str]:
    return plan(world, resolve(world, ast), ast.verb, ast.adverb)


def replay_reaches(world: World, actions: list[str], referent: Referent) -> bool:
    end = replay(world, actions).agent
    return (end.row, end.col) == (referent.row, referent.col)
