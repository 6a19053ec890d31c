"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

from typing import Sequence

from syngrid.dataset import Episode
from syngrid.gridworld import ACTIONS


def check_episodes(X) -> list[Episode]:
    """Accept episodes or JSON-lines records; return a list of episodes."""
    if X is None:
        raise ValueError("expected a sequence of episodes, got None")
    if isinstance(X, (str, bytes)):
        raise TypeError("expected a sequence of episodes, got a string")
    out = []
    for i, item in enumerate(X):
        if isinstance(item, Episode):
            out.append(item)
        elif isinstance(item, dict):
            out.append(Episode.from_record(item))
        else:
            raise TypeError(f"item {i}: expected Episode or record dict, got {type(item).__name__}")
    return out


def check_targets(y, n: int) -> list[tuple[str, ...]]:
    targets = [tuple(seq) for seq in y]
    if len(targets) != n:
        raise ValueError(f"got {len(targets)} targets for {n} episodes")
    for i, seq in enumerate(targets):
        bad = [a for a in seq if a not in ACTIONS]
        if bad:
            raise ValueError(f"target {i} holds unknown actions {bad}")
    return targets


def check_positive(name: str, value: int) -> int:
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return value


def check_choice(name: str, value: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value
