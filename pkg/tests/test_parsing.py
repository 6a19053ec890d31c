import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from parse_fixtures import CONSTITUENCY_FIXTURES, DEPENDENCY_FIXTURES, LABEL_FIXTURES

from syngrid.errors import MalformedCommand
from syngrid.grammar import CommandAst, NounPhrase, parse_ast, render, sample_command
from syngrid.parsing import (
    ROOT,
    Constituent,
    ConstituencyTree,
    DependencyTree,
    command_mask,
    mask_from_constituency,
    mask_from_dependency,
    parse_constituency,
    parse_dependency,
)


@pytest.mark.parametrize("command,heads", DEPENDENCY_FIXTURES)
def test_dependency_fixtures(command, heads):
    assert list(parse_dependency(tokens=command).heads) == heads


@pytest.mark.parametrize("command,labels", LABEL_FIXTURES)
def test_dependency_labels(command, labels):
    assert list(parse_dependency(tokens=command).labels) == labels


def test_worked_example_relation_words():
    command = DEPENDENCY_FIXTURES[9][0]
    tree = parse_dependency(tokens=command)
    toks = list(tree.tokens)
    inside, row = toks.index("inside"), toks.index("row")
    assert tree.heads[row] == inside and tree.labels[row] == "conj"
    assert tree.labels[inside] == "acl"


@pytest.mark.parametrize("command,bracketed", CONSTITUENCY_FIXTURES)
def test_constituency_fixtures(command, bracketed):
    tree = parse_constituency(tokens=command)
    assert tree.bracketed() == bracketed
    assert tree.root.leaves() == list(range(len(tree.tokens)))


def test_ast_and_token_mismatch_is_malformed():
    ast = CommandAst("push", NounPhrase("box"))
    with pytest.raises(MalformedCommand):
        parse_dependency(ast, ["push", "the", "circle"])
    with pytest.raises(MalformedCommand):
        parse_constituency(ast, ["pull", "the", "box"])


def test_push_the_box_dependency_mask():
    mask = command_mask("push the box")
    rows = [set(np.flatnonzero(r)) for r in mask.allow]
    assert rows == [{0, 2}, {1, 2}, {0, 1, 2}]


def test_two_token_tree_is_complete():
    tree = DependencyTree(("a", "b"), (ROOT, 0), ("root", "obj"))
    assert mask_from_dependency(tree).allow.all()


def test_push_the_box_constituency_mask():
    mask = command_mask("push the box", "constituency")
    # push's parent VP spans everything, so every pair involving push is allowed
    assert mask.allow.all()


def test_flat_constituent_gives_full_mask():
    tree = ConstituencyTree(("a", "b", "c"), Constituent("VP", [0, 1, 2]))
    assert mask_from_constituency(tree).allow.all()


def test_constituency_mask_rule_on_adverb():
    mask = command_mask("push the box while spinning", "constituency").allow
    # the NP leaves do not reach the ADVP leaves: neither parent contains the other
    assert not mask[1, 3] and not mask[2, 4]
    assert mask[3, 4] and mask[0, 4]


def test_serialisation():
    tree = parse_dependency(tokens="push the box")
    data = json.loads(tree.to_json())
    assert data["heads"] == [-1, 2, 0]
    assert data["labels"] == ["root", "det", "obj"]
    assert json.loads(mask_from_dependency(tree).to_json()) == [[1, 0, 1], [0, 1, 1], [1, 1, 1]]


def test_invalid_trees_detected():
    with pytest.raises(ValueError):
        DependencyTree(("a", "b"), (ROOT, ROOT), ("root", "root")).validate()
    with pytest.raises(ValueError):
        DependencyTree(("a", "b", "c"), (ROOT, 2, 1), ("root", "x", "x")).validate()


commands = st.builds(sample_command, st.integers(0, 2**32 - 1), st.integers(0, 2))


@settings(max_examples=300, deadline=None)
@given(commands)
def test_dependency_mask_invariants(ast):
    tree = parse_dependency(ast)
    tree.validate()
    assert sum(h == ROOT for h in tree.heads) == 1
    allow = mask_from_dependency(tree).allow
    n = tree.n
    assert np.array_equal(allow, allow.T)
    assert allow.diagonal().all()
    assert allow.sum() - n == 2 * (n - 1)
    assert (allow.sum(axis=1) >= 2).all()


@settings(max_examples=200, deadline=None)
@given(commands)
def test_constituency_invariants(ast):
    tree = parse_constituency(ast)
    assert [tree.tokens[i] for i in tree.root.leaves()] == render(ast)
    assert all(node.children for node in tree.root.nodes())
    allow = mask_from_constituency(tree).allow
    assert allow.diagonal().all() and np.array_equal(allow, allow.T)


@settings(max_examples=100, deadline=None)
@given(commands)
def test_parsing_is_deterministic(ast):
    a, b = parse_dependency(ast), parse_dependency(parse_ast(render(ast)))
    assert a == b
    assert np.array_equal(mask_from_dependency(a).allow, mask_from_dependency(b).allow)
