import json

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from syngrid.dataset import (
    SPLITS,
    Episode,
    apply_split,
    generate_corpus,
    generate_pool,
    get_split,
    read_jsonl,
    write_jsonl,
)
from syngrid.errors import EmptySplit
from syngrid.oracle import oracle, replay_reaches, resolve
from syngrid.parsing import mask_from_dependency, parse_dependency


def test_generation_is_byte_identical(tmp_path):
    a = generate_corpus(3, 40, 5, 2)
    b = generate_corpus(3, 40, 5, 2)
    write_jsonl(tmp_path / "a.jsonl", a.train + a.tests["c1"])
    write_jsonl(tmp_path / "b.jsonl", b.train + b.tests["c1"])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_different_seeds_differ():
    assert generate_corpus(1, 10, 1).train != generate_corpus(2, 10, 1).train


def test_shards_concatenate_to_the_full_pool():
    full = generate_pool(5, 0, 0, 12, 2)
    shards = generate_pool(5, 0, 0, 5, 2) + generate_pool(5, 0, 5, 12, 2)
    assert full == shards


def test_episodes_are_consistent(small_corpus):
    episodes = small_corpus.train + [ep for eps in small_corpus.tests.values() for ep in eps]
    for ep in episodes:
        ref = resolve(ep.world, ep.ast)
        assert tuple(oracle(ep.world, ep.ast)) == ep.actions
        assert replay_reaches(ep.world, list(ep.actions), ref)
        tree = parse_dependency(ep.ast, list(ep.tokens))
        assert np.array_equal(mask_from_dependency(tree).allow, ep.mask.allow)
        assert 3 <= len(ep.world.objects) <= 8 + 2
        assert len(ep.actions) > 0


def test_jsonl_round_trip(tmp_path, small_corpus):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, small_corpus.train[:10], include_mask=True)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"world", "command", "dep_heads", "mask", "actions", "split"}
    assert read_jsonl(path) == small_corpus.train[:10]
    write_jsonl(path, small_corpus.train[:3])
    assert "mask" not in json.loads(path.read_text().splitlines()[0])


def test_tampered_record_is_rejected(small_corpus):
    rec = small_corpus.train[0].to_record()
    rec["actions"] = rec["actions"] + ["walk"]
    with pytest.raises(ValueError):
        Episode.from_record(rec)


@pytest.mark.parametrize("key", ["a1", "b2", "c1"])
def test_compositional_splits_are_sound(key, small_corpus):
    spec = get_split(key)
    train, test = apply_split(small_corpus, spec)
    assert not any(spec.held_out(ep.ast) for ep in train)
    assert all(spec.held_out(ep.ast) for ep in test)
    # string-level predicate agrees with the AST-level one
    for ep in train + test + small_corpus.train:
        assert spec.held_out_tokens(ep.tokens) == spec.held_out(ep.ast)


def test_c1_depths(small_corpus):
    train, test = apply_split(small_corpus, "c1")
    assert max(ep.command.count("that") for ep in train) <= 1
    assert all(len(ep.ast.target.relations) <= 1 for ep in train)
    assert all("and" in ep.tokens for ep in test)


def test_a1_yellow_square_only_in_test(small_corpus):
    train, test = apply_split(small_corpus, "a1")
    assert not any("yellow square" in ep.command for ep in train)
    assert all("yellow square" in ep.command for ep in test)


def test_exclusion_keeps_train_size():
    corpus = generate_corpus(4, 30, 3, 2, splits=["c1"], exclude="c1")
    train, _ = apply_split(corpus, "c1")
    assert len(train) == 30


def test_empty_split_raises():
    corpus = generate_corpus(4, 5, 2, 0, splits=["random"])
    with pytest.raises(EmptySplit):
        apply_split(corpus, "c1")


def test_unknown_split():
    with pytest.raises(KeyError):
        get_split("z9")
    assert set(SPLITS) == {"random", "a1", "b2", "c1"}


def test_random_split_matches_template_distribution():
    corpus = generate_corpus(11, 1500, 1500, 2, splits=["random"])
    train, test = apply_split(corpus, "random")

    def cell(ep):
        return (ep.ast.verb, ep.ast.adverb or "-", len(ep.ast.target.relations))

    keys = sorted({cell(ep) for ep in train + test})
    table = np.array([[sum(cell(ep) == k for ep in eps) for k in keys] for eps in (train, test)])
    p = chi2_contingency(table)[1]
    assert p > 0.01, p
