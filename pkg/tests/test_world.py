import itertools
from collections import Counter

import pytest

from kloc import world as W
from kloc.world import Fact, Tokenizer, World


@pytest.fixture(scope="module")
def default_world():
    return W.generate_world(0, 50, 10, 300)


@pytest.fixture(scope="module")
def tok(default_world):
    return Tokenizer.for_world(default_world)


def test_generation_is_deterministic():
    a, b = W.generate_world(7, 20, 5, 60), W.generate_world(7, 20, 5, 60)
    assert a.to_dict() == b.to_dict()
    assert W.generate_world(8, 20, 5, 60).to_dict() != a.to_dict()


def test_default_world_has_300_distinct_keys(default_world):
    keys = {(f.subject, f.relation) for f in default_world.facts}
    assert len(default_world.facts) == 300
    assert len(keys) == 300


def test_pigeonhole_error():
    with pytest.raises(W.WorldError):
        W.generate_world(0, 5, 2, 11)


def test_objects_are_spread_within_each_relation(default_world):
    by_rel = {}
    for f in default_world.facts:
        by_rel.setdefault(f.relation, []).append(f.object)
    for objs in by_rel.values():
        assert max(Counter(objs).values()) <= 0.5 * len(objs)


def test_objects_come_from_relation_pool(default_world):
    for f in default_world.facts:
        assert f.object in default_world.pools[f.relation]
        assert f.object != f.subject


def test_functionality_enforced():
    rel = W.Relation("R0", "x", ("a {S} b", "c {S}", "d {S}"), ("{S} e", "{S} f", "{S} g"))
    with pytest.raises(W.WorldError):
        World(0, ["p", "q", "r"], [rel], [Fact(0, 0, 0, 1), Fact(1, 0, 0, 2)])


def test_templates_pairwise_distinct(default_world):
    for rel in default_world.relations:
        ts = rel.templates_entity + rel.templates_relation
        assert len(set(ts)) == len(ts)
        assert len(rel.templates_entity) >= 3 and len(rel.templates_relation) >= 3


def test_world_json_roundtrip(tmp_path, default_world):
    path = tmp_path / "world.json"
    default_world.save(path)
    again = World.load(path)
    assert again.to_dict() == default_world.to_dict()
    import json
    raw = json.loads(path.read_text())
    assert set(raw) >= {"seed", "entities", "relations", "facts"}
    assert set(raw["relations"][0]) >= {"id", "templates_entity", "templates_relation"}


def test_tokenizer_roundtrip(default_world, tok):
    for rel in default_world.relations:
        for t in rel.templates_entity:
            text = t.replace("{S}", default_world.entities[0])
            assert tok.decode(tok.encode(text)) == text
    assert tok.itos[:2] == [W.PAD, W.UNK]


def test_relation_perspective_example():
    rel = W.Relation("R0", "capital city", ("the capital city of {S} is", "x {S}", "y {S}"),
                     ("{S} 's capital city is", "{S} has capital city", "z {S} capital city is"))
    world = World(0, ["France", "Paris", "Lyon"], [rel], [Fact(0, 0, 0, 1)])
    tok = Tokenizer.for_world(world)
    p = W.verbalize(world, tok, world.facts[0], "relation", 0)
    assert tok.decode(p.tokens) == "France 's capital city is"
    assert tok.decode(p.tokens[slice(*p.relation_span)]) == "'s capital city is"
    assert tok.decode(p.tokens[slice(*p.subject_span)]) == "France"
    assert tok.itos[p.answer] == "Paris"
    q = W.verbalize(world, tok, world.facts[0], "relation", 1)
    assert q.answer == p.answer and q.tokens != p.tokens


def test_unknown_template(default_world, tok):
    with pytest.raises(W.TemplateError):
        W.verbalize(default_world, tok, default_world.facts[0], "entity", 99)


def test_span_invariants_over_full_product(default_world, tok):
    for f, persp in itertools.product(default_world.facts, W.PERSPECTIVES):
        for t in range(len(default_world.relations[f.relation].templates(persp))):
            p = W.verbalize(default_world, tok, f, persp, t)
            (s0, s1), (r0, r1) = p.subject_span, p.relation_span
            assert 0 <= s0 < s1 <= len(p) and 0 <= r0 < r1 <= len(p)
            assert s1 <= r0 or r1 <= s0
            assert tok.decode(p.tokens[s0:s1]) == default_world.entities[f.subject]
            if persp == "relation":
                assert r1 == len(p)  # relation phrase closes the prompt
            else:
                assert s1 == len(p)  # subject closes the prompt
            assert p.answer == tok.stoi[default_world.entities[f.object]]


def test_split_minimal():
    rel = W.Relation("R0", "x", ("a {S}", "b {S}", "c {S}"), ("{S} a", "{S} b", "{S} c"))
    world = World(0, ["p", "q"], [rel], [Fact(0, 0, 0, 1)])
    split = W.split_probe_sets(world)
    for p in W.PERSPECTIVES:
        assert len(split[(0, p)].train) == 2 and len(split[(0, p)].held_out) == 1


def test_split_too_few_templates():
    rel = W.Relation("R0", "x", ("a {S}", "b {S}"), ("{S} a", "{S} b", "{S} c"))
    with pytest.raises(W.SplitError):
        W.split_probe_sets(World(0, ["p", "q"], [rel], [Fact(0, 0, 0, 1)]))


def test_split_disjoint(default_world):
    for key, s in W.split_probe_sets(default_world).items():
        assert s.held_out and not set(s.train) & set(s.held_out)


def test_held_out_coverage(default_world, tok):
    split = W.split_probe_sets(default_world)
    for persp in W.PERSPECTIVES:
        prompts = W.prompts_for(default_world, tok, split, persp, "held_out")
        seen = Counter((p.fact_id, p.template_id) for p in prompts)
        assert set(seen.values()) == {1}
        per_fact = Counter(p.fact_id for p in prompts)
        for f in default_world.facts:
            assert per_fact[f.id] == len(split[(f.relation, persp)].held_out)
