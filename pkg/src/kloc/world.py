"""Synthetic fact worlds, their two template families, and a word tokenizer.

Entity-family templates end with the subject, right before the answer slot;
relation-family templates end with the relation phrase. Which span sits next to the answer is the only thing that
separates the two perspectives.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PERSPECTIVES = ("entity", "relation")
PAD, UNK = "<pad>", "<unk>"

# {R} is the relation phrase, {S} the subject. Relation span = every token on
# the relation side of the subject.
ENTITY_FRAMES = (
    "the {R} of {S}",
    "who is the {R} of {S}",
    "name the {R} for {S}",
    "tell me the {R} of {S}",
)
RELATION_FRAMES = (
    "{S} 's {R} is",
    "for {S} , the {R} is",
    "{S} has as {R}",
    "as for {S} , their {R} is",
)

RELATION_PHRASES = (
    "home town", "best friend", "head coach", "twin sister", "chief rival",
    "main sponsor", "first mentor", "current employer", "birth city", "parent company",
    "music teacher", "business partner", "favorite author", "old landlord", "war ally",
    "trade partner",
)

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


class WorldError(ValueError):
    pass


class TemplateError(KeyError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Relation:
    id: str
    phrase: str
    templates_entity: tuple[str, ...]
    templates_relation: tuple[str, ...]

    def templates(self, perspective: str) -> tuple[str, ...]:
        if perspective == "entity":
            return self.templates_entity
        if perspective == "relation":
            return self.templates_relation
        raise TemplateError(f"unknown perspective {perspective!r}")


@dataclass(frozen=True)
class Fact:
    id: int
    subject: int
    relation: int
    object: int


@dataclass
class World:
    seed: int
    entities: list[str]
    relations: list[Relation]
    facts: list[Fact]
    pools: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for f in self.facts:
            key = (f.subject, f.relation)
            if key in seen:
                raise WorldError(f"functionality violated for (s, r) = {key}")
            seen.add(key)
            if not (0 <= f.subject < len(self.entities) and 0 <= f.object < len(self.entities)):
                raise WorldError(f"fact {f.id} references an unknown entity")
            if not 0 <= f.relation < len(self.relations):
                raise WorldError(f"fact {f.id} references an unknown relation")
        if not self.pools:
            for f in self.facts:
                self.pools.setdefault(f.relation, [])
                if f.object not in self.pools[f.relation]:
                    self.pools[f.relation].append(f.object)

    def lookup(self, subject: int, relation: int) -> Fact | None:
        for f in self.facts:
            if f.subject == subject and f.relation == relation:
                return f
        return None

    def words(self) -> list[str]:
        vocab = set(self.entities)
        for rel in self.relations:
            for t in rel.templates_entity + rel.templates_relation:
                vocab.update(w for w in t.split() if w != "{S}")
        return sorted(vocab)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "entities": list(self.entities),
            "relations": [
                {
                    "id": r.id,
                    "phrase": r.phrase,
                    "templates_entity": list(r.templates_entity),
                    "templates_relation": list(r.templates_relation),
                }
                for r in self.relations
            ],
            "facts": [[f.subject, f.relation, f.object] for f in self.facts],
            "pools": {str(k): v for k, v in sorted(self.pools.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        relations = [
            Relation(r["id"], r.get("phrase", ""), tuple(r["templates_entity"]), tuple(r["templates_relation"]))
            for r in d["relations"]
        ]
        facts = [Fact(i, s, r, o) for i, (s, r, o) in enumerate(d["facts"])]
        pools = {int(k): list(v) for k, v in d.get("pools", {}).items()}
        return cls(d["seed"], list(d["entities"]), relations, facts, pools)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _entity_names(rng: np.random.Generator, n: int, reserved: set[str]) -> list[str]:
    names: list[str] = []
    taken = set(reserved)
    while len(names) < n:
        syllables = rng.integers(2, 4)
        name = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        if name in taken:
            continue
        taken.add(name)
        names.append(name)
    return names


def _relation_phrases(n: int) -> list[str]:
    phrases = list(RELATION_PHRASES[:n])
    letters = string.ascii_lowercase
    i = 0
    while len(phrases) < n:
        phrases.append(f"rel{letters[i // 26 % 26]}{letters[i % 26]} link")
        i += 1
    return phrases


def generate_world(seed: int, n_entities: int = 50, n_relations: int = 10, n_facts: int = 300,
                   pool_size: int = 6) -> World:
    """Sample a functional fact set. Deterministic in ``seed``."""
    if min(n_entities, n_relations, n_facts) < 1:
        raise WorldError("counts must be positive")
    if n_facts > n_entities * n_relations:
        raise WorldError(f"{n_facts} facts cannot fit in {n_entities} x {n_relations} (s, r) keys")
    if pool_size < 3 or pool_size > n_entities - 1:
        raise WorldError(f"object pool size {pool_size} must be in [3, n_entities - 1]")
    rng = np.random.default_rng(seed)
    phrases = _relation_phrases(n_relations)
    reserved = {w for f in ENTITY_FRAMES + RELATION_FRAMES for w in f.split()}
    reserved |= {w for p in phrases for w in p.split()}
    entities = _entity_names(rng, n_entities, reserved)
    relations = [
        Relation(
            id=f"R{j}",
            phrase=p,
            templates_entity=tuple(f.replace("{R}", p) for f in ENTITY_FRAMES),
            templates_relation=tuple(f.replace("{R}", p) for f in RELATION_FRAMES),
        )
        for j, p in enumerate(phrases)
    ]
    pools = {j: sorted(rng.choice(n_entities, size=pool_size, replace=False).tolist())
             for j in range(n_relations)}

    keys = rng.choice(n_entities * n_relations, size=n_facts, replace=False)
    by_rel: dict[int, list[int]] = {}
    for key in sorted(keys.tolist()):
        s, r = divmod(key, n_relations)
        by_rel.setdefault(r, []).append(s)

    triples: list[tuple[int, int, int]] = []
    for r in range(n_relations):
        subjects = by_rel.get(r, [])
        pool = list(pools[r])
        rng.shuffle(pool)
        for i, s in enumerate(rng.permutation(subjects).tolist()):
            # round-robin keeps every object well under half of the relation's facts
            for k in range(len(pool)):
                o = pool[(i + k) % len(pool)]
                if o != s:
                    break
            triples.append((s, r, o))
    triples.sort()
    facts = [Fact(i, s, r, o) for i, (s, r, o) in enumerate(triples)]
    return World(seed, entities, relations, facts, pools)


class Tokenizer:
    """One token per whitespace-separated word."""

    def __init__(self, words: Iterable[str]):
        self.itos = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def for_world(cls, world: World) -> "Tokenizer":
        return cls(world.words())

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(w, unk) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def content_ids(self) -> list[int]:
        return list(range(2, len(self.itos)))


@dataclass(frozen=True)
class PromptInstance:
    tokens: tuple[int, ...]
    subject_span: tuple[int, int]
    relation_span: tuple[int, int]
    answer: int
    perspective: str
    template_id: int
    fact_id: int

    def __len__(self) -> int:
        return len(self.tokens)

    def span(self, which: str) -> tuple[int, int]:
        if which in ("entity", "subject"):
            return self.subject_span
        if which == "relation":
            return self.relation_span
        if which == "all":
            return (0, len(self.tokens))
        raise ValueError(f"unknown span selector {which!r}")

    def with_answer(self, answer: int) -> "PromptInstance":
        return PromptInstance(self.tokens, self.subject_span, self.relation_span, answer,
                              self.perspective, self.template_id, self.fact_id)


def verbalize(world: World, tokenizer: Tokenizer, fact: Fact, perspective: str, template_id: int) -> PromptInstance:
    templates = world.relations[fact.relation].templates(perspective)
    if not 0 <= template_id < len(templates):
        raise TemplateError(f"relation {fact.relation} has no {perspective} template {template_id}")
    words = templates[template_id].split()
    s_at = words.index("{S}")
    subject_words = world.entities[fact.subject].split()
    words = words[:s_at] + subject_words + words[s_at + 1:]
    s_span = (s_at, s_at + len(subject_words))
    if perspective == "entity":
        r_span = (0, s_span[0])
    else:
        r_span = (s_span[1], len(words))
    tokens = tuple(tokenizer.encode(" ".join(words)))
    answer = tokenizer.encode(world.entities[fact.object])
    if len(answer) != 1:
        raise TemplateError("answers must be single tokens")
    return PromptInstance(tokens, s_span, r_span, answer[0], perspective, template_id, fact.id)


@dataclass(frozen=True)
class ProbeSplit:
    train: tuple[int, ...]
    held_out: tuple[int, ...]


def split_probe_sets(world: World, held_out_per_family: int = 1) -> dict[tuple[int, str], ProbeSplit]:
    """Hold out template ids per (relation, perspective).

    The held-out frame rotates with the relation index so every frame is still
    seen in training for most relations.
    """
    out = {}
    for j, rel in enumerate(world.relations):
        for p in PERSPECTIVES:
            n = len(rel.templates(p))
            if n < 3:
                raise SplitError(f"relation {rel.id} has only {n} {p} templates; need 3")
            k = max(1, min(held_out_per_family, n - 2))
            held = tuple(sorted((j + i) % n for i in range(k)))
            train = tuple(t for t in range(n) if t not in held)
            out[(j, p)] = ProbeSplit(train, held)
    return out


def prompts_for(world: World, tokenizer: Tokenizer, split: dict[tuple[int, str], ProbeSplit],
                perspective: str, which: str = "train", facts: Sequence[Fact] | None = None) -> list[PromptInstance]:
    facts = world.facts if facts is None else facts
    out = []
    for f in facts:
        s = split[(f.relation, perspective)]
        for t in (s.train if which == "train" else s.held_out):
            out.append(verbalize(world, tokenizer, f, perspective, t))
    return out
