"""Edit evaluation: reliability, generality and the cross-perspective table.

Every metric is an argmax indicator averaged over prompts and reported as a
percentage rounded to two decimals. Probes for "entity knowledge" use the
entity template family and probes for "relation knowledge" the relation family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .editing import EditRequest
from .trainer import predictions
from .world import PERSPECTIVES, ProbeSplit, PromptInstance, Tokenizer, World, verbalize


class EvalError(ValueError):
    pass


def _pct(hits: Sequence[float]) -> float:
    return round(100.0 * math.fsum(hits) / len(hits), 2)


@dataclass(frozen=True)
class ProbeSet:
    """The prompt x and its rephrasings N(x) for one fact in one template family."""

    prompt: PromptInstance
    rephrasings: tuple[PromptInstance, ...]

    def __post_init__(self):
        if not self.rephrasings:
            raise EvalError(f"empty rephrase set for fact {self.prompt.fact_id}")
        if any(r.fact_id != self.prompt.fact_id for r in self.rephrasings):
            raise EvalError("rephrasings must reference the probed fact")

    def all_prompts(self) -> list[PromptInstance]:
        return [self.prompt, *self.rephrasings]


@dataclass(frozen=True)
class EvalCase:
    target: int
    probes: Mapping[str, ProbeSet]  # perspective -> probes

    @property
    def fact_id(self) -> int:
        return next(iter(self.probes.values())).prompt.fact_id


@dataclass
class EvalSuite:
    perspective: str
    cases: list[EvalCase]

    def __post_init__(self):
        if self.perspective not in PERSPECTIVES:
            raise EvalError(f"unknown perspective {self.perspective!r}")
        for c in self.cases:
            if any(p.prompt.fact_id != c.fact_id for p in c.probes.values()):
                raise EvalError("probes must reference the edited fact only")

    def __len__(self) -> int:
        return len(self.cases)


def build_suite(world: World, tok: Tokenizer, split: Mapping[tuple[int, str], ProbeSplit],
                requests: Sequence[EditRequest]) -> EvalSuite:
    """Probe sets for each request: the edit prompt itself in its own family and
    the first training template of the other family, with held-out rephrasings."""
    if not requests:
        raise EvalError("empty edit set")
    persp = {r.perspective for r in requests}
    if len(persp) != 1:
        raise EvalError(f"edit set mixes perspectives {sorted(persp)}")
    own = persp.pop()
    cases = []
    for r in requests:
        fact = world.facts[r.fact_id]
        probes = {}
        for name in PERSPECTIVES:
            s = split[(fact.relation, name)]
            x = r.prompt if name == own else verbalize(world, tok, fact, name, s.train[0])
            probes[name] = ProbeSet(x, tuple(verbalize(world, tok, fact, name, t) for t in s.held_out))
        cases.append(EvalCase(r.target, probes))
    return EvalSuite(own, cases)


def reliability(params, cfg: M.ModelConfig, pairs: Sequence[tuple[PromptInstance, int]], pad_id: int = 0) -> float:
    """Percentage of prompts whose top-1 prediction is the paired target."""
    if not pairs:
        raise EvalError("empty edit set")
    preds = predictions(params, cfg, [p for p, _ in pairs], pad_id)
    return _pct([float(y == t) for y, (_, t) in zip(preds, pairs)])


def generality(params, cfg: M.ModelConfig, groups: Sequence[tuple[PromptInstance, Sequence[PromptInstance], int]],
               pad_id: int = 0, chained: bool = False) -> float:
    """Percentage over all (pair, rephrasing) of top-1 == target.

    With ``chained`` a rephrasing only counts when the original prompt is also
    answered with the target.
    """
    if not groups:
        raise EvalError("empty edit set")
    hits = []
    for x, rephr, target in groups:
        if not rephr:
            raise EvalError(f"empty rephrase set for fact {x.fact_id}")
        preds = predictions(params, cfg, [x, *rephr], pad_id)
        ok = preds[1:] == target
        if chained:
            ok &= preds[0] == target
        hits.extend(ok.astype(float))
    return _pct(hits)


@dataclass
class MetricsReport:
    edit_perspective: str
    post: dict[str, dict[str, float]]
    pre: dict[str, dict[str, float]]
    outcomes: list[dict] = field(default_factory=list)
    hashes: dict[str, str] = field(default_factory=dict)
    chained: bool = False

    def cell(self, probe: str, metric: str, when: str = "post") -> float:
        return getattr(self, when)[probe][metric]

    def to_dict(self) -> dict:
        return {
            "edit_perspective": self.edit_perspective,
            "n_edits": len(self.outcomes),
            "generality_chained": self.chained,
            "post": self.post,
            "pre": self.pre,
            "hashes": self.hashes,
            "outcomes": self.outcomes,
        }


def _case_hits(preds: np.ndarray, n_rephr: int, target: int, chained: bool) -> tuple[float, list[float]]:
    rel = float(preds[0] == target)
    gen = [float(y == target and (rel or not chained)) for y in preds[1:1 + n_rephr]]
    return rel, gen


def cross_perspective_report(base, edited, cfg: M.ModelConfig, suite: EvalSuite, pad_id: int = 0,
                             chained: bool = False, hashes: Mapping[str, str] | None = None) -> MetricsReport:
    """Fill the 2x2 (probe family x metric) table after and before editing.

    ``edited`` is either one parameter set holding all edits, or a sequence of
    parameter sets aligned with ``suite.cases`` (one single edit each). Cases
    whose edit failed to produce parameters may be passed as ``None``; they are
    scored with the base parameters, which counts the edit as not landed.
    """
    if not suite.cases:
        raise EvalError("empty edit set")
    per_case = list(edited) if isinstance(edited, (list, tuple)) else [edited] * len(suite.cases)
    if len(per_case) != len(suite.cases):
        raise EvalError("edited parameter list does not match the suite")
    tallies = {w: {p: {"reliability": [], "generality": []} for p in PERSPECTIVES} for w in ("pre", "post")}
    outcomes = []
    base_preds = _batch_predict(base, cfg, suite.cases, pad_id)
    for case, theta, pre_preds in zip(suite.cases, per_case, base_preds):
        post_preds = _batch_predict(theta if theta is not None else base, cfg, [case], pad_id)[0]
        row = {"fact_id": case.fact_id, "target": int(case.target), "edited": theta is not None}
        for when, preds in (("pre", pre_preds), ("post", post_preds)):
            for name in PERSPECTIVES:
                probe = case.probes[name]
                rel, gen = _case_hits(preds[name], len(probe.rephrasings), case.target, chained)
                tallies[when][name]["reliability"].append(rel)
                tallies[when][name]["generality"].extend(gen)
                if when == "post":
                    row[name] = {"reliability": bool(rel), "generality": [bool(g) for g in gen],
                                 "top1": [int(y) for y in preds[name]]}
        outcomes.append(row)
    table = {w: {p: {m: _pct(v) for m, v in cells.items()} for p, cells in per.items()} for w, per in tallies.items()}
    return MetricsReport(suite.perspective, table["post"], table["pre"], outcomes, dict(hashes or {}), chained)


def _batch_predict(params, cfg, cases: Sequence[EvalCase], pad_id: int) -> list[dict[str, np.ndarray]]:
    prompts, where = [], []
    for case in cases:
        for name in PERSPECTIVES:
            ps = case.probes[name].all_prompts()
            where.append((len(prompts), len(prompts) + len(ps)))
            prompts.extend(ps)
    preds = predictions(params, cfg, prompts, pad_id)
    out, k = [], 0
    for _ in cases:
        d = {}
        for name in PERSPECTIVES:
            a, b = where[k]
            d[name] = preds[a:b]
            k += 1
        out.append(d)
    return out
