"""Causal tracing: clean, corrupted and restored runs, indirect effects and
their average over a fact set, with optional module severing.

Restored probabilities for a whole prompt are computed in a batched sweep:
each restoration cell resumes from the corrupted run's hidden state just below
the first restored layer, so only the layers that can differ are recomputed.
``restored_run`` does the same thing one cell at a time from the embeddings
and serves as the slow cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as M
from .world import PromptInstance

SPANS = ("subject", "relation", "all")
TRACE_SITES = ("hidden", "mlp_out", "attn_out")
SEVERABLE = {"none": None, "mlp": "mlp_out", "attn": "attn_out"}
BUCKETS = ("first_corrupted", "middle_corrupted", "last_corrupted", "first_subsequent", "further", "last_token")
DEFAULT_WINDOWS = {"hidden": 1, "mlp_out": 5, "attn_out": 5}
SPAN_PERSPECTIVE = {"subject": "entity", "relation": "relation", "all": "all"}


class TraceSpecError(ValueError):
    pass


class RecallGateError(RuntimeError):
    pass


def noise_scale(params: Mapping[str, np.ndarray], factor: float = 3.0) -> float:
    """factor x std of all token-embedding entries."""
    return factor * float(np.std(np.asarray(params["tok_emb"], dtype=np.float64)))


@dataclass(frozen=True)
class NoiseSpec:
    span: str = "relation"
    scale: float | None = None
    samples: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.span not in SPANS:
            raise TraceSpecError(f"unknown corrupt span {self.span!r}")
        if self.samples < 1:
            raise TraceSpecError("need at least one noise sample")
        if self.scale is not None and not self.scale >= 0:
            raise TraceSpecError("noise scale must be non-negative")

    def require_scale(self) -> float:
        if self.scale is None:
            raise TraceSpecError("noise scale not computed for this checkpoint (see noise_scale)")
        return float(self.scale)

    def span_of(self, prompt: PromptInstance) -> tuple[int, int]:
        if self.span == "all":
            return 0, len(prompt)
        return prompt.subject_span if self.span == "subject" else prompt.relation_span

    def draw(self, fact_id: int, n_positions: int, d: int) -> np.ndarray:
        """[samples, n_positions, d] noise, deterministic in (seed, fact id)."""
        rng = np.random.default_rng([self.seed, fact_id])
        return (rng.standard_normal((self.samples, n_positions, d)) * self.require_scale()).astype(M.DTYPE)


@dataclass(frozen=True)
class TraceSpec:
    noise: NoiseSpec
    site: str = "hidden"
    window: int | None = None
    sever: str = "none"

    def __post_init__(self):
        if self.site not in TRACE_SITES:
            raise TraceSpecError(f"unknown restore site {self.site!r}")
        if self.window is None:
            object.__setattr__(self, "window", DEFAULT_WINDOWS[self.site])
        if self.window < 1 or self.window % 2 == 0:
            raise TraceSpecError(f"restore window must be an odd positive count, got {self.window}")
        if self.sever not in SEVERABLE:
            raise TraceSpecError(f"unknown severed module {self.sever!r}")
        if SEVERABLE[self.sever] == self.site:
            raise TraceSpecError("cannot sever the module being restored")

    def check(self, cfg: M.ModelConfig):
        if self.window > cfg.n_layers:
            raise TraceSpecError(f"window {self.window} exceeds {cfg.n_layers} layers")


def site_layers(site: str, n_layers: int) -> range:
    """Layers a site can be restored at; the hidden stream includes h^(0)."""
    return range(0 if site == "hidden" else 1, n_layers + 1)


def window_layers(layer: int, window: int, n_layers: int, lowest: int = 1) -> range:
    half = window // 2
    return range(max(lowest, layer - half), min(n_layers, layer + half) + 1)


def _restores(site: str, layers: range, positions, **kw) -> list[M.Intervention]:
    out = []
    if site == "hidden" and layers.start == 0:
        out.append(M.restore_from("clean", "embedding", [0], positions, **kw))
        layers = range(1, layers.stop)
    if len(layers):
        out.append(M.restore_from("clean", site, layers, positions, **kw))
    return out


def bucket_positions(span: tuple[int, int], length: int) -> dict[str, list[int]]:
    """Map each bucket to its token positions; absent buckets map to [].

    The final position always goes to last_token. A one-token span counts as
    last_corrupted. Positions before the span belong to no bucket.
    """
    s0, s1 = span
    last = length - 1
    corrupted = [i for i in range(s0, s1) if i != last]
    after = [i for i in range(s1, last)]
    out = {b: [] for b in BUCKETS}
    if corrupted:
        out["last_corrupted"] = [corrupted[-1]]
        if len(corrupted) > 1:
            out["first_corrupted"] = [corrupted[0]]
            out["middle_corrupted"] = corrupted[1:-1]
    if after:
        out["first_subsequent"] = [after[0]]
        out["further"] = after[1:]
    out["last_token"] = [last]
    return out


# ---------------------------------------------------------------- runs


@dataclass
class RunTriple:
    p_clean: float
    p_corrupt: float
    restored: np.ndarray  # [T, L], mean over noise samples
    p_corrupt_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        vals = np.concatenate([[self.p_clean, self.p_corrupt], np.ravel(self.restored)])
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError("probabilities must lie in [0, 1]")


def indirect_effect(triple: RunTriple, i: int, l: int) -> float:
    """Restored minus corrupted probability at position i, layer l."""
    if not 0 <= i < triple.restored.shape[0] or not 0 <= l < triple.restored.shape[1] \
            or np.isnan(triple.restored[i, l]):
        raise IndexError(f"no restored probability at ({i}, {l})")
    return float(triple.restored[i, l]) - triple.p_corrupt


def _sample_mean(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Mean that returns the common value exactly when all samples agree."""
    ref = np.take(x, [0], axis=axis)
    return np.squeeze(ref, axis=axis) + (x - ref).mean(axis=axis)


def _last_probs(logits: np.ndarray, answer: int) -> np.ndarray:
    return M.answer_probabilities(logits[:, -1], np.full(logits.shape[0], answer))


def _clean(params, cfg: M.ModelConfig, prompt: PromptInstance) -> tuple[float, M.ActivationTape, int]:
    logits, tape = M.run(params, cfg, np.asarray([prompt.tokens]))
    return float(_last_probs(logits.data, prompt.answer)[0]), tape, int(np.argmax(logits.data[0, -1]))


def clean_run(params, cfg: M.ModelConfig, prompt: PromptInstance) -> tuple[float, M.ActivationTape]:
    p, tape, _ = _clean(params, cfg, prompt)
    return p, tape


def corrupted_run(params, cfg: M.ModelConfig, prompt: PromptInstance, noise: NoiseSpec
                  ) -> tuple[float, M.ActivationTape, np.ndarray]:
    """Returns (mean P*, tape with one row per sample, per-sample P*)."""
    s0, s1 = noise.span_of(prompt)
    if s1 <= s0:
        raise TraceSpecError("corrupt span is empty")
    eps = noise.draw(prompt.fact_id, s1 - s0, cfg.d_model)
    toks = np.tile(np.asarray(prompt.tokens), (noise.samples, 1))
    logits, tape = M.run(params, cfg, toks, [M.add_noise(range(s0, s1), eps)])
    probs = _last_probs(logits.data, prompt.answer)
    return float(_sample_mean(probs)), tape, probs


def restored_run(params, cfg: M.ModelConfig, prompt: PromptInstance, noise: NoiseSpec, site: str,
                 position: int | Sequence[int], layer: int, window: int = 1, sever: str = "none",
                 clean: M.ActivationTape | None = None, corrupted: M.ActivationTape | None = None) -> float:
    """P*,clean[y] for one restoration, run from the embeddings with fresh noise
    (the same draws as ``corrupted_run``), averaged over samples."""
    spec = TraceSpec(noise, site, window, sever)
    spec.check(cfg)
    if layer not in site_layers(site, cfg.n_layers):
        raise TraceSpecError(f"layer {layer} is not restorable at site {site}")
    positions = [position] if isinstance(position, (int, np.integer)) else list(position)
    if clean is None:
        clean = clean_run(params, cfg, prompt)[1]
    s0, s1 = noise.span_of(prompt)
    eps = noise.draw(prompt.fact_id, s1 - s0, cfg.d_model)
    refs = {"clean": clean}
    layers = window_layers(layer, window, cfg.n_layers, site_layers(site, cfg.n_layers).start)
    ivs = [M.add_noise(range(s0, s1), eps)] + _restores(site, layers, positions)
    if SEVERABLE[sever]:
        if corrupted is None:
            corrupted = corrupted_run(params, cfg, prompt, noise)[1]
        refs["corrupt"] = corrupted
        ivs.append(M.freeze_to("corrupt", SEVERABLE[sever], range(1, cfg.n_layers + 1), positions,
                               source_rows=range(noise.samples)))
    toks = np.tile(np.asarray(prompt.tokens), (noise.samples, 1))
    logits, _ = M.run(params, cfg, toks, ivs, refs)
    return float(_sample_mean(_last_probs(logits.data, prompt.answer)))


def restoration_sweep(params, cfg: M.ModelConfig, prompt: PromptInstance, spec: TraceSpec,
                      clean: tuple[float, M.ActivationTape] | None = None,
                      corrupted: tuple[float, M.ActivationTape, np.ndarray] | None = None) -> RunTriple:
    """All (position, layer) restorations for one prompt.

    ``restored`` has shape [T, L+1]; column l holds layer l, and columns a site
    cannot be restored at (layer 0 for module sites) are NaN.
    """
    spec.check(cfg)
    p_clean, clean_tape = clean if clean is not None else clean_run(params, cfg, prompt)
    p_star, corr_tape, samples = corrupted if corrupted is not None else corrupted_run(params, cfg, prompt, spec.noise)
    S, L, Tn = spec.noise.samples, cfg.n_layers, len(prompt)
    refs = {"clean": clean_tape, "corrupt": corr_tape}
    frozen = SEVERABLE[spec.sever]
    restored = np.full((Tn, L + 1), np.nan)
    layer_range = site_layers(spec.site, L)
    by_start: dict[int, list[tuple[int, range]]] = {}
    for l in layer_range:
        layers = window_layers(l, spec.window, L, layer_range.start)
        by_start.setdefault(layers.start, []).append((l, layers))
    for lo, group in sorted(by_start.items()):
        cells = [(i, l, layers) for i in range(Tn) for l, layers in group]
        # resume just below the first restored layer; h^(0) restores patch the start state
        begin = max(lo - 1, 0)
        start_h = np.tile(corr_tape.layer_value("hidden", begin), (len(cells), 1, 1))
        ivs = []
        for c, (i, l, layers) in enumerate(cells):
            rows = range(c * S, (c + 1) * S)
            if lo == 0:
                start_h[c * S:(c + 1) * S, i] = clean_tape.layer_value("hidden", 0)[0, i]
                layers = range(1, layers.stop)
            if len(layers):
                ivs.append(M.restore_from("clean", spec.site, layers, [i], rows=rows))
            if frozen:
                # layers below lo already carry corrupted values
                ivs.append(M.freeze_to("corrupt", frozen, range(max(lo, 1), L + 1), [i], rows=rows,
                                       source_rows=range(S)))
        toks = np.tile(np.asarray(prompt.tokens), (len(cells) * S, 1))
        logits, _ = M.run(params, cfg, toks, ivs, refs, start=(begin, start_h))
        probs = _sample_mean(_last_probs(logits.data, prompt.answer).reshape(len(cells), S), axis=1)
        for (i, l, _), p in zip(cells, probs):
            restored[i, l] = p
    return RunTriple(p_clean, p_star, restored, samples)


# ---------------------------------------------------------------- aggregation


@dataclass
class FactTrace:
    fact_id: int
    template_id: int
    perspective: str
    p_clean: float
    p_corrupt: float
    ie: np.ndarray  # [T, L+1]
    buckets: dict[str, list[int]]

    def bucket_ie(self) -> np.ndarray:
        """[n_buckets, L+1]; NaN rows for absent buckets."""
        out = np.full((len(BUCKETS), self.ie.shape[1]), np.nan)
        for b, name in enumerate(BUCKETS):
            pos = self.buckets[name]
            if pos:
                out[b] = self.ie[pos].mean(axis=0)
        return out


@dataclass
class TraceGrid:
    """AIE per site as [n_buckets, L+1] arrays indexed by layer.

    NaN marks cells that do not exist: buckets no fact has, and layer 0 for
    the module sites.
    """

    aie: dict[str, np.ndarray]
    counts: dict[str, np.ndarray]
    fact_count: int
    perspective: str
    metadata: dict = field(default_factory=dict)
    facts: dict[str, list[FactTrace]] = field(default_factory=dict)

    def __post_init__(self):
        if self.fact_count <= 0:
            raise ValueError("a trace grid needs at least one fact")

    @property
    def sites(self) -> list[str]:
        return [s for s in TRACE_SITES if s in self.aie]

    def value(self, site: str, bucket: str, layer: int) -> float | None:
        v = self.aie[site][BUCKETS.index(bucket), layer]
        return None if np.isnan(v) else float(v)

    def to_dict(self) -> dict:
        nested = {site: {b: [None if np.isnan(v) else float(v) for v in self.aie[site][k]]
                         for k, b in enumerate(BUCKETS)} for site in self.sites}
        return {"aie": nested, "perspective": self.perspective, "fact_count": self.fact_count,
                "metadata": dict(self.metadata)}

    def rows(self) -> Iterable[dict]:
        """Per-fact rows for trace.csv (requires retained facts)."""
        for site in self.sites:
            for ft in sorted(self.facts.get(site, []), key=lambda f: (f.fact_id, f.template_id)):
                bie = ft.bucket_ie()
                for k, b in enumerate(BUCKETS):
                    if not ft.buckets[b]:
                        continue
                    for l in range(bie.shape[1]):
                        if np.isnan(bie[k, l]):
                            continue
                        yield {"fact_id": ft.fact_id, "perspective": ft.perspective, "site": site, "bucket": b,
                               "layer": l, "ie": float(bie[k, l]), "p_clean": ft.p_clean,
                               "p_corrupt": ft.p_corrupt}

    @staticmethod
    def merge(grids: Sequence["TraceGrid"]) -> "TraceGrid":
        if not grids:
            raise ValueError("nothing to merge")
        first = grids[0]
        out = TraceGrid({}, {}, first.fact_count, first.perspective, dict(first.metadata), {})
        out.metadata["windows"] = {}
        for g in grids:
            if g.perspective != first.perspective or g.fact_count != first.fact_count:
                raise ValueError("grids come from different fact sets")
            for site in g.sites:
                out.aie[site], out.counts[site] = g.aie[site], g.counts[site]
                out.metadata["windows"][site] = g.metadata.get("window")
                if site in g.facts:
                    out.facts[site] = g.facts[site]
        out.metadata.pop("window", None)
        return out


def aggregate(traces: Sequence[FactTrace], n_layers: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean of per-fact bucket IEs; exact summation keeps it order-invariant."""
    width = n_layers + 1
    stacked = np.stack([t.bucket_ie() for t in traces]) if traces else np.zeros((0, len(BUCKETS), width))
    aie = np.full((len(BUCKETS), width), np.nan)
    counts = np.zeros(len(BUCKETS), dtype=np.int64)
    for b in range(len(BUCKETS)):
        keep = ~np.all(np.isnan(stacked[:, b]), axis=1)
        counts[b] = int(keep.sum())
        if counts[b]:
            for l in range(width):
                aie[b, l] = math.fsum(stacked[keep, b, l]) / counts[b]
    return aie, counts


def trace_fact_set(params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], spec: TraceSpec,
                   keep_facts: bool = False, require_recall: bool = True) -> TraceGrid:
    """AIE grid for one restore site over ``prompts``.

    With ``require_recall`` every prompt must be answered correctly by the
    clean model (top-1), otherwise RecallGateError is raised.
    """
    if not prompts:
        raise ValueError("empty fact set")
    spec.check(cfg)
    spec.noise.require_scale()
    traces = []
    for prompt in prompts:
        p_clean, tape, top = _clean(params, cfg, prompt)
        if require_recall and top != prompt.answer:
            raise RecallGateError(f"fact {prompt.fact_id} is not recalled by the clean model")
        triple = restoration_sweep(params, cfg, prompt, spec, clean=(p_clean, tape))
        traces.append(FactTrace(prompt.fact_id, prompt.template_id, SPAN_PERSPECTIVE[spec.noise.span],
                                triple.p_clean, triple.p_corrupt, triple.restored - triple.p_corrupt,
                                bucket_positions(spec.noise.span_of(prompt), len(prompt))))
    aie, counts = aggregate(traces, cfg.n_layers)
    meta = {"noise_scale": spec.noise.scale, "samples": spec.noise.samples, "seed": spec.noise.seed,
            "span": spec.noise.span, "window": spec.window, "sever": spec.sever,
            "mean_p_clean": float(np.mean([t.p_clean for t in traces])),
            "mean_p_corrupt": float(np.mean([t.p_corrupt for t in traces]))}
    return TraceGrid({spec.site: aie}, {spec.site: counts}, len(traces), SPAN_PERSPECTIVE[spec.noise.span],
                     meta, {spec.site: traces} if keep_facts else {})


def severed_trace(params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], spec: TraceSpec,
                  keep_facts: bool = False, require_recall: bool = True) -> TraceGrid:
    """trace_fact_set with the TraceSpec's sever module frozen to corrupted values at the
    restored position across all layers."""
    return trace_fact_set(params, cfg, prompts, spec, keep_facts, require_recall)
