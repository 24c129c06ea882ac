"""Experiment stages and their on-disk artifacts.

Each stage reads the artifacts of the stages before it, checks that they were
produced under the same configuration and have not changed since, and writes
its own artifacts plus a manifest entry. Nothing written here depends on wall
time or on the output directory's location, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import editing as E
from . import metrics as MT
from . import model as M
from . import svg
from . import tracing as TC
from . import trainer as TR
from . import world as W

log = logging.getLogger(__name__)

STAGES = ("gen-world", "train", "trace", "sever-trace", "edit", "eval", "report")
UPSTREAM = {
    "gen-world": (),
    "train": ("gen-world",),
    "trace": ("gen-world", "train"),
    "sever-trace": ("gen-world", "train"),
    "edit": ("gen-world", "train", "trace"),
    "eval": ("gen-world", "train", "edit"),
    "report": ("trace", "sever-trace", "eval"),
}
# corrupted span -> prompt family it is traced on (the span is never adjacent to the answer slot)
TRACE_FAMILY = {"relation": "entity", "subject": "relation"}
SITE_ALIASES = {"hidden": "hidden", "mlp": "mlp_out", "attn": "attn_out"}
RECALL_GATE = 0.9
EDIT_GATE = 90.0


class PipelineError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class WorldParams:
    n_entities: int = 50
    n_relations: int = 10
    n_facts: int = 300
    pool_size: int = 6
    held_out: int = 1


@dataclass
class TraceParams:
    noise_factor: float = 3.0
    samples: int = 5
    n_facts: int = 200
    windows: dict = field(default_factory=dict)  # site -> window, defaults when absent


@dataclass
class EditParams:
    n_edits: int = 50
    layer: int | None = None  # None: argmax of the MLP trace for the edit's perspective
    overrides: dict = field(default_factory=dict)  # extra EditConfig fields


def _build(cls, data: dict | None):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldParams = field(default_factory=WorldParams)
    model: dict = field(default_factory=dict)  # ModelConfig fields except vocab_size
    train: dict = field(default_factory=dict)  # TrainConfig fields except seed
    trace: TraceParams = field(default_factory=TraceParams)
    edit: EditParams = field(default_factory=EditParams)

    def __post_init__(self):
        if "vocab_size" in self.model:
            raise ValueError("vocab_size follows the world's tokenizer and cannot be configured")
        if "seed" in self.train:
            raise ValueError("the training seed follows the global seed")
        # fail early on bad nested values
        M.ModelConfig(**self.model)
        TR.TrainConfig(**self.train)
        E.EditConfig(**self.edit.overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(seed=int(d.get("seed", 0)), world=_build(WorldParams, d.get("world")),
                   model=dict(d.get("model", {})), train=dict(d.get("train", {})),
                   trace=_build(TraceParams, d.get("trace")), edit=_build(EditParams, d.get("edit")))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(_dumps(self.to_dict()).encode()).hexdigest()

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(vocab_size=vocab_size, **self.model)

    def train_config(self) -> TR.TrainConfig:
        return TR.TrainConfig(seed=self.seed, **self.train)

    def edit_config(self, layer: int) -> E.EditConfig:
        return E.EditConfig(**{"seed": self.seed, **self.edit.overrides, "layer": layer})


# ---------------------------------------------------------------- io helpers


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False, default=_plain) + "\n"


def _plain(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _clean_nan(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _clean_nan(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_nan(v) for v in obj]
    return obj


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Lab:
    """Output directory plus configuration; one method per stage."""

    def __init__(self, out: str | Path, config: ExperimentConfig):
        self.out = Path(out)
        self.config = config
        self.config_hash = config.hash()
        self._world = None
        self._model = None

    # -- manifest

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text())

    def _record(self, stage: str, outputs: Sequence[str], gate: dict) -> None:
        man = self.manifest()
        man[stage] = {"config_hash": self.config_hash, "seed": self.config.seed,
                      "outputs": {name: sha256_file(self.out / name) for name in sorted(outputs)},
                      "gate": gate}
        # downstream entries are stale once an upstream stage reruns
        for later in STAGES:
            if stage in UPSTREAM.get(later, ()) and later in man:
                del man[later]
        self.manifest_path.write_text(_dumps(man))

    def require(self, stage: str) -> None:
        for up in UPSTREAM[stage]:
            entry = self.manifest().get(up)
            if entry is None:
                raise PipelineError(f"stage '{stage}' needs the outputs of '{up}'; run '{up}' first")
            if entry["config_hash"] != self.config_hash:
                raise PipelineError(f"outputs of '{up}' were made with a different config; rerun '{up}'")
            for name, digest in entry["outputs"].items():
                path = self.out / name
                if not path.exists():
                    raise PipelineError(f"{name} from stage '{up}' is missing; rerun '{up}'")
                if sha256_file(path) != digest:
                    raise PipelineError(f"{name} changed since stage '{up}' wrote it; rerun '{up}'")

    def meta(self, **extra) -> dict:
        man = self.manifest()
        ckpt = man.get("train", {}).get("outputs", {}).get("model.kloc")
        return {"config_hash": self.config_hash, "seed": self.config.seed, "checkpoint_hash": ckpt, **extra}

    def _write(self, name: str, text: str) -> str:
        (self.out / name).write_text(text)
        return name

    # -- shared loaders

    def world(self):
        if self._world is None:
            raw = json.loads((self.out / "world.json").read_text())
            raw.pop("meta", None)
            world = W.World.from_dict(raw)
            self._world = (world, W.Tokenizer.for_world(world), W.split_probe_sets(world, self.config.world.held_out))
        return self._world

    def model(self):
        if self._model is None:
            self._model = M.load_checkpoint(self.out / "model.kloc")
        return self._model

    def all_prompts(self, which: str = "train") -> list[W.PromptInstance]:
        world, tok, split = self.world()
        return [p for persp in W.PERSPECTIVES for p in W.prompts_for(world, tok, split, persp, which)]

    # ------------------------------------------------------------ stages

    def gen_world(self) -> bool:
        self.out.mkdir(parents=True, exist_ok=True)
        wp = self.config.world
        world = W.generate_world(self.config.seed, wp.n_entities, wp.n_relations, wp.n_facts, wp.pool_size)
        W.split_probe_sets(world, wp.held_out)  # refuse worlds without held-out frames
        self._world = None
        doc = {"meta": self.meta(checkpoint_hash=None), **world.to_dict()}
        self._write("world.json", _dumps(doc))
        self._record("gen-world", ["world.json"], {"passed": True})
        return True

    def train(self) -> bool:
        self.require("train")
        world, tok, split = self.world()
        cfg = self.config.model_config(tok.vocab_size)
        prompts = self.all_prompts()
        params = M.init_params(cfg, self.config.seed)
        params, report = TR.train(params, cfg, prompts, self.config.train_config(), tok.content_ids(), tok.pad_id)
        digest = M.save_checkpoint(self.out / "model.kloc", cfg, params)
        self._model = (cfg, params)
        held = TR.evaluate_recall(params, cfg, self.all_prompts("held_out"), tok.pad_id)
        passed = report.meets(RECALL_GATE)
        doc = {"meta": self.meta(checkpoint_hash=digest), "model": asdict(cfg),
               "train_config": asdict(self.config.train_config()), "recall": report.accuracy,
               "held_out_recall": held.accuracy, "counts": report.counts, "loss_curve": report.loss_curve,
               "gate": {"recall_min": RECALL_GATE, "passed": passed}}
        self._record("train", ["model.kloc"], {"passed": passed})
        # recall_report.json carries the checkpoint hash, so it is recorded after the checkpoint
        self._write("recall_report.json", _dumps(doc))
        man = self.manifest()
        man["train"]["outputs"]["recall_report.json"] = sha256_file(self.out / "recall_report.json")
        self.manifest_path.write_text(_dumps(man))
        return passed

    def trace_prompts(self, span: str) -> list[W.PromptInstance]:
        """Up to n_facts recalled prompts (first training frame) of the span's trace family."""
        world, tok, split = self.world()
        cfg, params = self.model()
        family = TRACE_FAMILY[span]
        cands = [W.verbalize(world, tok, f, family, split[(f.relation, family)].train[0]) for f in world.facts]
        preds = TR.predictions(params, cfg, cands, tok.pad_id)
        kept = [p for p, y in zip(cands, preds) if y == p.answer]
        return kept[:self.config.trace.n_facts]

    def _grids(self, span: str, sites: Iterable[str], sever: str, keep_facts: bool) -> TC.TraceGrid:
        cfg, params = self.model()
        tp = self.config.trace
        noise = TC.NoiseSpec(span, TC.noise_scale(params, tp.noise_factor), tp.samples, self.config.seed)
        prompts = self.trace_prompts(span)
        if not prompts:
            raise PipelineError(f"no recalled facts to trace for the {span} span")
        grids = []
        for site in sites:
            spec = TC.TraceSpec(noise, site, tp.windows.get(site) or default_window(site, cfg.n_layers), sever)
            grids.append(TC.trace_fact_set(params, cfg, prompts, spec, keep_facts=keep_facts))
            log.info("traced %s/%s sever=%s over %d facts", span, site, sever, len(prompts))
        return TC.TraceGrid.merge(grids)

    @staticmethod
    def _spans(perspective: str | None) -> list[str]:
        if perspective is None:
            return ["relation", "subject"]
        return ["relation" if perspective == "relation" else "subject"]

    def _csv(self, rows: Iterable[dict], columns: Sequence[str], meta: dict) -> str:
        buf = io.StringIO()
        for k in sorted(meta):
            buf.write(f"# {k}={meta[k]}\n")
        writer = csv.DictWriter(buf, columns, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def trace(self, perspective: str | None = None, site: str | None = None) -> bool:
        self.require("trace")
        cfg, _ = self.model()
        sites = [SITE_ALIASES[site]] if site else list(TC.TRACE_SITES)
        options = {"perspective": perspective, "site": site}
        conditions, rows, gates, layers = {}, [], {}, {}
        for span in self._spans(perspective):
            grid = self._grids(span, sites, "none", keep_facts=True)
            conditions[span] = grid.to_dict()
            md = grid.metadata
            gates[span] = md["mean_p_corrupt"] < 0.5 * md["mean_p_clean"]
            for r in grid.rows():
                rows.append({"corrupt": span, **r})
            if "mlp_out" in grid.aie:
                layers[TC.SPAN_PERSPECTIVE[span]] = peak_layer(grid.aie["mlp_out"])
        meta = self.meta(options=json.dumps(options, sort_keys=True))
        cols = ["corrupt", "fact_id", "perspective", "site", "bucket", "layer", "ie", "p_clean", "p_corrupt"]
        self._write("trace.csv", self._csv(rows, cols, meta))
        doc = {"meta": self.meta(options=options), "conditions": _clean_nan(conditions), "edit_layer": layers,
               "gate": {"corruption_effective": gates, "passed": all(gates.values())}}
        self._write("aie.json", _dumps(doc))
        self._record("trace", ["trace.csv", "aie.json"], {"passed": all(gates.values())})
        return all(gates.values())

    def sever_trace(self, perspective: str | None = None, sever: str | None = None) -> bool:
        self.require("sever-trace")
        modes = [sever] if sever else list(TC.SEVERABLE)
        options = {"perspective": perspective, "sever": sever}
        conditions, rows = {}, []
        for span in self._spans(perspective):
            conditions[span] = {}
            for mode in modes:
                grid = self._grids(span, ["hidden"], mode, keep_facts=True)
                conditions[span][mode] = grid.to_dict()
                rows.extend({"corrupt": span, "sever": mode, **r} for r in grid.rows())
        cols = ["corrupt", "sever", "fact_id", "perspective", "site", "bucket", "layer", "ie", "p_clean", "p_corrupt"]
        self._write("sever_trace.csv", self._csv(rows, cols, self.meta(options=json.dumps(options, sort_keys=True))))
        self._write("sever_aie.json", _dumps({"meta": self.meta(options=options), "conditions": _clean_nan(conditions)}))
        self._record("sever-trace", ["sever_trace.csv", "sever_aie.json"], {"passed": True})
        return True

    # -- editing

    def edit_layer(self, perspective: str) -> int:
        if self.config.edit.layer is not None:
            return self.config.edit.layer
        layers = json.loads((self.out / "aie.json").read_text())["edit_layer"]
        if perspective not in layers:
            raise PipelineError(f"trace has no MLP grid for the {perspective} perspective; rerun 'trace'")
        return int(layers[perspective])

    def edit_requests(self, perspective: str) -> list[E.EditRequest]:
        """n_edits recalled facts in a seeded order, each retargeted to another object of its pool."""
        world, tok, split = self.world()
        cfg, params = self.model()
        order = np.random.default_rng([self.config.seed, 11]).permutation(len(world.facts))
        cands = [W.verbalize(world, tok, world.facts[i], perspective, split[(world.facts[i].relation, perspective)].train[0])
                 for i in order]
        preds = TR.predictions(params, cfg, cands, tok.pad_id)
        out = []
        for p, y in zip(cands, preds):
            if y != p.answer:
                continue
            out.append(E.EditRequest(p, tok.stoi[world.entities[new_object(world, world.facts[p.fact_id])]]))
            if len(out) == self.config.edit.n_edits:
                break
        return out

    def preserve_prompts(self, perspective: str, fact_id: int, n: int) -> list[W.PromptInstance]:
        world, tok, split = self.world()
        others = [f for f in world.facts if f.id != fact_id]
        pick = np.random.default_rng([self.config.seed, fact_id, 13]).permutation(len(others))[:n]
        return [W.verbalize(world, tok, others[i], perspective, split[(others[i].relation, perspective)].train[0])
                for i in sorted(pick)]

    def edit(self, perspective: str | None = None) -> bool:
        self.require("edit")
        _, tok, _ = self.world()
        cfg, params = self.model()
        persps = [perspective] if perspective else list(W.PERSPECTIVES)
        doc, outputs, landed = {}, [], {}
        for persp in persps:
            layer = self.edit_layer(persp)
            conf = self.config.edit_config(layer)
            mats, entries = [], []
            for req in self.edit_requests(persp):
                pres = self.preserve_prompts(persp, req.fact_id, conf.n_preserve)
                try:
                    edited, trace = E.apply_edit(params, cfg, [req], conf, pres, tok.content_ids(), tok.pad_id)
                except E.OptimizationStall as exc:
                    entries.append({"fact_id": req.fact_id, "perspective": persp, "target": req.target,
                                    "status": "stalled", "error": str(exc)})
                    mats.append(np.full_like(params[M.mlp_proj_name(layer)], np.nan))
                    continue
                entry = dict(trace.entries[0])
                entry.pop("losses", None)
                entries.append({**entry, "status": "ok", "solver": trace.solver})
                mats.append(edited[M.mlp_proj_name(layer)])
            name = f"edits_{persp}.npy"
            with open(self.out / name, "wb") as fh:
                np.save(fh, np.stack(mats).astype(M.DTYPE) if mats else np.zeros((0,) + params[M.mlp_proj_name(layer)].shape, M.DTYPE))
            outputs.append(name)
            hit = [e.get("post_top1") == e["target"] for e in entries]
            landed[persp] = float(np.mean(hit)) if hit else 0.0
            doc[persp] = {"layer": layer, "matrix": M.mlp_proj_name(layer), "edit_config": asdict(conf),
                          "requests": entries}
        passed = all(v * 100 >= EDIT_GATE for v in landed.values())
        self._write("edit_trace.json", _dumps(_clean_nan({"meta": self.meta(options={"perspective": perspective}),
                                                          "perspectives": doc,
                                                          "gate": {"landed": landed, "passed": passed}})))
        self._record("edit", ["edit_trace.json", *outputs], {"passed": passed})
        return passed

    def edited_params(self, perspective: str) -> tuple[list[E.EditRequest], list]:
        world, tok, split = self.world()
        cfg, params = self.model()
        info = json.loads((self.out / "edit_trace.json").read_text())["perspectives"][perspective]
        mats = np.load(self.out / f"edits_{perspective}.npy")
        reqs, thetas = [], []
        for entry, mat in zip(info["requests"], mats):
            f = world.facts[entry["fact_id"]]
            p = W.verbalize(world, tok, f, perspective, split[(f.relation, perspective)].train[0])
            reqs.append(E.EditRequest(p, entry["target"]))
            if entry["status"] != "ok":
                thetas.append(None)
                continue
            theta = dict(params)
            theta[info["matrix"]] = mat
            thetas.append(theta)
        return reqs, thetas

    def eval(self) -> bool:
        self.require("eval")
        world, tok, split = self.world()
        cfg, params = self.model()
        done = json.loads((self.out / "edit_trace.json").read_text())["perspectives"]
        all_prompts = self.all_prompts()
        base_hits = TR.predictions(params, cfg, all_prompts, tok.pad_id) == np.array([p.answer for p in all_prompts])
        fact_of = np.array([p.fact_id for p in all_prompts])
        reports, passed = {}, True
        for persp in W.PERSPECTIVES:
            if persp not in done:
                continue
            reqs, thetas = self.edited_params(persp)
            suite = MT.build_suite(world, tok, split, reqs)
            rep = MT.cross_perspective_report(params, thetas, cfg, suite, tok.pad_id,
                                              hashes={"checkpoint": self.meta()["checkpoint_hash"]})
            drops = []
            for req, theta in zip(reqs, thetas):
                keep = fact_of != req.fact_id
                post = params if theta is None else theta
                hits = TR.predictions(post, cfg, all_prompts, tok.pad_id) == np.array([p.answer for p in all_prompts])
                drops.append(100.0 * (base_hits[keep].mean() - hits[keep].mean()))
            d = rep.to_dict()
            d["preservation_drop"] = {"mean": round(float(np.mean(drops)), 2), "max": round(float(np.max(drops)), 2)}
            reports[persp] = d
            passed &= rep.cell(persp, "reliability") >= EDIT_GATE
        doc = {"meta": self.meta(), "reports": reports,
               "notes": "all four cells are filled for both edit perspectives",
               "gate": {"same_perspective_reliability_min": EDIT_GATE, "passed": bool(passed)}}
        self._write("metrics_report.json", _dumps(doc))
        self._record("eval", ["metrics_report.json"], {"passed": bool(passed)})
        return bool(passed)

    def report(self) -> bool:
        self.require("report")
        aie = json.loads((self.out / "aie.json").read_text())
        sever = json.loads((self.out / "sever_aie.json").read_text())
        metrics = json.loads((self.out / "metrics_report.json").read_text())
        written = []
        for span, grid_doc in aie["conditions"].items():
            grid = grid_from_dict(grid_doc)
            for site in grid.sites:
                name = f"aie_{span}_{site}.svg"
                self._write(name, svg.emit_heatmap_svg(grid, site, f"AIE, {span} corrupted, {site}"))
                written.append(name)
        for span, by_mode in sever["conditions"].items():
            curves = {}
            for mode, grid_doc in by_mode.items():
                grid = grid_from_dict(grid_doc)
                row = grid.aie["hidden"][TC.BUCKETS.index("last_token")]
                curves[f"sever {mode}"] = row[1:].tolist()
            layers = [str(l) for l in range(1, len(row))]
            name = f"sever_{span}.svg"
            self._write(name, svg.bars_svg(curves, layers, f"last-token AIE, {span} corrupted, modules severed"))
            written.append(name)
        summary = {"meta": self.meta(), "figures": written,
                   "edit_layer": aie["edit_layer"],
                   "reliability": {p: r["post"] for p, r in metrics["reports"].items()}}
        self._write("report.json", _dumps(summary))
        self._record("report", ["report.json", *written], {"passed": True})
        return True

    def run(self, stage: str, **options) -> bool:
        fn = {"gen-world": self.gen_world, "train": self.train, "trace": self.trace,
              "sever-trace": self.sever_trace, "edit": self.edit, "eval": self.eval, "report": self.report}[stage]
        return fn(**options)


def default_window(site: str, n_layers: int) -> int:
    """The site's default window, shrunk to the largest odd count that fits the model."""
    w = min(TC.DEFAULT_WINDOWS[site], n_layers)
    return w if w % 2 else w - 1


def peak_layer(grid: np.ndarray) -> int:
    """Layer of the largest finite cell; ties go to the lowest layer."""
    masked = np.where(np.isnan(grid), -np.inf, grid)
    return int(np.unravel_index(np.argmax(masked.T), masked.T.shape)[0])


def new_object(world: W.World, fact: W.Fact) -> int:
    """The next object in the relation's pool that is neither the answer nor the subject."""
    pool = world.pools[fact.relation]
    i = pool.index(fact.object)
    for step in range(1, len(pool)):
        cand = pool[(i + step) % len(pool)]
        if cand != fact.subject:
            return cand
    raise E.EditError(f"relation {fact.relation} has no alternative object for fact {fact.id}")


def grid_from_dict(d: dict) -> TC.TraceGrid:
    aie = {site: np.array([[np.nan if v is None else v for v in rows[b]] for b in TC.BUCKETS])
           for site, rows in d["aie"].items()}
    counts = {site: np.zeros(len(TC.BUCKETS), dtype=np.int64) for site in aie}
    return TC.TraceGrid(aie, counts, d["fact_count"], d["perspective"], d.get("metadata", {}))
