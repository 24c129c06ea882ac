"""Pre-LN decoder-only transformer with full activation capture and patching.

Each block follows the parallel-read residual form

    a = attn(ln1(h_prev))
    m = W_proj gelu(W_fc ln2(a + h_prev))
    h = h_prev + a + m

and every one of ``h``, ``a`` and ``m`` can be patched by an
:class:`Intervention` right after it is computed and before anything reads it.
Layers are numbered 1..L; layer 0 is the embedding sum.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor

SITES = ("embedding", "hidden", "attn_out", "mlp_out")
ACTIONS = ("add", "restore", "freeze")
MAGIC = b"KLOC"
FORMAT_VERSION = 1
_MASK_VALUE = -1e9

Params = dict[str, np.ndarray]


class VocabularyError(IndexError):
    pass


class InterventionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 128
    max_len: int = 32

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least 1 layer")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if self.d_ff < 1 or self.max_len < 1:
            raise ValueError("d_ff and max_len must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for l in range(1, cfg.n_layers + 1):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_fc": (d, f), p + "mlp.w_proj": (f, d),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w_proj")):
            arr = rng.normal(0.0, out_std, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = arr.astype(DTYPE)
    return params


def mlp_proj_name(layer: int) -> str:
    return f"layers.{layer}.mlp.w_proj"


def mlp_fc_name(layer: int) -> str:
    return f"layers.{layer}.mlp.w_fc"


# ---------------------------------------------------------------- activation tape


class ActivationTape:
    """Per-layer, per-position activations of one (batched) forward pass.

    ``hidden[:, l]`` is h^(l) for l in 0..L; ``attn[:, l]``, ``mlp[:, l]`` and
    ``keys[:, l]`` are meaningful for l in 1..L (index 0 is zeros). ``keys``
    holds the post-GELU input to W_proj and is only kept when requested.
    """

    def __init__(self, cfg: ModelConfig, hidden: list, attn: list, mlp: list, keys: list | None):
        self.config = cfg
        self._h, self._a, self._m, self._k = hidden, attn, mlp, keys
        self._cache: dict[str, np.ndarray] = {}

    def _stack(self, name: str, items: list) -> np.ndarray:
        if name not in self._cache:
            first = items[0]
            zero = np.zeros_like(items[1]) if first is None else first
            self._cache[name] = np.stack([zero if x is None else x for x in items], axis=1)
        return self._cache[name]

    @property
    def hidden(self) -> np.ndarray:
        return self._stack("hidden", self._h)

    @property
    def attn(self) -> np.ndarray:
        return self._stack("attn", self._a)

    @property
    def mlp(self) -> np.ndarray:
        return self._stack("mlp", self._m)

    @property
    def keys(self) -> np.ndarray:
        if self._k is None:
            raise InterventionError("keys were not captured for this run")
        return self._stack("keys", self._k)

    def site(self, site: str) -> np.ndarray:
        if site in ("embedding", "hidden"):
            return self.hidden
        if site == "attn_out":
            return self.attn
        if site == "mlp_out":
            return self.mlp
        raise InterventionError(f"unknown site {site!r}")

    def layer_value(self, site: str, layer: int) -> np.ndarray:
        """[B, T, d] values at one layer without stacking the whole tape."""
        if site in ("embedding", "hidden"):
            return self._h[layer]
        if site == "keys":
            if self._k is None:
                raise InterventionError("keys were not captured for this run")
            return self._k[layer]
        return (self._a if site == "attn_out" else self._m)[layer]

    @property
    def batch(self) -> int:
        return self._h[0].shape[0]

    @property
    def length(self) -> int:
        return self._h[0].shape[1]

    def row(self, b: int) -> "ActivationTape":
        pick = lambda xs: None if xs is None else [None if x is None else x[b:b + 1] for x in xs]
        return ActivationTape(self.config, pick(self._h), pick(self._a), pick(self._m), pick(self._k))


# ---------------------------------------------------------------- interventions


@dataclass(frozen=True)
class Intervention:
    """A patch on one site over a set of positions and layers.

    ``add`` adds ``value`` (array broadcastable to [rows, positions, d], or a
    Tensor of shape [d] to keep the patch differentiable). ``restore`` and
    ``freeze`` both overwrite with values from ``references[source]``; the
    names keep the intent readable (clean restore vs. severing freeze).
    ``rows`` limits the patch to some batch rows; ``source_rows`` picks the
    reference row for each of them (default: row-aligned, or broadcast from a
    single-row reference).
    """

    site: str
    layers: tuple[int, ...]
    positions: tuple[int, ...]
    action: str
    value: Any = None
    source: str | None = None
    rows: tuple[int, ...] | None = None
    source_rows: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.site not in SITES:
            raise InterventionError(f"unknown site {self.site!r}")
        if self.action not in ACTIONS:
            raise InterventionError(f"unknown action {self.action!r}")
        if self.action == "add" and self.value is None:
            raise InterventionError("add needs a value")
        if self.action != "add" and self.source is None:
            raise InterventionError(f"{self.action} needs a reference tape name")


def add_noise(positions: Sequence[int], noise, rows=None) -> Intervention:
    return Intervention("embedding", (0,), tuple(positions), "add", value=noise,
                        rows=None if rows is None else tuple(rows))


def restore_from(source: str, site: str, layers: Sequence[int], positions: Sequence[int],
                 rows=None, source_rows=None) -> Intervention:
    return Intervention(site, tuple(layers), tuple(positions), "restore", source=source,
                        rows=None if rows is None else tuple(rows),
                        source_rows=None if source_rows is None else tuple(source_rows))


def freeze_to(source: str, site: str, layers: Sequence[int], positions: Sequence[int],
              rows=None, source_rows=None) -> Intervention:
    return Intervention(site, tuple(layers), tuple(positions), "freeze", source=source,
                        rows=None if rows is None else tuple(rows),
                        source_rows=None if source_rows is None else tuple(source_rows))


def _validate(interventions, references, cfg: ModelConfig, B: int, Tn: int):
    groups: dict[tuple[str, int], list[Intervention]] = {}
    for iv in interventions:
        if any(p < 0 or p >= Tn for p in iv.positions):
            raise InterventionError(f"positions {iv.positions} outside prompt of length {Tn}")
        allowed = (0, 0) if iv.site == "embedding" else (1, cfg.n_layers)
        if any(not allowed[0] <= l <= allowed[1] for l in iv.layers):
            raise InterventionError(f"layers {iv.layers} invalid for site {iv.site}")
        if iv.rows is not None and any(r < 0 or r >= B for r in iv.rows):
            raise InterventionError(f"rows {iv.rows} outside batch of {B}")
        if iv.source is not None:
            ref = (references or {}).get(iv.source)
            if ref is None:
                raise InterventionError(f"no reference tape named {iv.source!r}")
            if ref.length != Tn or ref.config != cfg:
                raise InterventionError(
                    f"reference {iv.source!r} has length {ref.length}, run has {Tn}, or a different config")
            n_rows = B if iv.rows is None else len(iv.rows)
            if iv.source_rows is not None:
                if len(iv.source_rows) != n_rows or max(iv.source_rows) >= ref.batch:
                    raise InterventionError("source_rows do not line up with the reference tape")
            elif ref.batch not in (1, n_rows):
                raise InterventionError(f"reference {iv.source!r} has {ref.batch} rows, patch covers {n_rows}")
        for l in iv.layers:
            groups.setdefault((iv.site, l), []).append(iv)
    return groups


def _apply(value: Tensor, site: str, layer: int, groups, references) -> Tensor:
    for iv in groups.get((site, layer), ()):
        B, Tn, d = value.shape
        rows = np.arange(B) if iv.rows is None else np.asarray(iv.rows)
        pos = np.asarray(iv.positions)
        mask = np.zeros((B, Tn, 1), dtype=bool)
        mask[np.ix_(rows, pos)] = True
        if iv.action == "add":
            if isinstance(iv.value, Tensor):
                value = T.add(value, T.mul(mask.astype(DTYPE), iv.value))
            else:
                full = np.zeros((B, Tn, d), dtype=DTYPE)
                full[np.ix_(rows, pos)] = np.broadcast_to(np.asarray(iv.value, dtype=DTYPE), (len(rows), len(pos), d))
                value = T.add(value, full)
        else:
            ref = references[iv.source].layer_value(site, layer)
            if iv.source_rows is not None:
                src = ref[np.asarray(iv.source_rows)]
            else:
                src = np.broadcast_to(ref, (len(rows),) + ref.shape[1:])
            full = np.zeros((B, Tn, d), dtype=DTYPE)
            full[np.ix_(rows, pos)] = src[:, pos]
            value = T.where(mask, full, value)
    return value


# ---------------------------------------------------------------- forward


def _as_batch(tokens, cfg: ModelConfig) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError(f"tokens must be a non-empty sequence or [B, T] batch, got shape {arr.shape}")
    if arr.shape[1] > cfg.max_len:
        raise ValueError(f"sequence of {arr.shape[1]} tokens exceeds context length {cfg.max_len}")
    if (arr < 0).any() or (arr >= cfg.vocab_size).any():
        raise VocabularyError(f"token id outside vocabulary of {cfg.vocab_size}")
    return arr


def _wrap(params: Mapping[str, Any]) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), _MASK_VALUE, dtype=DTYPE), k=1)


def _attention(x: Tensor, p: dict[str, Tensor], prefix: str, cfg: ModelConfig, mask: np.ndarray) -> Tensor:
    B, Tn, d = x.shape
    H, dh = cfg.n_heads, cfg.d_head

    def heads(w):
        return T.swapaxes(T.reshape(T.matmul(x, p[prefix + w]), (B, Tn, H, dh)), 1, 2)

    q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    weights = T.softmax(T.add(scores, mask))
    ctx = T.reshape(T.swapaxes(T.matmul(weights, v), 1, 2), (B, Tn, d))
    return T.matmul(ctx, p[prefix + "attn.wo"])


def run(params: Mapping[str, Any], cfg: ModelConfig, tokens, interventions: Sequence[Intervention] = (),
        references: Mapping[str, ActivationTape] | None = None, capture_keys: bool = False,
        start: tuple[int, np.ndarray] | None = None) -> tuple[Tensor, ActivationTape]:
    """Batched forward. Returns logits as a Tensor of shape [B, T, V].

    ``start=(s, h)`` resumes from a given h^(s) of shape [B, T, d] and only
    computes layers s+1..L; tape entries below s are NaN. Interventions must
    then target layers above s.
    """
    ids = _as_batch(tokens, cfg)
    B, Tn = ids.shape
    groups = _validate(interventions, references, cfg, B, Tn)
    p = _wrap(params)
    mask = _causal_mask(Tn)

    first, blank = 1, None
    if start is None:
        h = T.add(T.embedding(p["tok_emb"], ids), T.take(p["pos_emb"], slice(0, Tn)))
        h = _apply(h, "embedding", 0, groups, references)
        hs, attns, mlps = [h.data], [None], [None]
    else:
        s, h0 = start
        if not 0 <= s <= cfg.n_layers or np.shape(h0) != (B, Tn, cfg.d_model):
            raise InterventionError(f"bad resume point: layer {s}, state shape {np.shape(h0)}")
        if any(l <= s for (_, l) in groups):
            raise InterventionError(f"interventions at or below resume layer {s}")
        blank = np.full((B, Tn, cfg.d_model), np.nan, dtype=DTYPE)
        h = Tensor(np.asarray(h0, dtype=DTYPE))
        hs, attns, mlps = [blank] * s + [h.data], [None] + [blank] * s, [None] + [blank] * s
        first = s + 1
    keys = [None] + [blank] * (first - 1) if capture_keys else None
    for l in range(first, cfg.n_layers + 1):
        pre = f"layers.{l}."
        a = _attention(T.layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, cfg, mask)
        a = _apply(a, "attn_out", l, groups, references)
        z = T.layernorm(T.add(a, h), p[pre + "ln2.g"], p[pre + "ln2.b"])
        k = T.gelu(T.matmul(z, p[pre + "mlp.w_fc"]))
        m = T.matmul(k, p[pre + "mlp.w_proj"])
        m = _apply(m, "mlp_out", l, groups, references)
        h = T.add(T.add(h, a), m)
        h = _apply(h, "hidden", l, groups, references)
        hs.append(h.data)
        attns.append(a.data)
        mlps.append(m.data)
        if keys is not None:
            keys.append(k.data)
    logits = T.matmul(T.layernorm(h, p["ln_f.g"], p["ln_f.b"]), p["unembed"])
    return logits, ActivationTape(cfg, hs, attns, mlps, keys)


def forward(params: Mapping[str, Any], cfg: ModelConfig, tokens, capture_keys: bool = False
            ) -> tuple[np.ndarray, ActivationTape]:
    """Logits [T, V] for a 1-D token sequence, [B, T, V] for a batch."""
    logits, tape = run(params, cfg, tokens, capture_keys=capture_keys)
    return _squeeze(logits.data, tokens), tape


def forward_intervened(params: Mapping[str, Any], cfg: ModelConfig, tokens, interventions: Sequence[Intervention],
                       references: Mapping[str, ActivationTape] | None = None, capture_keys: bool = False
                       ) -> tuple[np.ndarray, ActivationTape]:
    logits, tape = run(params, cfg, tokens, interventions, references, capture_keys)
    return _squeeze(logits.data, tokens), tape


def _squeeze(logits: np.ndarray, tokens) -> np.ndarray:
    return logits[0] if np.asarray(tokens).ndim == 1 else logits


def answer_probability(logits, answer: int) -> float:
    """softmax(logits)[answer] for a final-position logit vector."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D logit vector, got shape {x.shape}")
    if not 0 <= answer < x.shape[0]:
        raise VocabularyError(f"answer id {answer} outside vocabulary of {x.shape[0]}")
    shifted = x - x.max()
    return float(np.exp(shifted[answer] - np.log(np.exp(shifted).sum())))


def answer_probabilities(final_logits: np.ndarray, answers) -> np.ndarray:
    """Row-wise version of :func:`answer_probability` for a [B, V] array."""
    x = np.asarray(final_logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return np.exp(logp[np.arange(len(x)), np.asarray(answers)])


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a [B, T] array; returns it with the true lengths."""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    out = np.full((len(sequences), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, :len(s)] = s
    return out, lengths


# ---------------------------------------------------------------- checkpoints


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def checkpoint_bytes(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(FORMAT_VERSION))
    meta = json.dumps(asdict(cfg), sort_keys=True).encode()
    buf.write(_u32(len(meta)))
    buf.write(meta)
    buf.write(_u32(len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        buf.write(_u32(len(raw)))
        buf.write(raw)
        buf.write(_u32(arr.ndim))
        for n in arr.shape:
            buf.write(_u32(n))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> str:
    data = checkpoint_bytes(cfg, params)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Params]:
    data = Path(path).read_bytes()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> tuple[ModelConfig, Params]:
    view = memoryview(data)
    at = 0

    def u32() -> int:
        nonlocal at
        if at + 4 > len(view):
            raise CheckpointError("truncated checkpoint")
        (n,) = struct.unpack_from("<I", view, at)
        at += 4
        return n

    def raw(n: int) -> bytes:
        nonlocal at
        if at + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = bytes(view[at:at + n])
        at += n
        return out

    if raw(4) != MAGIC:
        raise CheckpointError("bad magic; not a KLOC checkpoint")
    version = u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(**json.loads(raw(u32())))
    params: Params = {}
    for _ in range(u32()):
        name = raw(u32()).decode()
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(raw(4 * count), dtype="<f4").reshape(shape).astype(DTYPE)
    if at != len(view):
        raise CheckpointError("trailing bytes after last array")
    expected = param_shapes(cfg)
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError("checkpoint arrays do not match its config")
    return cfg, params


def params_hash(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(checkpoint_bytes(cfg, params)).hexdigest()
