"""Locate-then-edit on the second MLP matrix of one layer.

A fact is edited by (1) reading its key, the post-GELU MLP activation at a key
position, averaged over a few random-prefix variants of the prompt; (2)
optimising an additive residual on that layer's MLP output until the model
prefers the new object; (3) solving a ridge least-squares problem so the
edited matrix maps the key to the new value while preserved keys keep their
current outputs.

Weights are used in math orientation inside the solver: W is [d_out, d_in]
and keys are columns. The stored ``mlp.w_proj`` is the transpose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .trainer import TrainingError, final_logits, predictions
from .world import PromptInstance

log = logging.getLogger(__name__)

KEY_RULES = {"entity": "last-subject-token", "relation": "last-relation-token"}
STALL_STEPS = 50


class EditError(ValueError):
    pass


class SpanError(EditError):
    pass


class OptimizationStall(RuntimeError):
    pass


class ConditioningError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class EditRequest:
    prompt: PromptInstance  # train template of the edit perspective, answer = original object
    target: int  # token id of the new object

    @property
    def perspective(self) -> str:
        return self.prompt.perspective

    @property
    def fact_id(self) -> int:
        return self.prompt.fact_id


@dataclass
class EditConfig:
    layer: int = 3
    key_rule: str | None = None  # default follows the request perspective
    steps: int = 200
    lr: float = 1.0
    target_prob: float = 0.95
    norm_cap_factor: float = 4.0
    n_preserve: int = 50
    max_updates: int = 100
    n_aug: int = 8
    max_prefix: int = 3
    lam_scale: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.key_rule is not None and self.key_rule not in KEY_RULES.values():
            raise EditError(f"unknown key rule {self.key_rule!r}")
        if self.n_preserve < 0 or self.max_updates < 1 or self.n_aug < 1 or self.lam_scale <= 0:
            raise EditError("need n >= 0, u >= 1, N >= 1 and lambda > 0")
        if self.steps < 0 or self.lr <= 0:
            raise EditError("steps must be >= 0 and lr positive")

    def rule_for(self, perspective: str) -> str:
        return self.key_rule or KEY_RULES[perspective]


@dataclass
class KeyValuePair:
    key: np.ndarray
    value: np.ndarray
    delta: np.ndarray
    base: np.ndarray  # W k, the layer output the key produces before editing

    def __post_init__(self):
        if not np.array_equal(self.value, self.base + self.delta):
            raise EditError("value must equal base output plus delta")


@dataclass
class EditTrace:
    layer: int
    entries: list[dict] = field(default_factory=list)
    solver: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "requests": self.entries, "solver": self.solver}


# ---------------------------------------------------------------- keys


def key_position(prompt: PromptInstance, rule: str) -> int:
    span = prompt.subject_span if rule == "last-subject-token" else prompt.relation_span
    pos = span[1] - 1
    if not span[0] <= pos < len(prompt):
        raise SpanError(f"key position {pos} outside prompt of length {len(prompt)}")
    return pos


def prefixes(vocab: Sequence[int], n: int, max_prefix: int, seed: int, fact_id: int) -> list[tuple[int, ...]]:
    """n random prefixes of 0..max_prefix tokens; the first is always empty."""
    rng = np.random.default_rng([seed, fact_id, 7])
    vocab = np.asarray(vocab)
    out = [()]
    for _ in range(n - 1):
        k = int(rng.integers(0, max_prefix + 1))
        out.append(tuple(int(t) for t in rng.choice(vocab, size=k)))
    return out


@dataclass
class _Augmented:
    tokens: np.ndarray  # [N, T_max], right padded
    lengths: np.ndarray
    key_pos: np.ndarray  # per-row key position


def _augment(prompt: PromptInstance, pos: int, pre: Sequence[tuple[int, ...]], pad_id: int) -> _Augmented:
    seqs = [list(p) + list(prompt.tokens) for p in pre]
    toks, lens = M.pad_batch(seqs, pad_id)
    return _Augmented(toks, lens, np.array([len(p) + pos for p in pre]))


def compute_key(params, cfg: M.ModelConfig, prompt: PromptInstance, rule: str, layer: int,
                pre: Sequence[tuple[int, ...]] = ((),), pad_id: int = 0) -> np.ndarray:
    """Mean post-GELU activation at the key position over the prefix variants."""
    aug = _augment(prompt, key_position(prompt, rule), pre, pad_id)
    _, tape = M.run(params, cfg, aug.tokens, capture_keys=True)
    keys = tape.layer_value("keys", layer)[np.arange(len(pre)), aug.key_pos].astype(np.float64)
    return keys.mean(axis=0)


def w_math(params, layer: int) -> np.ndarray:
    return np.asarray(params[M.mlp_proj_name(layer)], dtype=np.float64).T


# ---------------------------------------------------------------- values


def _target_loss(params, cfg, aug: _Augmented, layer: int, target: int, delta: T.Tensor):
    ivs = []
    for pos in np.unique(aug.key_pos):
        rows = np.flatnonzero(aug.key_pos == pos)
        ivs.append(M.Intervention("mlp_out", (layer,), (int(pos),), "add", value=delta, rows=tuple(rows)))
    logits, _ = M.run(params, cfg, aug.tokens, ivs)
    picked = T.take(logits, (np.arange(len(aug.lengths)), aug.lengths - 1))
    loss = T.cross_entropy(picked, np.full(len(aug.lengths), target))
    probs = M.answer_probabilities(picked.data, np.full(len(aug.lengths), target))
    return loss, probs


def optimize_value(params, cfg: M.ModelConfig, request: EditRequest, config: EditConfig,
                   pre: Sequence[tuple[int, ...]], pad_id: int = 0, key: np.ndarray | None = None
                   ) -> tuple[KeyValuePair, dict]:
    """Gradient descent with backtracking on the residual added to the MLP
    output at the key position; the loss never increases between steps."""
    rule = config.rule_for(request.perspective)
    layer = config.layer
    pos = key_position(request.prompt, rule)
    aug = _augment(request.prompt, pos, pre, pad_id)
    if key is None:
        key = compute_key(params, cfg, request.prompt, rule, layer, pre, pad_id)
    base = w_math(params, layer) @ key

    _, tape = M.run(params, cfg, aug.tokens)
    h = tape.layer_value("hidden", layer)
    valid = np.arange(h.shape[1])[None, :] < aug.lengths[:, None]
    cap = config.norm_cap_factor * float(np.linalg.norm(h[valid].astype(np.float64), axis=-1).mean())

    def evaluate(d: np.ndarray, grad: bool):
        dt = T.Tensor(d.astype(M.DTYPE), requires_grad=grad)
        if not grad:
            loss, probs = _target_loss(params, cfg, aug, layer, request.target, dt)
            return float(loss.data), probs, None
        with T.Tape() as tp:
            loss, probs = _target_loss(params, cfg, aug, layer, request.target, dt)
        return float(loss.data), probs, T.backward(loss, tp)[dt].astype(np.float64)

    delta = np.zeros(cfg.d_model)
    loss, probs, g = evaluate(delta, True)
    losses = [loss]
    lr, since_progress, steps = config.lr, 0, 0
    while steps < config.steps and probs.min() < config.target_prob:
        steps += 1
        improved = False
        for _ in range(20):
            cand = delta - lr * g
            norm = np.linalg.norm(cand)
            if norm > cap:
                cand *= cap / norm
            c_loss, c_probs, _ = evaluate(cand, False)
            if c_loss <= loss:
                improved = c_loss < loss
                delta = cand
                lr *= 1.5
                break
            lr *= 0.5
        if improved:
            since_progress = 0
            loss, probs, g = evaluate(delta, True)
        else:
            since_progress += 1
            if since_progress >= STALL_STEPS:
                raise OptimizationStall(f"no descent for {STALL_STEPS} steps on fact {request.fact_id}")
        losses.append(loss)
    pair = KeyValuePair(key, base + delta, delta, base)
    info = {"steps": steps, "losses": losses, "norm_cap": cap, "delta_norm": float(np.linalg.norm(delta)),
            "target_prob_min": float(probs.min()), "target_prob_mean": float(probs.mean())}
    return pair, info


# ---------------------------------------------------------------- solver


def default_lambda(keys: np.ndarray, scale: float = 1e-2) -> float:
    """scale x mean diagonal of K K^T for column keys K [d_in, m]."""
    return scale * float(np.mean(np.sum(np.asarray(keys, dtype=np.float64) ** 2, axis=1)))


def ridge_objective(W_new, W, K, V, lam) -> float:
    return float(np.sum((W_new @ K - V) ** 2) + lam * np.sum((W_new - W) ** 2))


def solve_weight_update(W: np.ndarray, K_keep: np.ndarray, V_keep: np.ndarray, K_new: np.ndarray,
                        V_new: np.ndarray, lam: float | None = None, toward_current: bool = True,
                        max_cond: float = 1e12) -> tuple[np.ndarray, dict]:
    """Closed-form least squares over preserved and updated (key, value) columns.

    With ``toward_current`` the ridge term pulls toward W:
    W + (V - W K) K^T (K K^T + lam I)^-1. Otherwise it is the plain ridge
    solution V K^T (K K^T + lam I)^-1, which shrinks W outside span(K).
    """
    W = np.asarray(W, dtype=np.float64)
    d_in = W.shape[1]
    K = np.concatenate([np.reshape(K_keep, (d_in, -1)), np.reshape(K_new, (d_in, -1))], axis=1).astype(np.float64)
    V = np.concatenate([np.reshape(V_keep, (W.shape[0], -1)), np.reshape(V_new, (W.shape[0], -1))],
                       axis=1).astype(np.float64)
    if K.shape[1] == 0:
        return W.copy(), {"lambda": lam, "residual_keep": 0.0, "residual_new": 0.0, "cond": 1.0}
    if lam is None:
        lam = default_lambda(K)
    A = K @ K.T + lam * np.eye(d_in)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > max_cond:
        raise ConditioningError(f"K K^T + lambda I has condition number {cond:.3g}")
    if toward_current:
        W_new = W + np.linalg.solve(A, K @ (V - W @ K).T).T
    else:
        W_new = np.linalg.solve(A, K @ V.T).T
    n_keep = np.reshape(K_keep, (d_in, -1)).shape[1]
    res = np.linalg.norm(W_new @ K - V, axis=0) / np.maximum(np.linalg.norm(V, axis=0), 1e-12)
    diag = {"lambda": lam, "cond": cond,
            "residual_keep": float(res[:n_keep].max()) if n_keep else 0.0,
            "residual_new": float(res[n_keep:].max()) if K.shape[1] > n_keep else 0.0,
            "objective": ridge_objective(W_new, W if toward_current else np.zeros_like(W), K, V, lam)}
    return W_new, diag


# ---------------------------------------------------------------- edits


def _check_requests(params, cfg, requests: Sequence[EditRequest], pad_id: int):
    if any(r.target == r.prompt.answer for r in requests):
        raise EditError("new object must differ from the original")
    keys = [r.prompt.fact_id for r in requests]
    if len(set(keys)) != len(keys):
        raise EditError("conflicting requests for the same fact")
    if len({r.perspective for r in requests}) > 1:
        raise EditError("requests mix perspectives")
    if requests:
        pred = predictions(params, cfg, [r.prompt for r in requests], pad_id)
        for r, p in zip(requests, pred):
            if p != r.prompt.answer:
                raise EditError(f"fact {r.fact_id} is not recalled before editing")


def apply_edit(params, cfg: M.ModelConfig, requests: Sequence[EditRequest], config: EditConfig,
               preserve: Sequence[PromptInstance] = (), vocab: Sequence[int] = (), pad_id: int = 0
               ) -> tuple[M.Params, EditTrace]:
    """Rewrite W_proj at ``config.layer``; every other array is returned as-is."""
    trace = EditTrace(config.layer)
    if not requests:
        return dict(params), trace
    if len(requests) > config.max_updates:
        raise EditError(f"{len(requests)} requests exceed the update cap {config.max_updates}")
    _check_requests(params, cfg, requests, pad_id)
    layer = config.layer
    vocab = list(vocab) or list(range(2, cfg.vocab_size))
    W = w_math(params, layer)
    edit_ids = {r.fact_id for r in requests}
    keep = [p for p in preserve if p.fact_id not in edit_ids][:config.n_preserve]
    rule = config.rule_for(requests[0].perspective)

    K_keep = np.stack([compute_key(params, cfg, p, rule, layer,
                                   prefixes(vocab, config.n_aug, config.max_prefix, config.seed, p.fact_id), pad_id)
                       for p in keep], axis=1) if keep else np.zeros((W.shape[1], 0))
    V_keep = W @ K_keep
    K_new, V_new = [], []
    for r in requests:
        pre = prefixes(vocab, config.n_aug, config.max_prefix, config.seed, r.fact_id)
        pair, info = optimize_value(params, cfg, r, config, pre, pad_id)
        K_new.append(pair.key)
        V_new.append(pair.value)
        trace.entries.append({"fact_id": r.fact_id, "perspective": r.perspective, "key_rule": rule,
                              "target": r.target, "key_norm": float(np.linalg.norm(pair.key)), **info})
    K_new, V_new = np.stack(K_new, axis=1), np.stack(V_new, axis=1)
    lam = default_lambda(np.concatenate([K_keep, K_new], axis=1), config.lam_scale)
    W_new, diag = solve_weight_update(W, K_keep, V_keep, K_new, V_new, lam)
    trace.solver = {**diag, "n_preserve": len(keep), "n_update": len(requests)}
    edited = dict(params)
    edited[M.mlp_proj_name(layer)] = W_new.T.astype(M.DTYPE)
    post = final_logits(edited, cfg, [r.prompt.tokens for r in requests], pad_id)
    pre_l = final_logits(params, cfg, [r.prompt.tokens for r in requests], pad_id)
    for e, r, a, b in zip(trace.entries, requests, pre_l, post):
        e["pre_prob"] = M.answer_probability(a, r.target)
        e["post_prob"] = M.answer_probability(b, r.target)
        e["post_top1"] = int(np.argmax(b))
    return edited, trace


def finetune_baseline(params, cfg: M.ModelConfig, requests: Sequence[EditRequest], layer: int, steps: int = 100,
                      lr: float = 1e-3, target_prob: float = 0.95, pad_id: int = 0,
                      max_steps: int = 1000, max_lr: float = 1.0) -> M.Params:
    """Adam on -log P[y*|x] over both MLP matrices of one layer."""
    if steps > max_steps or lr > max_lr:
        raise EditError(f"fine-tuning caps exceeded (steps <= {max_steps}, lr <= {max_lr})")
    edited = dict(params)
    if steps == 0 or not requests:
        return edited
    names = [M.mlp_fc_name(layer), M.mlp_proj_name(layer)]
    toks, lens = M.pad_batch([r.prompt.tokens for r in requests], pad_id)
    targets = np.array([r.target for r in requests])
    state = T.AdamState(lr=lr)
    for _ in range(steps):
        tp = {k: (T.Tensor(v, requires_grad=True) if k in names else v) for k, v in edited.items()}
        with T.Tape() as tape:
            logits, _ = M.run(tp, cfg, toks)
            picked = T.take(logits, (np.arange(len(requests)), lens - 1))
            loss = T.cross_entropy(picked, targets)
        if not np.isfinite(loss.data):
            raise TrainingError("fine-tuning diverged")
        if M.answer_probabilities(picked.data, targets).min() >= target_prob:
            break
        g = T.backward(loss, tape)
        sub = {k: edited[k] for k in names}
        try:
            sub = T.adam_step(sub, {k: g[tp[k]] for k in names}, state)
        except T.NumericError as exc:
            raise TrainingError(str(exc)) from exc
        edited.update(sub)
    return edited
