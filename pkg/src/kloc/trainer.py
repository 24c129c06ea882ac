"""Fact-recall training for the toy transformer.

The loss is taken at the answer slot only. Each training prompt may get a short
random prefix of vocabulary words so that keys and values read later by the
editor are stable under the prefix augmentation it uses.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .world import PERSPECTIVES, PromptInstance

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: M.Params | None = None, epoch: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    recall_target: float = 0.95
    max_prefix: int = 3
    final_lr_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.recall_target <= 1.0:
            raise ValueError("recall target must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")


@dataclass
class RecallReport:
    accuracy: dict[str, float | None]
    counts: dict[str, int]
    loss_curve: list[float] = field(default_factory=list)

    @property
    def defined(self) -> bool:
        return all(v is not None for v in self.accuracy.values()) and bool(self.accuracy)

    def min_accuracy(self) -> float | None:
        vals = [v for v in self.accuracy.values() if v is not None]
        return min(vals) if vals else None

    def meets(self, target: float) -> bool:
        lo = self.min_accuracy()
        return lo is not None and lo >= target

    def to_dict(self) -> dict:
        return asdict(self)


def final_logits(params, cfg: M.ModelConfig, prompts: Sequence[Sequence[int]], pad_id: int = 0) -> np.ndarray:
    """[N, V] logits at each prompt's last position, evaluated in chunks."""
    out = []
    for i in range(0, len(prompts), EVAL_BATCH):
        chunk = prompts[i:i + EVAL_BATCH]
        toks, lens = M.pad_batch(chunk, pad_id)
        logits, _ = M.run(params, cfg, toks)
        out.append(logits.data[np.arange(len(chunk)), lens - 1])
    if not out:
        return np.zeros((0, cfg.vocab_size), dtype=np.float32)
    return np.concatenate(out)


def predictions(params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], pad_id: int = 0) -> np.ndarray:
    return final_logits(params, cfg, [p.tokens for p in prompts], pad_id).argmax(axis=-1)


def evaluate_recall(params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], pad_id: int = 0) -> RecallReport:
    """Top-1 accuracy at the final position, split by perspective.

    A perspective with no prompts reports ``None`` (undefined) rather than 0.
    """
    acc: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    preds = predictions(params, cfg, prompts, pad_id) if prompts else np.zeros(0, dtype=np.int64)
    answers = np.array([p.answer for p in prompts], dtype=np.int64)
    persp = np.array([p.perspective for p in prompts])
    for name in PERSPECTIVES:
        sel = persp == name
        counts[name] = int(sel.sum())
        acc[name] = float((preds[sel] == answers[sel]).mean()) if sel.any() else None
    return RecallReport(acc, counts)


def answer_loss(params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], pad_id: int = 0) -> float:
    if not prompts:
        return float("nan")
    logits = final_logits(params, cfg, [p.tokens for p in prompts], pad_id).astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    answers = np.array([p.answer for p in prompts])
    return float((lse - shifted[np.arange(len(prompts)), answers]).mean())


def _with_prefix(tokens: Sequence[int], rng: np.random.Generator, vocab: np.ndarray, max_prefix: int) -> list[int]:
    n = int(rng.integers(0, max_prefix + 1)) if max_prefix > 0 else 0
    return rng.choice(vocab, size=n).tolist() + list(tokens)


def train(params: M.Params, cfg: M.ModelConfig, prompts: Sequence[PromptInstance], config: TrainConfig,
          content_ids: Sequence[int] | None = None, pad_id: int = 0) -> tuple[M.Params, RecallReport]:
    """Minimise answer-slot cross-entropy over ``prompts``.

    Deterministic in ``config.seed``. Reports recall on the same prompts; a
    shortfall against ``config.recall_target`` is logged, not raised.
    """
    if any(p.answer >= cfg.vocab_size or max(p.tokens) >= cfg.vocab_size for p in prompts):
        raise M.VocabularyError("world vocabulary does not fit the model config")
    rng = np.random.default_rng(config.seed)
    vocab = np.asarray(content_ids if content_ids is not None else range(2, cfg.vocab_size), dtype=np.int64)
    params = {k: v.copy() for k, v in params.items()}
    state = T.AdamState(lr=config.lr)
    steps_per_epoch = -(-len(prompts) // config.batch_size)
    total = max(1, config.epochs * steps_per_epoch)
    curve: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(prompts))
        last_good = params
        for start in range(0, len(order), config.batch_size):
            batch = [prompts[i] for i in order[start:start + config.batch_size]]
            seqs = [_with_prefix(p.tokens, rng, vocab, config.max_prefix) for p in batch]
            toks, lens = M.pad_batch(seqs, pad_id)
            tp = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
            with T.Tape() as tape:
                logits, _ = M.run(tp, cfg, toks)
                picked = T.take(logits, (np.arange(len(batch)), lens - 1))
                loss = T.cross_entropy(picked, [p.answer for p in batch])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss in epoch {epoch}", last_good, epoch)
            g = T.backward(loss, tape)
            grads = {k: g[t] for k, t in tp.items()}
            # linear decay to final_lr_fraction of the base rate
            lr = config.lr * (1.0 - (1.0 - config.final_lr_fraction) * step / total)
            try:
                if config.optimizer == "adam":
                    params = T.adam_step(params, grads, state, lr=lr)
                else:
                    params = T.sgd_step(params, grads, lr)
            except T.NumericError as exc:
                raise TrainingError(str(exc), last_good, epoch) from exc
            step += 1
        curve.append(answer_loss(params, cfg, prompts, pad_id))
        log.info("epoch %d loss %.4f", epoch + 1, curve[-1])
    report = evaluate_recall(params, cfg, prompts, pad_id)
    report.loss_curve = curve
    if not report.meets(config.recall_target):
        log.warning("recall %s below target %.2f", report.accuracy, config.recall_target)
    return params, report
