"""Training loops (full and adapter-only), optimizer, and evaluation metrics.

The loop is deliberately plain: AdamW with decoupled decay, global-norm
gradient clipping, optional linear warmup, validation-loss early stopping,
and best-checkpoint restore. Identical (config, seed, corpus) reruns produce
bit-identical trajectories in single-worker mode, which experiment manifests
depend on.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adapter import LoRAAdapter, as_overrides
from .continual import RegConfig, TaskRecord, reg_penalty, regularized_step_loss
from .data import PAD, ParallelCorpus, Vocab, batch_iter, decode
from .errors import ConfigError, DivergenceError
from .model import Model
from .tensor import Tensor, no_grad

SCOPES = ("full", "adapter-only")


@dataclass
class TrainConfig:
    scope: str = "full"
    lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 10
    clip_norm: float = 1.0
    seed: int = 0
    reg: RegConfig | None = None
    eval_every: int | None = None  # steps; None evaluates at each epoch end
    warmup_steps: int = 200

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.lr < 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("lr, weight_decay, warmup_steps must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class RunHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, step: int, **metrics) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ConfigError(
                f"history steps must increase: {step} after "
                f"{self.records[-1]['step']}")
        self.records.append({"step": step, **metrics})

    def last(self) -> dict:
        return self.records[-1]

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]

    def save(self, path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")

    @classmethod
    def load(cls, path) -> "RunHistory":
        h = cls()
        for line in Path(path).read_text("utf-8").splitlines():
            if line.strip():
                h.records.append(json.loads(line))
        return h


class AdamW:
    """Adam with decoupled weight decay; optimizer state is float64."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape, np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, np.float64) for p in self.params]

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                p.data *= np.asarray(1.0 - lr * self.weight_decay, p.data.dtype)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def clip_gradients(params: Sequence[Tensor], clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most clip_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def _loss_over(m: Model, corpus: ParallelCorpus, vocab: Vocab,
               overrides, batch_size: int) -> float:
    """Token-weighted mean cross-entropy over a corpus, off the tape."""
    total_nll = 0.0
    total_tokens = 0
    with no_grad():
        for batch in batch_iter(corpus, vocab, batch_size, m.cfg.max_len):
            n = int((batch.tgt[:, 1:] != PAD).sum())
            loss = m.loss(batch.src, batch.tgt, overrides=overrides)
            total_nll += loss.item() * n
            total_tokens += n
    return total_nll / max(total_tokens, 1)


def token_accuracy(m: Model, corpus: ParallelCorpus, vocab: Vocab,
                   overrides=None, batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over non-pad target positions."""
    hit = total = 0
    with no_grad():
        for batch in batch_iter(corpus, vocab, batch_size, m.cfg.max_len):
            logits = m.forward(batch.src, batch.tgt[:, :-1], overrides=overrides)
            pred = np.argmax(logits.data, axis=-1)
            gold = batch.tgt[:, 1:]
            mask = gold != PAD
            hit += int((pred[mask] == gold[mask]).sum())
            total += int(mask.sum())
    return hit / max(total, 1)


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Corpus-level BLEU in [0, 100]: geometric mean of clipped 1-4-gram
    precisions times the exponential brevity penalty, no smoothing.

    Tokens are compared as given. A corpus with zero matches at any order
    scores 0.0 (the standard unsmoothed corpus-BLEU convention).
    """
    if len(hypotheses) == 0:
        raise ConfigError("bleu needs at least one sentence pair")
    if len(hypotheses) != len(references):
        raise ConfigError(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    match = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_grams = Counter(tuple(hyp[i:i + n])
                                for i in range(len(hyp) - n + 1))
            ref_grams = Counter(tuple(ref[i:i + n])
                                for i in range(len(ref) - n + 1))
            total[n - 1] += max(len(hyp) - n + 1, 0)
            match[n - 1] += sum(min(c, ref_grams[g])
                                for g, c in hyp_grams.items())
    if any(m == 0 for m in match):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(match, total)) / 4.0
    if hyp_len == 0:
        return 0.0
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_precision)


def corpus_bleu(m: Model, corpus: ParallelCorpus, vocab: Vocab,
                overrides=None, batch_size: int = 32) -> float:
    """BLEU of greedy translations against the corpus targets."""
    hyps, refs = [], []
    max_ref = max(len(t.split()) for _, t in corpus.pairs)
    max_new = min(m.cfg.max_len - 1, max_ref + 6)
    for batch in batch_iter(corpus, vocab, batch_size, m.cfg.max_len):
        out = m.greedy_decode(batch.src, max_len=max_new, overrides=overrides)
        for row in out:
            hyps.append(decode(vocab, row).split())
    for _, t in corpus.pairs:
        refs.append(t.split())
    return bleu(hyps, refs)


def train(m: Model, adapter: LoRAAdapter | None, train_corpus: ParallelCorpus,
          valid_corpus: ParallelCorpus, vocab: Vocab, cfg: TrainConfig,
          history: Sequence[TaskRecord] | None = None,
          acc_tasks: Mapping[str, ParallelCorpus] | None = None,
          bleu_tasks: Mapping[str, ParallelCorpus] | None = None) -> RunHistory:
    """Run the training loop; the model (or adapter) ends at its
    best-validation state.

    adapter-only scope trains just the factor pairs through the dynamic
    low-rank route with the base frozen; full scope trains every model
    parameter. With a gradient/l2 regularizer config and task records, each
    step minimizes task loss plus the drift penalty.
    """
    if cfg.scope == "adapter-only" and adapter is None:
        raise ConfigError("adapter-only scope requires an adapter")
    if len(train_corpus) == 0 or len(valid_corpus) == 0:
        raise ConfigError("train and valid corpora must be non-empty")
    if cfg.scope == "adapter-only":
        params = adapter.trainable()
        overrides = as_overrides(m, adapter)
    else:
        params = list(m.params.values())
        overrides = None

    reg = cfg.reg
    use_penalty = (reg is not None and reg.mode != "none"
                   and reg.lambda_reg > 0 and history)

    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    dropout_rng = (np.random.default_rng(cfg.seed + 7919)
                   if m.cfg.dropout > 0 else None)
    run = RunHistory()
    t0 = time.monotonic()
    step = 0
    best_val = math.inf
    best_state = None
    evals_since_best = 0

    def snapshot():
        return [p.data.copy() for p in params]

    def restore(state):
        for p, saved in zip(params, state):
            p.data[...] = saved

    def evaluate(last_loss: float, last_penalty: float) -> float:
        val_loss = _loss_over(m, valid_corpus, vocab, overrides, cfg.batch_size)
        record = {"loss": last_loss, "penalty": last_penalty,
                  "val_loss": val_loss,
                  "wall_time": time.monotonic() - t0}
        for name, corpus in (acc_tasks or {}).items():
            record[f"val_acc_{name}"] = token_accuracy(
                m, corpus, vocab, overrides=overrides)
        for name, corpus in (bleu_tasks or {}).items():
            record[f"val_bleu_{name}"] = corpus_bleu(
                m, corpus, vocab, overrides=overrides)
        run.append(step, **record)
        return val_loss

    stop = False
    for epoch in range(cfg.max_epochs):
        if stop:
            break
        for batch in batch_iter(train_corpus, vocab, cfg.batch_size,
                                m.cfg.max_len, shuffle_seed=cfg.seed + epoch):
            for p in m.params.values():
                p.zero_grad()
            if adapter is not None:
                for p in adapter.trainable():
                    p.zero_grad()
            task_loss = m.loss(batch.src, batch.tgt, overrides=overrides,
                               rng=dropout_rng)
            if use_penalty:
                penalty = reg_penalty(adapter, history, reg)
                total = regularized_step_loss(task_loss, penalty)
                penalty_val = penalty.item()
            else:
                total = task_loss
                penalty_val = 0.0
            loss_val = task_loss.item()
            if not math.isfinite(loss_val + penalty_val):
                raise DivergenceError(
                    f"non-finite loss at step {step}: task {loss_val}, "
                    f"penalty {penalty_val}", history=run)
            total.backward()
            clip_gradients(params, cfg.clip_norm)
            warm = (min(1.0, (step + 1) / cfg.warmup_steps)
                    if cfg.warmup_steps else 1.0)
            opt.step(lr_scale=warm)
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                val = evaluate(loss_val, penalty_val)
                if val < best_val:
                    best_val, best_state, evals_since_best = val, snapshot(), 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= cfg.patience:
                        stop = True
                        break
        if cfg.eval_every is None and not stop:
            val = evaluate(loss_val, penalty_val)
            if val < best_val:
                best_val, best_state, evals_since_best = val, snapshot(), 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    stop = True

    if best_state is not None:
        restore(best_state)
    return run
