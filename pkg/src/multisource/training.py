"""Noam schedule, Adam, and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import MultiSourceTransformer, SourceInput, decoder_inputs, pad_sequences
from .tensor import Prng, backward, cross_entropy

log = logging.getLogger(__name__)


def noam_lr(step: int, d: int, warmup: int, factor: float) -> float:
    if step < 1:
        raise ValueError("noam_lr: step must be >= 1")
    return factor * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update over ``params`` (an iterable of
    :class:`Parameter`) using their accumulated ``.tensor.grad``.

    Parameters without a gradient count as zero-gradient.  ``weight_decay``
    adds an L2 term ``weight_decay * theta`` to each gradient.
    """
    params = list(params)
    for p in params:
        g = p.tensor.grad
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        data = p.tensor.data
        g = p.tensor.grad if p.tensor.grad is not None else np.zeros_like(data)
        if weight_decay:
            g = g + weight_decay * data
        m = state.m.setdefault(p.name, np.zeros_like(data))
        v = state.v.setdefault(p.name, np.zeros_like(data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most
    ``max_norm``; returns the norm before clipping."""
    grads = [p.tensor.grad for p in params if p.trainable and p.tensor.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


@dataclass
class TrainConfig:
    factor: float = 1.0
    warmup: int = 400
    batch_size: int = 32
    max_steps: int = 3000
    eval_interval: int = 250
    seed: int = 0
    dropout: float = 0.0
    # regularizers, all off by default
    clip_norm: float = 0.0
    label_smoothing: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.factor <= 0:
            raise ValueError("factor must be positive")
        if self.clip_norm < 0 or self.weight_decay < 0 or not 0 <= self.label_smoothing < 1:
            raise ValueError("clip_norm and weight_decay must be >= 0, label_smoothing in [0, 1)")


@dataclass
class Batch:
    sources: list[SourceInput]
    inputs: np.ndarray
    labels: np.ndarray
    keep: np.ndarray

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def make_batch(examples, source_kinds) -> Batch:
    """``examples`` are :class:`~multisource.tasks.ParallelExample` objects."""
    sources = []
    for i, kind in enumerate(source_kinds):
        if kind == "features":
            sources.append(SourceInput(np.stack([ex.sources[i] for ex in examples])))
        else:
            ids, lengths = pad_sequences([ex.sources[i] for ex in examples])
            sources.append(SourceInput(ids, lengths))
    inputs, labels, keep = decoder_inputs([ex.target for ex in examples])
    return Batch(sources, inputs, labels, keep)


def batches(examples, batch_size: int, source_kinds, rng: Prng):
    """One epoch: shuffle, bucket by total source length, cut into batches,
    then shuffle the batch order."""
    order = rng.permutation(len(examples))

    def src_len(i):
        return sum(len(s) for s in examples[i].sources)

    chunk = batch_size * 8
    buckets = []
    for lo in range(0, len(order), chunk):
        buckets.extend(sorted(order[lo:lo + chunk], key=src_len))
    groups = [buckets[lo:lo + batch_size] for lo in range(0, len(buckets), batch_size)]
    rng.shuffle(groups)
    for g in groups:
        yield make_batch([examples[i] for i in g], source_kinds)


def forward_loss(model: MultiSourceTransformer, batch: Batch, train: bool = True,
                 smoothing: float = 0.0):
    bundle = model.encode(batch.sources, train=train)
    logits, _ = model.decoder_forward(batch.inputs, bundle, train=train)
    return logits, cross_entropy(logits, batch.labels, batch.keep, smoothing)


def train_step(model: MultiSourceTransformer, batch: Batch, opt: OptimizerState,
               cfg: TrainConfig) -> float:
    logits, loss = forward_loss(model, batch, train=True, smoothing=cfg.label_smoothing)
    backward(loss)
    params = model.trainable()
    if cfg.clip_norm:
        clip_grad_norm(params, cfg.clip_norm)
    lr = noam_lr(opt.t + 1, model.config.d, cfg.warmup, cfg.factor)
    adam_step(params, opt, lr, cfg.weight_decay)
    model.zero_grad()
    return float(loss.data[0])


def batch_token_accuracy(logits, batch: Batch) -> float:
    pred = logits.data.argmax(axis=-1)
    return 100.0 * float(((pred == batch.labels) & batch.keep).sum()) / float(batch.keep.sum())


def train(model: MultiSourceTransformer, examples, cfg: TrainConfig, evaluate=None,
          log_file=None, clock=time.perf_counter):
    """Train for ``cfg.max_steps`` steps.

    ``evaluate(model) -> token accuracy`` runs every ``eval_interval`` steps;
    without it the teacher-forced accuracy of the current batch is logged.
    Log lines: step, loss, lr, token_accuracy, seconds (tab-separated).
    Returns the per-step loss list.
    """
    model.config.dropout = cfg.dropout
    rng = Prng(cfg.seed)
    opt = OptimizerState()
    losses = []
    start = clock()
    step = 0
    while step < cfg.max_steps:
        for batch in batches(examples, cfg.batch_size, model.config.source_kinds, rng):
            step += 1
            losses.append(train_step(model, batch, opt, cfg))
            if step % cfg.eval_interval == 0 or step == cfg.max_steps:
                if evaluate is not None:
                    acc = evaluate(model)
                else:
                    from .tensor import no_grad
                    with no_grad():
                        logits, _ = forward_loss(model, batch, train=False)
                    acc = batch_token_accuracy(logits, batch)
                line = (f"{step}\t{losses[-1]:.6f}\t{noam_lr(step, model.config.d, cfg.warmup, cfg.factor):.6e}"
                        f"\t{acc:.2f}\t{clock() - start:.1f}")
                log.info(line)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
            if step >= cfg.max_steps:
                break
    return losses
