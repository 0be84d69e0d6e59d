"""Greedy and beam-search decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import BOS, EOS, MultiSourceTransformer, SourceInput, pad_sequences
from .tensor import no_grad


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def batch_sources(model: MultiSourceTransformer, examples) -> list[SourceInput]:
    out = []
    for i, kind in enumerate(model.config.source_kinds):
        if kind == "features":
            out.append(SourceInput(np.stack([np.asarray(ex.sources[i]) for ex in examples])))
        else:
            ids, lengths = pad_sequences([ex.sources[i] for ex in examples])
            out.append(SourceInput(ids, lengths))
    return out


def model_step_fn(model: MultiSourceTransformer, sources: list[SourceInput]):
    """Next-token log-probabilities for a list of prefixes, all sharing the
    one encoded input in ``sources`` (batch size 1)."""
    with no_grad():
        bundle = model.encode(sources)

    def step(prefixes):
        inputs = np.array([[BOS] + list(p) for p in prefixes], dtype=np.int64)
        with no_grad():
            logits, _ = model.decoder_forward(inputs, bundle)
        return log_softmax(logits.data[:, -1, :])

    return step


def greedy_core(step, max_len: int) -> list[int]:
    out: list[int] = []
    for _ in range(max_len):
        token = int(np.argmax(step([out])[0]))
        if token == EOS:
            break
        out.append(token)
    return out


def greedy_decode(model: MultiSourceTransformer, sources: list[SourceInput], max_len: int):
    """Decode one example (batch size 1).  Returns (tokens, layer records)."""
    if max_len < 1:
        raise ValueError("greedy_decode: max_len must be >= 1")
    tokens = greedy_core(model_step_fn(model, sources), max_len)
    return tokens, attention_records(model, sources, tokens)


def greedy_decode_batch(model: MultiSourceTransformer, sources: list[SourceInput],
                        max_len: int) -> list[list[int]]:
    """Greedy decoding of a whole batch at once (no records)."""
    with no_grad():
        bundle = model.encode(sources)
        batch = bundle.entries[0].states.shape[0]
        inputs = np.full((batch, 1), BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        for _ in range(max_len):
            logits, _ = model.decoder_forward(inputs, bundle)
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            nxt = np.where(done, EOS, nxt)
            inputs = np.concatenate([inputs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in inputs[:, 1:].tolist():
        out.append(row[:row.index(EOS)] if EOS in row else row)
    return out


def decode_examples(model: MultiSourceTransformer, examples, max_len: int | None = None,
                    batch_size: int = 100) -> list[list[int]]:
    out = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        limit = max_len or min(model.config.max_len, max(len(ex.target) for ex in chunk) + 4)
        out.extend(greedy_decode_batch(model, batch_sources(model, chunk), limit))
    return out


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False

    @property
    def sequence(self) -> tuple:
        return self.tokens + ((EOS,) if self.finished else ())

    def normalized(self, alpha: float) -> float:
        length = len(self.tokens) + (1 if self.finished else 0)
        return self.logprob / length_penalty(max(length, 1), alpha)


def _rank(hyps, key):
    return sorted(hyps, key=lambda h: (-key(h), h.sequence))


def beam_core(step, width: int, alpha: float, max_len: int) -> Hypothesis:
    """Beam search over a step function mapping prefixes to log-probs [n, V].

    Each step keeps the ``width`` best extensions by raw log-prob (ties by
    token ids); those ending in EOS leave the beam.  Search stops once
    ``width`` finished hypotheses beat the best normalized score any live
    hypothesis could still reach, or after ``max_len`` steps.
    """
    if width < 1:
        raise ValueError("beam_search: width must be >= 1")
    if alpha < 0:
        raise ValueError("beam_search: alpha must be >= 0")
    live = [Hypothesis((), 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logp = step([h.tokens for h in live])
        candidates = []
        for h, row in zip(live, logp):
            for token, lp in enumerate(row):
                if lp == -math.inf:
                    continue
                if token == EOS:
                    candidates.append(Hypothesis(h.tokens, h.logprob + lp, True))
                else:
                    candidates.append(Hypothesis(h.tokens + (token,), h.logprob + lp))
        candidates = sorted(candidates, key=lambda h: (-h.logprob, h.sequence))[:width]
        finished.extend(h for h in candidates if h.finished)
        live = [h for h in candidates if not h.finished]
        if not live:
            break
        bound = max(h.logprob for h in live) / length_penalty(max_len, alpha)
        if sum(f.normalized(alpha) > bound for f in finished) >= width:
            break
    pool = finished or live
    return _rank(pool, lambda h: h.normalized(alpha))[0]


def beam_search(model: MultiSourceTransformer, sources: list[SourceInput], width: int = 10,
                alpha: float = 1.0, max_len: int = 50):
    """Returns (tokens, normalized score) for one example (batch size 1)."""
    best = beam_core(model_step_fn(model, sources), width, alpha, max_len)
    return list(best.tokens), best.normalized(alpha)


def attention_records(model: MultiSourceTransformer, sources: list[SourceInput], tokens):
    """Re-run the decoder over the final output to collect attention weights."""
    inputs = np.array([[BOS] + list(tokens)], dtype=np.int64)
    with no_grad():
        bundle = model.encode(sources)
        _, records = model.decoder_forward(inputs, bundle)
    return records
