"""Synthetic multi-source tasks, metrics, dataset files, adversarial evaluation."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import RESERVED, Vocabulary
from .tensor import Prng

BLANK = len(RESERVED)  # complementary_copy hides positions with this token
AMB = len(RESERVED)  # feature_disambiguation placeholder token

KINDS = ("complementary_copy", "feature_disambiguation")


@dataclass
class ParallelExample:
    sources: list  # token id lists, or a [rows, feature_dim] array for feature sources
    target: list[int]
    focus: tuple = ()  # target positions of special interest (the AMB slot)


@dataclass
class TaskSpec:
    kind: str = "complementary_copy"
    vocab_size: int = 32
    min_len: int = 8
    max_len: int = 12
    n_examples: int = 2000
    seed: int = 0
    # complementary_copy: extra copies of source A, each token replaced by a
    # random content token with probability redundant_noise
    redundant: int = 0
    redundant_noise: float = 0.0
    # feature_disambiguation
    classes: int = 4
    feature_dim: int = 8
    feature_rows: int = 1
    noise: float = 0.1

    @property
    def n_sources(self) -> int:
        if self.kind == "complementary_copy":
            return 2 + self.redundant
        return 2

    @property
    def source_kinds(self) -> tuple:
        if self.kind == "feature_disambiguation":
            return ("text", "features")
        return ("text",) * self.n_sources

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        if self.kind == "complementary_copy":
            if self.vocab_size < 8:
                raise ValueError("complementary_copy needs vocab_size >= 8")
            if self.redundant < 0 or not 0.0 <= self.redundant_noise <= 1.0:
                raise ValueError("bad redundant-source settings")
        else:
            if self.classes < 2:
                raise ValueError("feature_disambiguation needs at least 2 classes")
            if self.feature_dim < self.classes:
                raise ValueError("feature_dim must be >= classes")
            if self.vocab_size < len(RESERVED) + 1 + self.classes + 2:
                raise ValueError("vocab_size too small for the class tokens")

    def content_ids(self) -> range:
        """Ids of ordinary tokens (everything after reserved and special ones)."""
        if self.kind == "complementary_copy":
            return range(BLANK + 1, self.vocab_size)
        return range(AMB + 1 + self.classes, self.vocab_size)

    def vocabulary(self) -> Vocabulary:
        vocab = Vocabulary()
        if self.kind == "complementary_copy":
            vocab.add("<blank>")
        else:
            vocab.add("<amb>")
            for c in range(self.classes):
                vocab.add(f"c{c}")
        for i in self.content_ids():
            vocab.add(f"w{i}")
        return vocab


def _random_lengths(spec: TaskSpec, rng: Prng, n: int) -> np.ndarray:
    return spec.min_len + rng.randint(spec.max_len - spec.min_len + 1, (n,))


def gen_complementary_copy(spec: TaskSpec) -> list[ParallelExample]:
    """Source A keeps even positions, source B odd ones; the rest are BLANK."""
    spec.validate()
    if spec.kind != "complementary_copy":
        raise ValueError(f"spec kind is {spec.kind!r}")
    rng = Prng(spec.seed)
    content = np.array(spec.content_ids())
    out = []
    for length in _random_lengths(spec, rng, spec.n_examples):
        target = content[rng.randint(len(content), (int(length),))].tolist()
        a = [t if i % 2 == 0 else BLANK for i, t in enumerate(target)]
        b = [t if i % 2 == 1 else BLANK for i, t in enumerate(target)]
        sources = [a, b]
        for _ in range(spec.redundant):
            flip = rng.random((len(a),)) < spec.redundant_noise
            noise = content[rng.randint(len(content), (len(a),))]
            sources.append([int(n) if f else t for t, f, n in zip(a, flip, noise)])
        out.append(ParallelExample(sources, target))
    return out


def gen_feature_disambiguation(spec: TaskSpec) -> list[ParallelExample]:
    """Text with one AMB token plus a noisy one-hot class feature; the target
    renders AMB as the class token and copies everything else."""
    spec.validate()
    if spec.kind != "feature_disambiguation":
        raise ValueError(f"spec kind is {spec.kind!r}")
    rng = Prng(spec.seed)
    content = np.array(spec.content_ids())
    out = []
    for length in _random_lengths(spec, rng, spec.n_examples):
        length = int(length)
        text = content[rng.randint(len(content), (length,))].tolist()
        slot = rng.below(length)
        cls = rng.below(spec.classes)
        text[slot] = AMB
        target = list(text)
        target[slot] = AMB + 1 + cls
        features = rng.normal((spec.feature_rows, spec.feature_dim), spec.noise)
        features[:, cls] += 1.0
        out.append(ParallelExample([text, features], target, (slot,)))
    return out


def generate(spec: TaskSpec) -> list[ParallelExample]:
    if spec.kind == "complementary_copy":
        return gen_complementary_copy(spec)
    return gen_feature_disambiguation(spec)


# ------------------------------------------------------------------ metrics

def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU-4 in percent.  Zero higher-order match counts use
    (matches + 1) / (total + 1)."""
    if len(hypotheses) != len(references):
        raise ValueError("corpus_bleu: hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("corpus_bleu: no hypotheses")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if matches[0] == 0 or hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if n > 0 and matches[n] == 0:
            log_p += math.log((matches[n] + 1) / (totals[n] + 1))
        else:
            log_p += math.log(matches[n] / totals[n])
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def token_accuracy(hypotheses, references) -> float:
    """Position-wise matches over the longer of each pair, in percent."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        hits += sum(h == r for h, r in zip(hyp, ref))
        total += max(len(hyp), len(ref))
    return 100.0 if total == 0 else 100.0 * hits / total


def sequence_accuracy(hypotheses, references) -> float:
    if not references:
        return 100.0
    return 100.0 * sum(list(h) == list(r) for h, r in zip(hypotheses, references)) / len(references)


def position_accuracy(hypotheses, references, positions) -> float:
    """Accuracy restricted to the given target positions of each example
    (a missing hypothesis position counts as wrong)."""
    hits = total = 0
    for hyp, ref, pos in zip(hypotheses, references, positions):
        for p in pos:
            if p < len(ref):
                total += 1
                hits += p < len(hyp) and hyp[p] == ref[p]
    return 100.0 if total == 0 else 100.0 * hits / total


def odd_positions(references):
    return [tuple(range(1, len(r), 2)) for r in references]


def even_positions(references):
    return [tuple(range(0, len(r), 2)) for r in references]


@dataclass
class Scores:
    bleu: float
    token_accuracy: float
    sequence_accuracy: float
    focus_accuracy: float | None = None

    @classmethod
    def compute(cls, hyps, examples) -> "Scores":
        refs = [ex.target for ex in examples]
        focus = None
        if any(ex.focus for ex in examples):
            focus = position_accuracy(hyps, refs, [ex.focus for ex in examples])
        return cls(corpus_bleu(hyps, refs), token_accuracy(hyps, refs),
                   sequence_accuracy(hyps, refs), focus)


@dataclass
class EvalReport:
    clean: Scores
    adversarial: Scores
    corrupted_source: int
    permutation: list[int]
    clean_outputs: list = field(repr=False, default_factory=list)
    adversarial_outputs: list = field(repr=False, default_factory=list)

    @property
    def deltas(self) -> dict[str, float]:
        out = {
            "bleu": self.clean.bleu - self.adversarial.bleu,
            "token_accuracy": self.clean.token_accuracy - self.adversarial.token_accuracy,
            "sequence_accuracy": self.clean.sequence_accuracy - self.adversarial.sequence_accuracy,
        }
        if self.clean.focus_accuracy is not None:
            out["focus_accuracy"] = self.clean.focus_accuracy - self.adversarial.focus_accuracy
        return out


def corrupt(examples, source_index: int, permutation) -> list[ParallelExample]:
    """New examples where source ``source_index`` of example j comes from
    example ``permutation[j]``."""
    out = []
    for ex, j in zip(examples, permutation):
        sources = list(ex.sources)
        sources[source_index] = examples[j].sources[source_index]
        out.append(ParallelExample(sources, ex.target, ex.focus))
    return out


def adversarial_eval(model, examples, corrupt_source_index: int, seed: int = 0,
                     decode=None, permutation=None) -> EvalReport:
    """Decode clean and with one source swapped via a seeded derangement.

    ``decode(model, examples) -> list of token lists`` defaults to batched
    greedy decoding; ``permutation`` overrides the derangement.
    """
    from .decoding import decode_examples

    if not 0 <= corrupt_source_index < model.config.n_sources:
        raise ValueError(f"source index {corrupt_source_index} out of range")
    if len(examples) < 2:
        raise ValueError("adversarial_eval needs at least two examples")
    decode = decode or decode_examples
    if permutation is None:
        permutation = Prng(seed).derangement(len(examples))
    clean_out = decode(model, examples)
    adv_out = decode(model, corrupt(examples, corrupt_source_index, permutation))
    return EvalReport(Scores.compute(clean_out, examples), Scores.compute(adv_out, examples),
                      corrupt_source_index, list(permutation), clean_out, adv_out)


# ------------------------------------------------------------- dataset files

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(path, examples, vocab: Vocabulary) -> None:
    """One line per example: text sources then target, tab-separated.
    Feature sources go to ``<path>.features``, one flattened row per example."""
    path = Path(path)
    lines, rows = [], []
    for ex in examples:
        cols = []
        for src in ex.sources:
            if isinstance(src, np.ndarray):
                rows.append(" ".join(_fmt(v) for v in src.reshape(-1)))
            else:
                cols.append(" ".join(vocab.decode(src)))
        cols.append(" ".join(vocab.decode(ex.target)))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if rows:
        Path(str(path) + ".features").write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_dataset(path, vocab: Vocabulary, source_kinds, feature_dim: int = 0,
                 with_target: bool = True) -> list[ParallelExample]:
    path = Path(path)
    lines = [l for l in path.read_text(encoding="utf-8").split("\n") if l]
    feature_rows = None
    if "features" in source_kinds:
        feature_rows = [l for l in Path(str(path) + ".features").read_text(encoding="utf-8").split("\n") if l]
    n_text = sum(k == "text" for k in source_kinds)
    out = []
    for r, line in enumerate(lines):
        cols = line.split("\t")
        expect = n_text + (1 if with_target else 0)
        if len(cols) < expect:
            raise ValueError(f"{path}:{r + 1}: expected {expect} columns, got {len(cols)}")
        text_cols = iter(cols[:n_text])
        sources = []
        for kind in source_kinds:
            if kind == "features":
                vals = np.array([float(v) for v in feature_rows[r].split()])
                sources.append(vals.reshape(-1, feature_dim))
            else:
                sources.append(vocab.encode(next(text_cols).split()))
        target = vocab.encode(cols[n_text].split()) if with_target and len(cols) > n_text else []
        focus = ()
        if "features" in source_kinds and with_target:
            focus = tuple(i for i, t in enumerate(sources[0]) if t == AMB)
        out.append(ParallelExample(sources, target, focus))
    return out
