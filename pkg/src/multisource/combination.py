"""Ways of wiring several encoders into one decoder cross-attention block.

All sub-layers are post-norm: ``LN(x + f(x))``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .attention import MultiHeadParams, multi_head_attention
from .tensor import Tensor, add, concat, layer_norm, reshape


class ConfigurationError(ValueError):
    pass


class Strategy(str, enum.Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"
    FLAT = "flat"
    HIERARCHICAL = "hierarchical"


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


@dataclass
class EncoderState:
    name: str
    states: Tensor  # [..., len, d]
    mask: np.ndarray | None = None  # broadcastable to [..., q, len]

    def key_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones((1, self.states.shape[-2]), dtype=bool)
        return np.asarray(self.mask, dtype=bool)


@dataclass
class EncoderBundle:
    entries: list[EncoderState]

    def __post_init__(self):
        if not self.entries:
            raise ConfigurationError("EncoderBundle needs at least one encoder")
        dims = {e.states.shape[-1] for e in self.entries}
        if len(dims) != 1:
            raise ConfigurationError(f"encoder state widths differ: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class CrossAttentionRecord:
    encoder_weights: list[list[np.ndarray]]  # [encoder][head] -> [..., q, len_i]
    context_weights: list[np.ndarray] | None = None  # [head] -> [..., q, n]


@dataclass
class CrossBlockParams:
    """Parameters of one decoder layer's cross-attention block.

    serial: n attentions, n norms; parallel: n attentions, 1 norm;
    flat: 1 attention, 1 norm; hierarchical: n attentions + outer, 1 norm.
    """
    attentions: list[MultiHeadParams]
    norms: list[LayerNormParams]
    outer: MultiHeadParams | None = None


def cross_attention_sublayer(x: Tensor, enc: EncoderState, mha: MultiHeadParams,
                             norm: LayerNormParams):
    """The single-source building block: LN(x + attn(x, states, states))."""
    att = multi_head_attention(mha, x, enc.states, enc.states, enc.key_mask())
    return norm(add(x, att.context)), att.weights


def _check_count(got: int, want: int, what: str) -> None:
    if got != want:
        raise ConfigurationError(f"{what}: expected {want} parameter sets, got {got}")


def serial_combine(x: Tensor, encoders: EncoderBundle,
                   params: list[tuple[MultiHeadParams, LayerNormParams]]):
    _check_count(len(params), len(encoders), "serial")
    weights = []
    y = x
    for enc, (mha, norm) in zip(encoders, params):
        y, w = cross_attention_sublayer(y, enc, mha, norm)
        weights.append(w)
    return y, CrossAttentionRecord(weights)


def parallel_combine(x: Tensor, encoders: EncoderBundle, params: list[MultiHeadParams],
                     norm: LayerNormParams):
    _check_count(len(params), len(encoders), "parallel")
    total = None
    weights = []
    for enc, mha in zip(encoders, params):
        att = multi_head_attention(mha, x, enc.states, enc.states, enc.key_mask())
        total = att.context if total is None else add(total, att.context)
        weights.append(att.weights)
    return norm(add(x, total)), CrossAttentionRecord(weights)


def _flat_mask(encoders: EncoderBundle) -> np.ndarray:
    masks = [e.key_mask() for e in encoders]
    lead = np.broadcast_shapes(*(m.shape[:-1] for m in masks))
    return np.concatenate([np.broadcast_to(m, lead + m.shape[-1:]) for m in masks], axis=-1)


def flat_combine(x: Tensor, encoders: EncoderBundle, params: MultiHeadParams,
                 norm: LayerNormParams):
    states = concat([e.states for e in encoders], axis=-2)
    att = multi_head_attention(params, x, states, states, _flat_mask(encoders))
    bounds = np.cumsum([0] + [e.states.shape[-2] for e in encoders])
    weights = [[w[..., lo:hi] for w in att.weights] for lo, hi in zip(bounds[:-1], bounds[1:])]
    return norm(add(x, att.context)), CrossAttentionRecord(weights)


def hierarchical_combine(x: Tensor, encoders: EncoderBundle, inner: list[MultiHeadParams],
                         outer: MultiHeadParams, norm: LayerNormParams):
    """Inner attention per encoder, then an outer attention per query position
    whose keys/values are that position's n inner contexts."""
    _check_count(len(inner), len(encoders), "hierarchical")
    d = x.shape[-1]
    contexts = []
    weights = []
    for enc, mha in zip(encoders, inner):
        att = multi_head_attention(mha, x, enc.states, enc.states, enc.key_mask())
        contexts.append(reshape(att.context, (-1, 1, d)))
        weights.append(att.weights)
    keys = concat(contexts, axis=1)  # [positions, n, d]
    queries = reshape(x, (-1, 1, d))
    att = multi_head_attention(outer, queries, keys, keys)
    context = reshape(att.context, x.shape)
    ctx_weights = [w.reshape(x.shape[:-1] + (len(encoders),)) for w in att.weights]
    return norm(add(x, context)), CrossAttentionRecord(weights, ctx_weights)


def combine(strategy: Strategy, x: Tensor, encoders: EncoderBundle, block: CrossBlockParams):
    strategy = Strategy(strategy)
    if strategy is Strategy.SERIAL:
        return serial_combine(x, encoders, list(zip(block.attentions, block.norms)))
    if strategy is Strategy.PARALLEL:
        return parallel_combine(x, encoders, block.attentions, block.norms[0])
    if strategy is Strategy.FLAT:
        return flat_combine(x, encoders, block.attentions[0], block.norms[0])
    return hierarchical_combine(x, encoders, block.attentions, block.outer, block.norms[0])


def combined_weights(record: CrossAttentionRecord, head: int | None = None) -> list[np.ndarray]:
    """Per-encoder weight matrices for display.

    ``head=None`` averages over heads.  For hierarchical records each encoder
    block is scaled by its attention-over-contexts weight (head i of the inner
    attention pairs with head i of the outer one).
    """
    def pick(ws):
        return np.mean(ws, axis=0) if head is None else ws[head]

    blocks = [pick(ws) for ws in record.encoder_weights]
    if record.context_weights is not None:
        ctx = pick(record.context_weights)
        blocks = [b * ctx[..., i:i + 1] for i, b in enumerate(blocks)]
    return blocks
