"""Scaled dot-product and multi-head attention.

Masks are plain boolean numpy arrays (True = may attend) broadcastable to the
``[..., queries, keys]`` score shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, matmul, scale, softmax_rows, transpose


@dataclass
class AttentionOutput:
    context: Tensor
    weights: list[np.ndarray]  # one [..., q, k] array per head


@dataclass
class MultiHeadParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: list[Tensor]

    @property
    def heads(self) -> int:
        return len(self.wq)

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[0]

    @property
    def d_head(self) -> int:
        return self.wq[0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, *self.wo]


def causal_mask(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("causal_mask: length must be at least 1")
    return np.tril(np.ones((n, n), dtype=bool))


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """Key mask of shape [batch, 1, max_len]; broadcasts over any query count."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if (lengths < 1).any() or (lengths > max_len).any():
        raise ValueError(f"padding_mask: lengths {lengths.tolist()} outside [1, {max_len}]")
    return (np.arange(max_len)[None, :] < lengths[:, None])[:, None, :]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> AttentionOutput:
    """softmax(Q K^T / sqrt(width)) V, where width is the last dim of Q and K."""
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = softmax_rows(scores, mask)
    return AttentionOutput(matmul(weights, v), [weights.data])


def multi_head_attention(p: MultiHeadParams, q: Tensor, k: Tensor, v: Tensor,
                         mask=None) -> AttentionOutput:
    """Sum over heads of attn(Q Wq_i, K Wk_i, V Wv_i) Wo_i."""
    context = None
    weights = []
    for wq, wk, wv, wo in zip(p.wq, p.wk, p.wv, p.wo):
        head = scaled_dot_attention(matmul(q, wq), matmul(k, wk), matmul(v, wv), mask)
        projected = matmul(head.context, wo)
        context = projected if context is None else add(context, projected)
        weights.extend(head.weights)
    return AttentionOutput(context, weights)


def init_multi_head(prefix: str, d: int, heads: int, rng, d_head: int | None = None):
    """Glorot-uniform projections named ``{prefix}.wq.head{i}`` etc.

    Returns ``(MultiHeadParams, [(name, tensor), ...])``.
    """
    d_head = d_head or d // heads
    named = []
    slots = {"wq": [], "wk": [], "wv": [], "wo": []}
    for kind in ("wq", "wk", "wv", "wo"):
        for i in range(heads):
            shape = (d_head, d) if kind == "wo" else (d, d_head)
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            t = Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)
            slots[kind].append(t)
            named.append((f"{prefix}.{kind}.head{i}", t))
    return MultiHeadParams(**slots), named
