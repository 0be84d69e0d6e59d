"""Multi-source Transformer: text encoders, a feature pseudo-encoder, and a
decoder whose cross-attention block follows one combination strategy."""
from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import MultiHeadParams, causal_mask, init_multi_head, multi_head_attention, padding_mask
from .combination import (
    ConfigurationError,
    CrossAttentionRecord,
    CrossBlockParams,
    EncoderBundle,
    EncoderState,
    LayerNormParams,
    Strategy,
    combine,
)
from .tensor import (
    Parameter,
    Prng,
    Tensor,
    add,
    dropout,
    embedding,
    matmul,
    relu,
    scale,
    transpose,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class CheckpointFormatError(ValueError):
    pass


class CheckpointCorruptError(ValueError):
    pass


class CheckpointSchemaError(KeyError):
    pass


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos: list[str] = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    n_sources: int = 2
    strategy: Strategy = Strategy.SERIAL
    vocab_size: int = 32
    max_len: int = 64
    dropout: float = 0.0
    seed: int = 0
    # "text" or "features" per source
    source_kinds: tuple = ()
    feature_dim: int = 0
    shared_vocab_embeddings: bool = False

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if not self.source_kinds:
            self.source_kinds = ("text",) * self.n_sources
        self.source_kinds = tuple(self.source_kinds)
        if len(self.source_kinds) != self.n_sources:
            raise ConfigurationError(
                f"source_kinds has {len(self.source_kinds)} entries for {self.n_sources} sources")
        if any(k not in ("text", "features") for k in self.source_kinds):
            raise ConfigurationError(f"unknown source kind in {self.source_kinds}")
        if "features" in self.source_kinds and self.feature_dim < 1:
            raise ConfigurationError("feature sources need feature_dim >= 1")
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigurationError(f"d={self.d} must be even for sinusoidal positions")
        if min(self.heads, self.d_ff, self.dec_layers, self.n_sources, self.max_len) < 1:
            raise ConfigurationError("heads, d_ff, dec_layers, n_sources, max_len must be >= 1")
        if self.enc_layers < 0:
            raise ConfigurationError("enc_layers must be >= 0")
        if self.vocab_size <= UNK:
            raise ConfigurationError("vocab_size must exceed the reserved ids")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Strategy):
                v = v.value
            elif isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            default = f.default
            if isinstance(default, bool):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            elif isinstance(default, float):
                kwargs[f.name] = float(raw)
            elif isinstance(default, tuple):
                kwargs[f.name] = tuple(s for s in raw.split(",") if s)
            else:
                kwargs[f.name] = raw
        unknown = set(items) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
        return cls(**kwargs)


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigurationError(f"sinusoidal_positions: d={d} must be even")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((max_len, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates)
    return table


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(relu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


@dataclass
class EncoderLayer:
    attention: MultiHeadParams
    attention_norm: LayerNormParams
    ff: FeedForward
    ff_norm: LayerNormParams


@dataclass
class DecoderLayer:
    self_attention: MultiHeadParams
    self_norm: LayerNormParams
    cross: CrossBlockParams
    ff: FeedForward
    ff_norm: LayerNormParams


@dataclass
class LayerRecord:
    self_weights: list[np.ndarray]
    cross: CrossAttentionRecord


@dataclass
class SourceInput:
    """One source for a batch: token ids [B, L] (PAD-padded) or features [B, k, f]."""
    data: np.ndarray
    lengths: np.ndarray | None = None


class MultiSourceTransformer:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self.positions = sinusoidal_positions(config.max_len, config.d)
        self.dropout_rng = Prng(config.seed ^ 0x5EED)
        rng = Prng(config.seed)
        cfg = config
        self.dec_embed = self._embedding("dec.embed", rng)
        self.encoders = []
        for i, kind in enumerate(cfg.source_kinds):
            prefix = f"enc{i}"
            if kind == "features":
                self.encoders.append({"kind": kind, "proj": self._glorot(f"{prefix}.proj", (cfg.feature_dim, cfg.d), rng)})
                continue
            embed = self.dec_embed if cfg.shared_vocab_embeddings else self._embedding(f"{prefix}.embed", rng)
            layers = [self._encoder_layer(f"{prefix}.layer{l}", rng) for l in range(cfg.enc_layers)]
            self.encoders.append({"kind": kind, "embed": embed, "layers": layers})
        self.decoder_layers = [self._decoder_layer(f"dec.layer{l}", rng) for l in range(cfg.dec_layers)]

    # ------------------------------------------------------------ construction

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, t)
        return t

    def _glorot(self, name, shape, rng) -> Tensor:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return self._register(name, Tensor(rng.uniform(-limit, limit, shape), True))

    def _embedding(self, name, rng) -> Tensor:
        cfg = self.config
        return self._register(name, Tensor(rng.normal((cfg.vocab_size, cfg.d), cfg.d ** -0.5), True))

    def _mha(self, prefix, rng) -> MultiHeadParams:
        mha, named = init_multi_head(prefix, self.config.d, self.config.heads, rng)
        for name, t in named:
            self._register(name, t)
        return mha

    def _norm(self, prefix) -> LayerNormParams:
        d = self.config.d
        return LayerNormParams(self._register(f"{prefix}.gamma", Tensor(np.ones(d), True)),
                               self._register(f"{prefix}.beta", Tensor(np.zeros(d), True)))

    def _ff(self, prefix, rng) -> FeedForward:
        d, d_ff = self.config.d, self.config.d_ff
        return FeedForward(self._glorot(f"{prefix}.w1", (d, d_ff), rng),
                           self._register(f"{prefix}.b1", Tensor(np.zeros(d_ff), True)),
                           self._glorot(f"{prefix}.w2", (d_ff, d), rng),
                           self._register(f"{prefix}.b2", Tensor(np.zeros(d), True)))

    def _encoder_layer(self, prefix, rng) -> EncoderLayer:
        return EncoderLayer(self._mha(f"{prefix}.self", rng), self._norm(f"{prefix}.self_norm"),
                            self._ff(f"{prefix}.ff", rng), self._norm(f"{prefix}.ff_norm"))

    def _decoder_layer(self, prefix, rng) -> DecoderLayer:
        cfg = self.config
        n = cfg.n_sources
        strategy = cfg.strategy
        n_att = 1 if strategy is Strategy.FLAT else n
        n_norm = n if strategy is Strategy.SERIAL else 1
        self_att = self._mha(f"{prefix}.self", rng)
        self_norm = self._norm(f"{prefix}.self_norm")
        cross = CrossBlockParams(
            [self._mha(f"{prefix}.cross{i}", rng) for i in range(n_att)],
            [self._norm(f"{prefix}.cross_norm{i}") for i in range(n_norm)],
            self._mha(f"{prefix}.outer", rng) if strategy is Strategy.HIERARCHICAL else None,
        )
        return DecoderLayer(self_att, self_norm, cross, self._ff(f"{prefix}.ff", rng),
                            self._norm(f"{prefix}.ff_norm"))

    # ------------------------------------------------------------------ state

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def freeze(self, names=None) -> None:
        for name, p in self.params.items():
            if names is None or name in names:
                p.trainable = False
                p.tensor.requires_grad = False

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise CheckpointSchemaError(f"missing parameter {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.tensor.shape:
                raise CheckpointSchemaError(
                    f"parameter {name}: shape {value.shape} != expected {p.tensor.shape}")
            p.tensor.data[...] = value

    # ---------------------------------------------------------------- forward

    def _sublayer(self, x: Tensor, out: Tensor, norm: LayerNormParams, train: bool) -> Tensor:
        if train:
            out = dropout(out, self.config.dropout, self.dropout_rng)
        return norm(add(x, out))

    def _embed(self, table: Tensor, ids: np.ndarray, train: bool) -> Tensor:
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[-1]
        if length > cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        x = add(scale(embedding(table, ids), math.sqrt(cfg.d)), self.positions[:length])
        if train:
            x = dropout(x, cfg.dropout, self.dropout_rng)
        return x

    def encode_sequence(self, source: int, ids, lengths=None, train: bool = False) -> EncoderState:
        enc = self.encoders[source]
        if enc["kind"] != "text":
            raise ConfigurationError(f"source {source} is a feature source")
        ids = np.asarray(ids, dtype=np.int64)
        if lengths is None:
            mask = np.ones((1, ids.shape[-1]), dtype=bool)
        else:
            mask = padding_mask(lengths, ids.shape[-1])
        x = self._embed(enc["embed"], ids, train)
        for layer in enc["layers"]:
            att = multi_head_attention(layer.attention, x, x, x, mask)
            x = self._sublayer(x, att.context, layer.attention_norm, train)
            x = self._sublayer(x, layer.ff(x), layer.ff_norm, train)
        return EncoderState(f"src{source}", x, mask)

    def encode_features(self, source: int, vectors) -> EncoderState:
        enc = self.encoders[source]
        if enc["kind"] != "features":
            raise ConfigurationError(f"source {source} is a text source")
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[-1] != self.config.feature_dim:
            raise ValueError(
                f"feature width {vectors.shape[-1]} != configured {self.config.feature_dim}")
        states = matmul(Tensor(vectors), enc["proj"])
        return EncoderState(f"src{source}", states, None)

    def encode(self, sources: list[SourceInput], train: bool = False) -> EncoderBundle:
        if len(sources) != self.config.n_sources:
            raise ConfigurationError(
                f"expected {self.config.n_sources} sources, got {len(sources)}")
        entries = []
        for i, src in enumerate(sources):
            if self.encoders[i]["kind"] == "features":
                entries.append(self.encode_features(i, src.data))
            else:
                entries.append(self.encode_sequence(i, src.data, src.lengths, train))
        return EncoderBundle(entries)

    def decoder_forward(self, target_in, bundle: EncoderBundle, train: bool = False,
                        cross_fn=None):
        """Logits [..., T, vocab] for decoder inputs (BOS-prefixed) plus one
        :class:`LayerRecord` per layer.

        ``cross_fn(layer_index, x, bundle, block)`` replaces the strategy's
        cross-attention block (used to compare against reference wirings).
        """
        target_in = np.asarray(target_in, dtype=np.int64)
        if target_in.shape[-1] == 0:
            raise ValueError("decoder_forward: empty target")
        mask = causal_mask(target_in.shape[-1])
        x = self._embed(self.dec_embed, target_in, train)
        records = []
        for l, layer in enumerate(self.decoder_layers):
            att = multi_head_attention(layer.self_attention, x, x, x, mask)
            x = self._sublayer(x, att.context, layer.self_norm, train)
            if cross_fn is None:
                x, cross = combine(self.config.strategy, x, bundle, layer.cross)
            else:
                x, cross = cross_fn(l, x, bundle, layer.cross)
            x = self._sublayer(x, layer.ff(x), layer.ff_norm, train)
            records.append(LayerRecord(att.weights, cross))
        logits = matmul(x, transpose(self.dec_embed))
        return logits, records


def decoder_inputs(targets: list[list[int]]):
    """Teacher-forcing arrays: inputs BOS+y, labels y+EOS, keep mask (non-PAD)."""
    width = max(len(t) for t in targets) + 1
    inputs = np.full((len(targets), width), PAD, dtype=np.int64)
    labels = np.full((len(targets), width), PAD, dtype=np.int64)
    for r, t in enumerate(targets):
        inputs[r, 0] = BOS
        inputs[r, 1:len(t) + 1] = t
        labels[r, :len(t)] = t
        labels[r, len(t)] = EOS
    return inputs, labels, labels != PAD


def pad_sequences(seqs: list[list[int]]):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for r, s in enumerate(seqs):
        out[r, :len(s)] = s
    return out, np.array([len(s) for s in seqs], dtype=np.int64)


# ------------------------------------------------------------------ checkpoint

MAGIC = b"MSTX1"


def save_checkpoint(model: MultiSourceTransformer, path) -> None:
    """Layout (little-endian): MAGIC, u32 tensor count, then per tensor
    u32 name length, UTF-8 name, u32 rank, u32 dims, float32 data; then the
    ``key=value`` config lines; then CRC32 of everything before it."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        data = p.tensor.data
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
        buf += data.astype("<f4").tobytes()
    buf += "".join(f"{k}={v}\n" for k, v in model.config.to_items()).encode("utf-8")
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> MultiSourceTransformer:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointCorruptError(f"{path}: file too short")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError(f"{path}: CRC mismatch")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        name = body[off + 4:off + 4 + n].decode("utf-8")
        off += 4 + n
        (rank,) = struct.unpack_from("<I", body, off)
        dims = struct.unpack_from(f"<{rank}I", body, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).astype(np.float64).reshape(dims)
        off += 4 * size
    items = dict(line.split("=", 1) for line in body[off:].decode("utf-8").splitlines() if line)
    model = MultiSourceTransformer(ModelConfig.from_items(items))
    model.load_state_dict(state)
    return model
