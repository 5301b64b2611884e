"""BERT-style encoder plus the two pre-training heads.

* :class:`Encoder` - post-LN transformer, CLS pooling, MLM head whose output
  projection is the token embedding table itself.
* :class:`BottleneckDecoder` - one causal layer that sees the encoder only
  through the final CLS state, placed at position 0.
* :class:`AuxHead` - bidirectional layers over ``[h_cls, h_l^1 .. h_l^n]``
  where ``h_l`` are the states of the tapped encoder layer.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .numcore import (
    Tensor,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    linear,
    matmul,
    parameter,
    softmax_rows,
    no_grad,
    precision,
)

NEG_INF = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 128
    aux_tap_layer: int | None = None
    n_aux_layers: int = 2
    decoder_max_len: int | None = None
    tie_towers: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.aux_tap_layer is None:
            self.aux_tap_layer = max(1, self.n_layers // 2)
        if self.decoder_max_len is None:
            self.decoder_max_len = self.max_seq_len
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.aux_tap_layer <= self.n_layers:
            raise ValueError(f"aux_tap_layer must lie in [1, {self.n_layers}]")
        if self.max_seq_len < 4:
            raise ValueError("max_seq_len must be at least 4")
        if self.n_aux_layers < 1:
            raise ValueError("n_aux_layers must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class SequenceTooLong(ValueError):
    pass


@dataclass
class EncoderOutput:
    hidden_states: list  # [embeddings, layer 1, ..., layer n]
    h_cls: Tensor
    encoder: "Encoder" = field(repr=False)

    @property
    def last(self) -> Tensor:
        return self.hidden_states[-1]

    @property
    def mlm_logits(self) -> Tensor:
        return self.encoder.mlm_logits(self.last)


# -- building blocks ----------------------------------------------------------

def _init_block(params: dict, prefix: str, d: int, d_ff: int, rng, std: float, dtype) -> None:
    def normal(*shape):
        return parameter(rng.normal(0.0, std, size=shape).astype(dtype))

    def zeros(*shape):
        return parameter(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return parameter(np.ones(shape, dtype=dtype))

    params[f"{prefix}.attn.w_qkv"] = normal(d, 3 * d)
    params[f"{prefix}.attn.b_qkv"] = zeros(3 * d)
    params[f"{prefix}.attn.w_o"] = normal(d, d)
    params[f"{prefix}.attn.b_o"] = zeros(d)
    params[f"{prefix}.ln1.g"] = ones(d)
    params[f"{prefix}.ln1.b"] = zeros(d)
    params[f"{prefix}.ff.w1"] = normal(d, d_ff)
    params[f"{prefix}.ff.b1"] = zeros(d_ff)
    params[f"{prefix}.ff.w2"] = normal(d_ff, d)
    params[f"{prefix}.ff.b2"] = zeros(d)
    params[f"{prefix}.ln2.g"] = ones(d)
    params[f"{prefix}.ln2.b"] = zeros(d)


def attention(params: dict, prefix: str, x: Tensor, bias: np.ndarray, n_heads: int) -> Tensor:
    B, L, d = x.shape
    dh = d // n_heads
    qkv = linear(x, params[f"{prefix}.attn.w_qkv"], params[f"{prefix}.attn.b_qkv"])
    qkv = qkv.reshape(B, L, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + bias
    ctx = matmul(softmax_rows(scores), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, L, d)
    return linear(ctx, params[f"{prefix}.attn.w_o"], params[f"{prefix}.attn.b_o"])


def transformer_block(params: dict, prefix: str, x: Tensor, bias: np.ndarray, n_heads: int) -> Tensor:
    """Post-LN block, as in BERT."""
    x = layer_norm(x + attention(params, prefix, x, bias, n_heads),
                   params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    h = gelu(linear(x, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"]))
    h = linear(h, params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])
    return layer_norm(x + h, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def padding_bias(attention_mask: np.ndarray, dtype) -> np.ndarray:
    """(B, L) 0/1 mask -> additive (B, 1, 1, L) bias over keys."""
    m = np.asarray(attention_mask, dtype=bool)
    return np.where(m, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def causal_bias(attention_mask: np.ndarray, dtype) -> np.ndarray:
    B, L = attention_mask.shape
    future = np.triu(np.ones((L, L), dtype=bool), k=1)
    bias = np.where(future, NEG_INF, 0.0).astype(dtype)[None, None, :, :]
    return bias + padding_bias(attention_mask, dtype)


# -- modules ------------------------------------------------------------------

class Encoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, prefix: str = "enc",
                 token_embeddings: Tensor | None = None, dtype=np.float32):
        self.config = config
        self.prefix = prefix
        c, std = config, config.init_std
        p: dict[str, Tensor] = {}
        if token_embeddings is None:
            token_embeddings = parameter(rng.normal(0.0, std, size=(c.vocab_size, c.d_model)).astype(dtype))
        self.tok_emb = token_embeddings
        p["tok_emb"] = token_embeddings
        p[f"{prefix}.pos_emb"] = parameter(rng.normal(0.0, std, size=(c.max_seq_len, c.d_model)).astype(dtype))
        p[f"{prefix}.emb_ln.g"] = parameter(np.ones(c.d_model, dtype=dtype))
        p[f"{prefix}.emb_ln.b"] = parameter(np.zeros(c.d_model, dtype=dtype))
        for i in range(c.n_layers):
            _init_block(p, f"{prefix}.layer{i}", c.d_model, c.d_ff, rng, std, dtype)
        p[f"{prefix}.mlm.w"] = parameter(rng.normal(0.0, std, size=(c.d_model, c.d_model)).astype(dtype))
        p[f"{prefix}.mlm.b"] = parameter(np.zeros(c.d_model, dtype=dtype))
        p[f"{prefix}.mlm.ln.g"] = parameter(np.ones(c.d_model, dtype=dtype))
        p[f"{prefix}.mlm.ln.b"] = parameter(np.zeros(c.d_model, dtype=dtype))
        p[f"{prefix}.mlm.out_bias"] = parameter(np.zeros(c.vocab_size, dtype=dtype))
        self.params = p

    def forward(self, token_ids, attention_mask=None) -> EncoderOutput:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        if L > self.config.max_seq_len:
            raise SequenceTooLong(f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        if attention_mask is None:
            attention_mask = np.ones_like(ids)
        p = self.params
        dtype = self.tok_emb.data.dtype
        x = embedding_lookup(self.tok_emb, ids) + p[f"{self.prefix}.pos_emb"][:L]
        x = layer_norm(x, p[f"{self.prefix}.emb_ln.g"], p[f"{self.prefix}.emb_ln.b"])
        bias = padding_bias(attention_mask, dtype)
        states = [x]
        for i in range(self.config.n_layers):
            x = transformer_block(p, f"{self.prefix}.layer{i}", x, bias, self.config.n_heads)
            states.append(x)
        return EncoderOutput(hidden_states=states, h_cls=x[:, 0, :], encoder=self)

    __call__ = forward

    def mlm_logits(self, states: Tensor) -> Tensor:
        """Prediction head; output projection is ``tok_emb`` transposed."""
        p = self.params
        h = gelu(linear(states, p[f"{self.prefix}.mlm.w"], p[f"{self.prefix}.mlm.b"]))
        h = layer_norm(h, p[f"{self.prefix}.mlm.ln.g"], p[f"{self.prefix}.mlm.ln.b"])
        return matmul(h, self.tok_emb.transpose()) + p[f"{self.prefix}.mlm.out_bias"]

    def encode(self, token_ids, attention_mask=None) -> np.ndarray:
        with no_grad():
            return self.forward(token_ids, attention_mask).h_cls.data.copy()


class BottleneckDecoder:
    """Single causal layer fed ``[h_cls, x_1 .. x_N]``; predicts ``x_1 .. x_N, [SEP]``."""

    def __init__(self, config: EncoderConfig, encoder: Encoder, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.encoder = encoder
        c, std = config, config.init_std
        p: dict[str, Tensor] = {}
        p["dec.pos_emb"] = parameter(rng.normal(0.0, std, size=(c.decoder_max_len, c.d_model)).astype(dtype))
        p["dec.emb_ln.g"] = parameter(np.ones(c.d_model, dtype=dtype))
        p["dec.emb_ln.b"] = parameter(np.zeros(c.d_model, dtype=dtype))
        _init_block(p, "dec.layer0", c.d_model, c.d_ff, rng, std, dtype)
        self.params = p

    def forward(self, h_cls: Tensor, ctx_token_ids, ctx_mask=None) -> Tensor:
        ids = np.asarray(ctx_token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, N = ids.shape
        if N == 0:
            raise ValueError("bottleneck decoder needs a non-empty context")
        if N + 1 > self.config.decoder_max_len:
            raise SequenceTooLong(f"context length {N} + 1 exceeds decoder_max_len {self.config.decoder_max_len}")
        if h_cls.ndim == 1:
            h_cls = h_cls.reshape(1, -1)
        if ctx_mask is None:
            ctx_mask = np.ones_like(ids)
        p = self.params
        dtype = h_cls.data.dtype
        x = concat([h_cls.reshape(B, 1, -1), embedding_lookup(self.encoder.tok_emb, ids)], axis=1)
        x = layer_norm(x + p["dec.pos_emb"][:N + 1], p["dec.emb_ln.g"], p["dec.emb_ln.b"])
        full_mask = np.concatenate([np.ones((B, 1), dtype=np.int64), np.asarray(ctx_mask, dtype=np.int64)], axis=1)
        x = transformer_block(p, "dec.layer0", x, causal_bias(full_mask, dtype), self.config.n_heads)
        return self.encoder.mlm_logits(x)

    __call__ = forward


class AuxHead:
    """Extra bidirectional layers reading the final CLS state plus a tapped layer."""

    def __init__(self, config: EncoderConfig, encoder: Encoder, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.encoder = encoder
        p: dict[str, Tensor] = {}
        for i in range(config.n_aux_layers):
            _init_block(p, f"aux.layer{i}", config.d_model, config.d_ff, rng, config.init_std, dtype)
        self.params = p

    def hidden(self, h_cls: Tensor, tapped_states: Tensor, attention_mask=None,
               layer_index: int | None = None) -> Tensor:
        if layer_index is not None and layer_index != self.config.aux_tap_layer:
            raise ValueError(f"tapped layer {layer_index} != configured aux_tap_layer {self.config.aux_tap_layer}")
        B, L, d = tapped_states.shape
        if attention_mask is None:
            attention_mask = np.ones((B, L), dtype=np.int64)
        # CLS state replaces position 0 of the tapped layer
        x = concat([h_cls.reshape(B, 1, d), tapped_states[:, 1:, :]], axis=1)
        bias = padding_bias(attention_mask, x.data.dtype)
        for i in range(self.config.n_aux_layers):
            x = transformer_block(self.params, f"aux.layer{i}", x, bias, self.config.n_heads)
        return x

    def forward(self, h_cls: Tensor, tapped_states: Tensor, attention_mask=None,
                layer_index: int | None = None) -> Tensor:
        return self.encoder.mlm_logits(self.hidden(h_cls, tapped_states, attention_mask, layer_index))

    __call__ = forward


def similarity(v_q, v_p) -> float:
    """Inner product of two pooled vectors."""
    a = np.asarray(v_q.data if isinstance(v_q, Tensor) else v_q, dtype=np.float64).ravel()
    b = np.asarray(v_p.data if isinstance(v_p, Tensor) else v_p, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


class DenseModel:
    """Encoder tower(s) plus both pre-training heads sharing token embeddings."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=None):
        from .numcore import get_dtype

        dtype = dtype or get_dtype()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config, rng, "enc", dtype=dtype)
        if config.tie_towers:
            self.query_encoder = self.encoder
        else:
            self.query_encoder = Encoder(config, rng, "qenc", token_embeddings=self.encoder.tok_emb, dtype=dtype)
        self.decoder = BottleneckDecoder(config, self.encoder, rng, dtype=dtype)
        self.aux = AuxHead(config, self.encoder, rng, dtype=dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for mod in (self.encoder, self.query_encoder, self.decoder, self.aux):
            for k, v in mod.params.items():
                out.setdefault(k, v)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in named.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data[...] = arr.astype(t.data.dtype)

    def clone(self) -> "DenseModel":
        return copy.deepcopy(self)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: DenseModel, meta: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write config echo, named parameters and optional optimizer tensors."""
    meta = dict(meta or {})
    meta["model_config"] = model.config.to_dict()
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra/{k}"] = v
    container.save(path, "checkpoint", meta, tensors)


def load_checkpoint(path) -> tuple[DenseModel, dict, dict[str, np.ndarray]]:
    kind, meta, tensors = container.load(path)
    if kind != "checkpoint":
        raise container.ContainerError(f"{path} holds a {kind!r}, not a checkpoint")
    config = EncoderConfig(**meta["model_config"])
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    dtype = next(iter(params.values())).dtype if params else np.dtype(np.float32)
    with precision(dtype.name):
        model = DenseModel(config, seed=0)
        model.load_state_dict(params)
    return model, meta, extra
