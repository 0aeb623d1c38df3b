"""Pluggable sequence encoders mapping an item history to a user vector.

Two backbones are provided behind one ``encode_batch`` contract: a stacked
GRU and a causal self-attention encoder in the SASRec lineage (learned
positional embeddings, residual blocks with post-layer-norm, lower-
triangular masking).  Histories are left-padded with item index 0; padding
positions are masked out of attention and passed through the recurrence, so
the user vector is invariant to extra left padding.  Positions are counted
relative to the first real item for the same reason.

The item embedding table is shared with the scoring side: the same rows
serve as encoder input and as candidate/target vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ENCODER_KINDS = ("self_attention", "gru")

ATTN_MASK_VALUE = -1e30  # large enough that masked logits underflow to exact 0 weight


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "self_attention"
    d: int = 64
    o: int = 50
    layers: int = 2
    heads: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}, expected one of {ENCODER_KINDS}")
        if self.d <= 0 or self.o <= 0 or self.layers <= 0:
            raise ValueError("embedding dimension, window length, and layer count must be positive")
        if self.kind == "self_attention" and self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")


def _uniform(rng: np.random.Generator, shape, d: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(config: EncoderConfig, n_items: int, rng: np.random.Generator) -> dict:
    """Parameter tensors for one encoder; embeddings and projections are
    uniform in [-1/sqrt(d), 1/sqrt(d)], biases and norm offsets zero."""
    d = config.d
    params: dict[str, Tensor] = {}

    def param(name: str, value) -> None:
        params[name] = Tensor(value, requires_grad=True, name=name)

    emb = _uniform(rng, (n_items + 1, d), d)
    emb[0] = 0.0  # padding row; masked out of every path regardless
    param("item_emb", emb)

    if config.kind == "self_attention":
        param("pos_emb", _uniform(rng, (config.o + 1, d), d))
        for layer in range(config.layers):
            p = f"attn{layer}"
            for proj in ("q", "k", "v", "out"):
                param(f"{p}_{proj}_w", _uniform(rng, (d, d), d))
                param(f"{p}_{proj}_b", np.zeros(d))
            param(f"{p}_ln1_gain", np.ones(d))
            param(f"{p}_ln1_bias", np.zeros(d))
            param(f"{p}_ffn_w1", _uniform(rng, (d, d), d))
            param(f"{p}_ffn_b1", np.zeros(d))
            param(f"{p}_ffn_w2", _uniform(rng, (d, d), d))
            param(f"{p}_ffn_b2", np.zeros(d))
            param(f"{p}_ln2_gain", np.ones(d))
            param(f"{p}_ln2_bias", np.zeros(d))
        param("final_ln_gain", np.ones(d))
        param("final_ln_bias", np.zeros(d))
    else:
        for layer in range(config.layers):
            p = f"gru{layer}"
            for gate in ("r", "z", "n"):
                param(f"{p}_w{gate}", _uniform(rng, (d, d), d))
                param(f"{p}_u{gate}", _uniform(rng, (d, d), d))
                param(f"{p}_b{gate}", np.zeros(d))
                param(f"{p}_c{gate}", np.zeros(d))
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def _attention_block(x: Tensor, params: dict, layer: int, config: EncoderConfig,
                     mask: np.ndarray, real: np.ndarray,
                     rng: np.random.Generator | None, train: bool) -> Tensor:
    p = f"attn{layer}"
    batch, length, d = x.shape
    heads = config.heads
    head_size = d // heads

    def split_heads(t: Tensor) -> Tensor:
        t = ad.reshape(t, (batch, length, heads, head_size))
        return ad.transpose(t, (0, 2, 1, 3))

    q = split_heads(_linear(x, params[f"{p}_q_w"], params[f"{p}_q_b"]))
    k = split_heads(_linear(x, params[f"{p}_k_w"], params[f"{p}_k_b"]))
    v = split_heads(_linear(x, params[f"{p}_v_w"], params[f"{p}_v_b"]))

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_size))
    scores = ad.mask_fill(scores, mask, ATTN_MASK_VALUE)
    weights = ad.softmax(scores, axis=-1)
    weights = ad.dropout(weights, config.dropout_rate, rng, train)
    context = ad.matmul(weights, v)
    context = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (batch, length, d))
    attended = _linear(context, params[f"{p}_out_w"], params[f"{p}_out_b"])

    x = ad.layer_norm(ad.add(x, attended), params[f"{p}_ln1_gain"], params[f"{p}_ln1_bias"])

    hidden = ad.relu(_linear(x, params[f"{p}_ffn_w1"], params[f"{p}_ffn_b1"]))
    hidden = ad.dropout(hidden, config.dropout_rate, rng, train)
    hidden = _linear(hidden, params[f"{p}_ffn_w2"], params[f"{p}_ffn_b2"])
    hidden = ad.dropout(hidden, config.dropout_rate, rng, train)
    x = ad.layer_norm(ad.add(x, hidden), params[f"{p}_ln2_gain"], params[f"{p}_ln2_bias"])
    return ad.mul(x, Tensor(real[:, :, None]))


def _encode_self_attention(params: dict, config: EncoderConfig, items: np.ndarray,
                           rng: np.random.Generator | None, train: bool,
                           all_positions: bool) -> Tensor:
    batch, length = items.shape
    real = (items != 0).astype(np.float64)
    # positions count from the first real item so left padding cannot shift them
    pad_counts = (items == 0).sum(axis=1, keepdims=True)
    positions = np.maximum(np.arange(1, length + 1)[None, :] - pad_counts, 0)

    x = ad.scale(ad.embedding_lookup(params["item_emb"], items), np.sqrt(config.d))
    x = ad.add(x, ad.embedding_lookup(params["pos_emb"], positions))
    x = ad.dropout(x, config.dropout_rate, rng, train)
    x = ad.mul(x, Tensor(real[:, :, None]))

    causal = np.triu(np.ones((length, length), dtype=bool), k=1)
    key_pad = (items == 0)[:, None, None, :]
    mask = causal[None, None, :, :] | key_pad

    for layer in range(config.layers):
        x = _attention_block(x, params, layer, config, mask, real, rng, train)
    x = ad.layer_norm(x, params["final_ln_gain"], params["final_ln_bias"])
    if all_positions:
        return x
    last = ad.index_select(x, np.array([length - 1]), axis=1)
    return ad.reshape(last, (batch, config.d))


def _gru_layer(x_steps: list, params: dict, layer: int, real: np.ndarray, d: int) -> list:
    p = f"gru{layer}"
    batch = x_steps[0].shape[0]
    h = Tensor(np.zeros((batch, d)))
    outputs = []
    for t, xt in enumerate(x_steps):
        r = ad.sigmoid(ad.add(_linear(xt, params[f"{p}_wr"], params[f"{p}_br"]),
                              _linear(h, params[f"{p}_ur"], params[f"{p}_cr"])))
        z = ad.sigmoid(ad.add(_linear(xt, params[f"{p}_wz"], params[f"{p}_bz"]),
                              _linear(h, params[f"{p}_uz"], params[f"{p}_cz"])))
        n = ad.tanh(ad.add(_linear(xt, params[f"{p}_wn"], params[f"{p}_bn"]),
                           ad.mul(r, _linear(h, params[f"{p}_un"], params[f"{p}_cn"]))))
        candidate = ad.add(n, ad.mul(z, ad.sub(h, n)))  # (1-z)*n + z*h
        # padding steps pass the state through unchanged
        m = Tensor(real[:, t:t + 1])
        h = ad.add(ad.mul(m, candidate), ad.mul(Tensor(1.0 - real[:, t:t + 1]), h))
        outputs.append(h)
    return outputs


def _encode_gru(params: dict, config: EncoderConfig, items: np.ndarray,
                rng: np.random.Generator | None, train: bool,
                all_positions: bool) -> Tensor:
    batch, length = items.shape
    real = (items != 0).astype(np.float64)
    emb = ad.embedding_lookup(params["item_emb"], items)
    emb = ad.dropout(emb, config.dropout_rate, rng, train)
    emb = ad.mul(emb, Tensor(real[:, :, None]))
    steps = [
        ad.reshape(ad.index_select(emb, np.array([t]), axis=1), (batch, config.d))
        for t in range(length)
    ]
    for layer in range(config.layers):
        steps = _gru_layer(steps, params, layer, real, config.d)
    if all_positions:
        return ad.stack(steps, axis=1)
    return steps[-1]


def encode_batch(params: dict, config: EncoderConfig, items, *,
                 rng: np.random.Generator | None = None, train: bool = False,
                 all_positions: bool = False) -> Tensor:
    """User vectors [batch, d] for a left-padded item-index matrix [batch, T].

    ``all_positions`` returns the per-position representations [batch, T, d]
    instead of the final one (pad positions carry no meaning there).
    """
    items = np.asarray(items, dtype=np.int64)
    if items.ndim != 2:
        raise ValueError(f"expected a [batch, length] index matrix, got shape {items.shape}")
    if items.shape[1] > config.o:
        raise ValueError(f"sequence length {items.shape[1]} exceeds window {config.o}")
    if (items == 0).all(axis=1).any():
        raise ValueError("encode: some input sequence is all padding")
    if items[:, -1].min() == 0:
        raise ValueError("encode: inputs must be left-padded (last position is padding)")
    if config.kind == "self_attention":
        return _encode_self_attention(params, config, items, rng, train, all_positions)
    return _encode_gru(params, config, items, rng, train, all_positions)


def encode(params: dict, config: EncoderConfig, input_items, *,
           rng: np.random.Generator | None = None, train: bool = False) -> Tensor:
    """User vector [d] for one item-index sequence (may include left padding)."""
    seq = np.asarray(list(input_items), dtype=np.int64)
    out = encode_batch(params, config, seq[None, :], rng=rng, train=train)
    return ad.reshape(out, (config.d,))
