"""Bidirectional post-LN transformer encoder over the joint token/region sequence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor


class SequenceLengthError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 256
    max_seq_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must leave room for [CLS], one token and [SEP]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.num_layers < 0:
            raise ValueError("num_layers must be non-negative")

    @classmethod
    def full_size(cls) -> "EncoderConfig":
        """Full-size configuration for large-scale runs (hidden width 768, 144 positions)."""
        return cls(num_layers=12, hidden_size=768, num_heads=12, ffn_size=3072, max_seq_len=144)

    def to_dict(self) -> dict:
        return asdict(self)


def init_encoder(store: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator, std: float = 0.02):
    d, f = cfg.hidden_size, cfg.ffn_size
    for i in range(cfg.num_layers):
        p = f"encoder.layer{i}"
        for proj in ("query", "key", "value", "output"):
            store.add(f"{p}.attn.{proj}.weight", rng.normal(0.0, std, (d, d)))
            store.add(f"{p}.attn.{proj}.bias", np.zeros(d))
        store.add(f"{p}.attn.ln.gamma", np.ones(d))
        store.add(f"{p}.attn.ln.beta", np.zeros(d))
        store.add(f"{p}.ffn.in.weight", rng.normal(0.0, std, (d, f)))
        store.add(f"{p}.ffn.in.bias", np.zeros(f))
        store.add(f"{p}.ffn.out.weight", rng.normal(0.0, std, (f, d)))
        store.add(f"{p}.ffn.out.bias", np.zeros(d))
        store.add(f"{p}.ffn.ln.gamma", np.ones(d))
        store.add(f"{p}.ffn.ln.beta", np.zeros(d))


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, n, d = x.shape
    return nx.transpose(x.reshape(*lead, n, num_heads, d // num_heads),
                        tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = nx.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return x.reshape(*lead, n, h * dh)


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray, num_heads: int) -> Tensor:
    """Per-head softmax(q k^T / sqrt(d_head)) with invalid key positions removed.

    q, k: [..., n, d]; mask: [..., n] boolean. Returns [..., heads, n, n].
    """
    d = q.shape[-1]
    if d % num_heads:
        raise nx.DimensionError(f"width {d} not divisible by {num_heads} heads")
    qh, kh = _split_heads(q, num_heads), _split_heads(k, num_heads)
    scores = nx.matmul(qh, nx.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(d // num_heads))
    key_mask = np.asarray(mask, dtype=bool)[..., None, None, :]
    return nx.softmax(scores, axis=-1, mask=key_mask)


def attention(q: Tensor, k: Tensor, v: Tensor, mask, num_heads: int,
              out_weight: Tensor | None = None, out_bias: Tensor | None = None,
              dropout_rate: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention.

    Heads are concatenated and passed through the output projection when one
    is given. A query whose keys are all masked gets a zero vector.
    """
    weights = attention_weights(q, k, mask, num_heads)
    weights = nx.dropout(weights, dropout_rate, rng, training)
    out = _merge_heads(nx.matmul(weights, _split_heads(v, num_heads)))
    if out_weight is not None:
        out = nx.affine(out, out_weight, out_bias)
    return out


def _layer(x: Tensor, mask, cfg: EncoderConfig, params: ParameterStore, i: int, rng, training: bool) -> Tensor:
    p = f"encoder.layer{i}"
    q = nx.affine(x, params[f"{p}.attn.query.weight"], params[f"{p}.attn.query.bias"])
    k = nx.affine(x, params[f"{p}.attn.key.weight"], params[f"{p}.attn.key.bias"])
    v = nx.affine(x, params[f"{p}.attn.value.weight"], params[f"{p}.attn.value.bias"])
    a = attention(q, k, v, mask, cfg.num_heads, params[f"{p}.attn.output.weight"], params[f"{p}.attn.output.bias"],
                  cfg.dropout_rate, rng, training)
    a = nx.dropout(a, cfg.dropout_rate, rng, training)
    x = nx.layer_norm(x + a, params[f"{p}.attn.ln.gamma"], params[f"{p}.attn.ln.beta"])
    h = nx.gelu(nx.affine(x, params[f"{p}.ffn.in.weight"], params[f"{p}.ffn.in.bias"]))
    h = nx.affine(h, params[f"{p}.ffn.out.weight"], params[f"{p}.ffn.out.bias"])
    h = nx.dropout(h, cfg.dropout_rate, rng, training)
    return nx.layer_norm(x + h, params[f"{p}.ffn.ln.gamma"], params[f"{p}.ffn.ln.beta"])


def encoder_forward(embedded: Tensor, mask, cfg: EncoderConfig, params: ParameterStore,
                    rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Run ``cfg.num_layers`` post-LN blocks. Accepts [n, d] or batched [b, n, d]."""
    n = embedded.shape[-2]
    if n > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence of length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("dropout in training mode needs an rng")
    x = embedded
    for i in range(cfg.num_layers):
        x = _layer(x, mask, cfg, params, i, rng, training)
    return x
