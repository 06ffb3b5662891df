"""Model configuration, parameter initialisation and the shared forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .embeddings import Batch, embed_batch, init_embeddings
from .encoder import EncoderConfig, encoder_forward, init_encoder
from .numerics import ParameterStore, Tensor

HEADS = ("mlm", "moc", "vlm", "vcr")


@dataclass
class ModelConfig:
    vocab_size: int
    d_vis: int
    num_labels: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        return cls(encoder=EncoderConfig(**enc), **d)


def head_shapes(cfg: ModelConfig) -> dict[str, int]:
    return {"mlm": cfg.vocab_size, "moc": cfg.num_labels, "vlm": 1, "vcr": 1}


def init_params(cfg: ModelConfig, seed: int = 0, head_std: float = 0.0) -> ParameterStore:
    """Fresh parameters. Heads start at zero unless ``head_std`` > 0."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    d = cfg.encoder.hidden_size
    init_embeddings(store, cfg.vocab_size, cfg.d_vis, d, cfg.encoder.max_seq_len, rng)
    init_encoder(store, cfg.encoder, rng)
    for head, width in head_shapes(cfg).items():
        w = rng.normal(0.0, head_std, (d, width)) if head_std > 0 else np.zeros((d, width))
        store.add(f"heads.{head}.weight", w)
        store.add(f"heads.{head}.bias", np.zeros(width))
    return store


def encode(batch: Batch, cfg: ModelConfig, params: ParameterStore, rng=None, training: bool = False) -> Tensor:
    """Contextual states [B, n, d] for a collated batch."""
    x = embed_batch(batch, params)
    if training and cfg.encoder.dropout_rate > 0:
        x = nx.dropout(x, cfg.encoder.dropout_rate, rng, training)
    return encoder_forward(x, batch.mask, cfg.encoder, params, rng, training)


def head(states: Tensor, name: str, params: ParameterStore) -> Tensor:
    return nx.affine(states, params[f"heads.{name}.weight"], params[f"heads.{name}.bias"])


def cls_states(states: Tensor) -> Tensor:
    return nx.take(states, (slice(None), 0))
