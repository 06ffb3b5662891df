"""Gradient checks for every training loss on a small seeded model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nx
from . import pretraining as pt
from . import retrieval, vcr
from .data import SynthConfig, generate_synthetic, synthetic_vocabulary, tokenize_records
from .embeddings import SequenceItem, collate
from .encoder import EncoderConfig
from .model import ModelConfig, encode, init_params
from .numerics import ParameterStore, Tensor

LOSSES = ("mlm", "moc", "vlm", "joint", "triplet", "vcr")


def check_model(vocab_size: int, d_vis: int, num_labels: int) -> ModelConfig:
    enc = EncoderConfig(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, max_seq_len=32, dropout_rate=0.0)
    return ModelConfig(vocab_size, d_vis, num_labels, enc)


def _masked_states(pair: pt.VlmPair, plan: pt.MaskPlan, cfg: ModelConfig, params: ParameterStore):
    ids = pt.apply_text_mask(pair.tokens.ids, plan.text_indices)
    regions = pt.apply_region_mask(pair.regions, plan.region_indices, plan.region_replacement)
    batch = collate([SequenceItem(ids, regions)], cfg.encoder.max_seq_len, cfg.d_vis)
    return batch, encode(batch, cfg, params)


def loss_closure(name: str, seed: int = 0) -> tuple[Callable[[ParameterStore], Tensor], ParameterStore]:
    """(loss_fn, params) for one named loss; heads get random weights so no gradient is trivially zero."""
    if name not in LOSSES:
        raise ValueError(f"unknown loss {name!r}; choose from {LOSSES}")
    synth = SynthConfig(pairs=6, num_concepts=8, d_vis=6, vocab_size=40, seed=seed)
    vocab = synthetic_vocabulary(synth)
    examples = tokenize_records(generate_synthetic(synth), vocab)
    cfg = check_model(len(vocab), synth.d_vis, synth.num_concepts)
    params = init_params(cfg, seed=seed, head_std=0.5)
    rng = np.random.default_rng(seed)
    positive = pt.VlmPair(examples[0].tokens, examples[0].regions, 1)
    negative = pt.VlmPair(examples[1].tokens, examples[2].regions, 0, pt.Corruption.NEG_IMAGE)
    plan = pt.sample_mask_plan(positive, rng)

    if name == "mlm":
        def fn(p):
            batch, states = _masked_states(positive, plan, cfg, p)
            pos = [batch.text_position(0, int(i)) for i in plan.text_indices]
            return pt.mlm_loss(nx.take(states, (0, np.array(pos))), [positive.tokens.ids[i] for i in plan.text_indices], p)
    elif name == "moc":
        def fn(p):
            batch, states = _masked_states(positive, plan, cfg, p)
            pos = [batch.region_position(0, int(j)) for j in plan.region_indices]
            labels = [int(positive.regions.label_ids[j]) for j in plan.region_indices]
            return pt.moc_loss(nx.take(states, (0, np.array(pos))), labels, p)
    elif name == "vlm":
        def fn(p):
            _, states = _masked_states(negative, pt.sample_mask_plan(negative, np.random.default_rng(seed)), cfg, p)
            return pt.vlm_loss(pt.vlm_logit(nx.take(states, (0, 0)), p), 0)
    elif name == "joint":
        pairs = [positive, negative]
        plans = [plan, pt.sample_mask_plan(negative, rng)]

        def fn(p):
            return pt.joint_loss(pairs, plans, cfg, p).total
    elif name == "triplet":
        # a wide margin keeps every hinge active so the check exercises the encoder
        rcfg = retrieval.RetrievalConfig(margin=1.5, negatives_per_positive=2)
        negatives = [retrieval.sample_negatives(examples, i, rng, 2) for i in (0, 1)]

        def fn(p):
            return retrieval.retrieval_loss(examples, [0, 1], cfg, p, rcfg, None, False, negatives)
    else:
        example = vcr.generate_synthetic_vcr(synth, 1, np.random.default_rng(seed))[0]
        prepared = [vcr.prepare(example, vocab)]

        def fn(p):
            return vcr.training_loss(prepared, cfg, p)
    return fn, params


def run_grad_check(name: str, seed: int = 0, coords_per_param: int | None = 24, stencil: int = 5) -> float:
    """Max relative error for one loss; ``coords_per_param=None`` checks every coordinate."""
    fn, params = loss_closure(name, seed)
    return nx.grad_check(fn, params, coords_per_param=coords_per_param, rng=np.random.default_rng(seed),
                         stencil=stencil)
