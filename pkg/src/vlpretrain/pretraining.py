"""Pretraining objectives: masked language modeling, masked object
classification, visual-linguistic matching, and their gated sum."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import PairExample
from .embeddings import MASK, RegionSet, SequenceItem, TokenSequence, collate, with_features
from .model import ModelConfig, cls_states, encode, head
from .numerics import ParameterStore, Tensor


class Replacement(enum.Enum):
    ZEROED = "zeroed"
    KEPT = "kept"


class Corruption(enum.Enum):
    NONE = "none"
    NEG_IMAGE = "neg_image"
    NEG_CAPTION = "neg_caption"


class SamplingError(ValueError):
    pass


@dataclass
class MaskingConfig:
    text_rate: float = 0.15
    region_rate: float = 0.15
    region_zero_prob: float = 0.9
    # fractions of masked text positions replaced by [MASK] / a random token / left as is
    text_split: tuple[float, float, float] = (1.0, 0.0, 0.0)


@dataclass
class MaskPlan:
    text_indices: np.ndarray
    region_indices: np.ndarray
    region_replacement: list[Replacement] = field(default_factory=list)

    def __post_init__(self):
        self.text_indices = np.asarray(self.text_indices, dtype=np.int64)
        self.region_indices = np.asarray(self.region_indices, dtype=np.int64)
        if len(self.region_replacement) != len(self.region_indices):
            raise ValueError("one replacement decision per masked region")
        for idx in (self.text_indices, self.region_indices):
            if len(np.unique(idx)) != len(idx):
                raise ValueError("mask indices must be unique")


@dataclass
class VlmPair:
    tokens: TokenSequence
    regions: RegionSet
    y: int
    corruption: Corruption = Corruption.NONE

    def __post_init__(self):
        if (self.y == 1) != (self.corruption is Corruption.NONE):
            raise ValueError("y must be 1 exactly when the pair is uncorrupted")


def _bernoulli_positions(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    picked = np.flatnonzero(rng.random(n) < rate)
    if picked.size == 0:
        picked = np.array([rng.integers(n)])
    return picked


def sample_text_mask(num_tokens: int, rng: np.random.Generator, rate: float = 0.15) -> np.ndarray:
    """Each position independently with probability ``rate``; at least one is always chosen."""
    if num_tokens < 1:
        raise ValueError("need at least one token to mask")
    return _bernoulli_positions(num_tokens, rate, rng)


def apply_text_mask(ids, indices, rng: np.random.Generator | None = None,
                    split: tuple[float, float, float] = (1.0, 0.0, 0.0), vocab_size: int | None = None) -> list[int]:
    """Replace the chosen positions with [MASK].

    ``split`` gives the share of chosen positions that become [MASK], a random
    token, or stay unchanged; the default is pure [MASK] replacement.
    """
    out = list(ids)
    mask_share, random_share, _ = split
    for i in indices:
        if mask_share >= 1.0:
            out[i] = MASK
            continue
        u = rng.random()
        if u < mask_share:
            out[i] = MASK
        elif u < mask_share + random_share:
            out[i] = int(rng.integers(6, vocab_size))
    return out


def sample_region_mask(num_regions: int, rng: np.random.Generator, rate: float = 0.15,
                       zero_prob: float = 0.9) -> tuple[np.ndarray, list[Replacement]]:
    if num_regions < 1:
        raise ValueError("need at least one region to mask")
    picked = _bernoulli_positions(num_regions, rate, rng)
    decisions = [Replacement.ZEROED if u < zero_prob else Replacement.KEPT for u in rng.random(len(picked))]
    return picked, decisions


def apply_region_mask(regions: RegionSet, indices, decisions) -> RegionSet:
    features = regions.features.copy()
    for i, d in zip(indices, decisions):
        if d is Replacement.ZEROED:
            features[i] = 0.0
    return with_features(regions, features)


def sample_mask_plan(pair: VlmPair, rng: np.random.Generator, cfg: MaskingConfig | None = None) -> MaskPlan:
    cfg = cfg or MaskingConfig()
    text = sample_text_mask(len(pair.tokens), rng, cfg.text_rate)
    regions, decisions = sample_region_mask(len(pair.regions), rng, cfg.region_rate, cfg.region_zero_prob)
    return MaskPlan(text, regions, decisions)


def sample_vlm_pair(dataset: list[PairExample], index: int, rng: np.random.Generator) -> VlmPair:
    """True pair with probability 1/2, otherwise a swapped image or caption."""
    if len(dataset) < 2:
        raise SamplingError("need at least two pairs to sample a negative")
    anchor = dataset[index]
    if rng.random() < 0.5:
        return VlmPair(anchor.tokens, anchor.regions, 1, Corruption.NONE)
    kind = Corruption.NEG_IMAGE if rng.random() < 0.5 else Corruption.NEG_CAPTION
    others = [k for k, ex in enumerate(dataset) if ex.image_id != anchor.image_id]
    if not others:
        raise SamplingError("every pair shows the same image; no negative available")
    other = dataset[others[int(rng.integers(len(others)))]]
    if kind is Corruption.NEG_IMAGE:
        return VlmPair(anchor.tokens, other.regions, 0, kind)
    return VlmPair(other.tokens, anchor.regions, 0, kind)


# heads and losses


def mlm_loss(states: Tensor, true_ids, params: ParameterStore, weights=None) -> Tensor:
    """Cross-entropy of the vocabulary head at masked text positions ([M, d] states)."""
    return nx.cross_entropy_from_logits(head(states, "mlm", params), true_ids, weights)


def moc_loss(states: Tensor, label_ids, params: ParameterStore, weights=None) -> Tensor:
    """Cross-entropy of the object-class head at masked region positions."""
    return nx.cross_entropy_from_logits(head(states, "moc", params), label_ids, weights)


def vlm_logit(cls_state: Tensor, params: ParameterStore) -> Tensor:
    out = head(cls_state, "vlm", params)
    return out.reshape(out.shape[:-1]) if out.ndim > 1 else out.reshape(())


def vlm_score(cls_state: Tensor, params: ParameterStore) -> Tensor:
    """Matching probability in (0, 1)."""
    return nx.sigmoid(vlm_logit(cls_state, params))


def vlm_loss(logit: Tensor, y) -> Tensor:
    """Binary cross-entropy of the matching head, taken from its logit."""
    return nx.binary_cross_entropy_with_logits(logit, y)


@dataclass
class LossParts:
    total: Tensor
    mlm: float
    moc: float
    vlm: float


def joint_loss(pairs: list[VlmPair], plans: list[MaskPlan], cfg: ModelConfig, params: ParameterStore,
               rng: np.random.Generator | None = None, training: bool = False,
               masking: MaskingConfig | None = None) -> LossParts:
    """Batch mean of (MLM + MOC) * [y = 1] + VLM.

    Masks are applied to every pair before encoding; only matching pairs feed
    the MLM and MOC heads, so for y = 0 those heads see no gradient at all.
    """
    masking = masking or MaskingConfig()
    items = []
    for pair, plan in zip(pairs, plans):
        ids = apply_text_mask(pair.tokens.ids, plan.text_indices, rng, masking.text_split, cfg.vocab_size)
        regions = apply_region_mask(pair.regions, plan.region_indices, plan.region_replacement)
        items.append(SequenceItem(ids, regions))
    batch = collate(items, cfg.encoder.max_seq_len, cfg.d_vis)
    states = encode(batch, cfg, params, rng, training)
    b = len(pairs)

    text_rows, text_pos, text_targets, text_w = [], [], [], []
    reg_rows, reg_pos, reg_targets, reg_w = [], [], [], []
    for k, (pair, plan) in enumerate(zip(pairs, plans)):
        if pair.y != 1:
            continue
        t_kept = int(batch.text_len[k]) - 2
        keep = [int(i) for i in plan.text_indices if i < t_kept]
        for i in keep:
            text_rows.append(k)
            text_pos.append(batch.text_position(k, i))
            text_targets.append(pair.tokens.ids[i])
            text_w.append(1.0 / (len(keep) * b))
        i_kept = int(batch.region_count[k])
        keep = [int(j) for j in plan.region_indices if j < i_kept]
        for j in keep:
            reg_rows.append(k)
            reg_pos.append(batch.region_position(k, j))
            reg_targets.append(int(pair.regions.label_ids[j]))
            reg_w.append(1.0 / (len(keep) * b))

    logits = vlm_logit(cls_states(states), params)
    l_vlm = vlm_loss(logits, [p.y for p in pairs])
    total = l_vlm
    parts = {"mlm": 0.0, "moc": 0.0}
    n_pos = sum(p.y for p in pairs)
    if text_rows:
        l_mlm = mlm_loss(nx.take(states, (np.array(text_rows), np.array(text_pos))), text_targets, params, text_w)
        total = total + l_mlm
        parts["mlm"] = l_mlm.item() * b / n_pos
    if reg_rows:
        l_moc = moc_loss(nx.take(states, (np.array(reg_rows), np.array(reg_pos))), reg_targets, params, reg_w)
        total = total + l_moc
        parts["moc"] = l_moc.item() * b / n_pos
    return LossParts(total, parts["mlm"], parts["moc"], l_vlm.item())
