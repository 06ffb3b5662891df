"""Image-text retrieval: pair scoring, hardest-negative triplet loss, R@K."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PairExample
from .embeddings import RegionSet, SequenceItem, TokenSequence, collate
from .model import ModelConfig, cls_states, encode
from .numerics import ParameterStore, Tensor
from .pretraining import vlm_logit


class ProtocolError(RuntimeError):
    pass


@dataclass
class RetrievalConfig:
    margin: float = 0.2
    text_to_image_weight: float = 1.0
    image_to_text_weight: float = 1.0
    negatives_per_positive: int = 3
    learning_rate: float = 5e-5    # reference rate only; the optimizer follows TrainConfig.base_lr

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives_per_positive < 1:
            raise ValueError("need at least one negative per positive")


@dataclass
class ScoreMatrix:
    scores: np.ndarray                      # [Q, C]
    truth: list[set[int]] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.truth) != self.scores.shape[0]:
            raise ValueError("one ground-truth set per query")
        if any(not t for t in self.truth):
            raise ValueError("every query needs at least one correct candidate")


# scoring


def pair_logits(pairs: Sequence[tuple[TokenSequence, RegionSet]], cfg: ModelConfig, params: ParameterStore,
                rng=None, training: bool = False) -> Tensor:
    items = [SequenceItem(list(t.ids), r) for t, r in pairs]
    batch = collate(items, cfg.encoder.max_seq_len, cfg.d_vis)
    return vlm_logit(cls_states(encode(batch, cfg, params, rng, training)), params)


def score_pairs(pairs: Sequence[tuple[TokenSequence, RegionSet]], cfg: ModelConfig, params: ParameterStore,
                batch_size: int = 256) -> np.ndarray:
    """Matching probabilities in evaluation mode (no masking, no dropout)."""
    out = []
    with nx.no_grad():
        for i in range(0, len(pairs), batch_size):
            logits = pair_logits(pairs[i:i + batch_size], cfg, params).data.astype(np.float64)
            out.append(1.0 / (1.0 + np.exp(-logits)))
    return np.concatenate(out) if out else np.zeros(0)


def score_pair(tokens: TokenSequence, regions: RegionSet, cfg: ModelConfig, params: ParameterStore) -> float:
    return float(score_pairs([(tokens, regions)], cfg, params)[0])


# losses


def hardest_triplet_loss(positive, negatives, margin: float = 0.2) -> Tensor:
    """max(0, margin - s(pos) + max_j s(neg_j)).

    ``positive`` is a scalar or [P]; ``negatives`` is [k] or [P, k]. Batched
    input returns the per-positive losses.
    """
    positive = nx.as_tensor(positive)
    negatives = nx.as_tensor(negatives, positive)
    if negatives.ndim == 0 or negatives.shape[-1] == 0:
        raise ValueError("hardest_triplet_loss needs at least one negative")
    hardest = nx.max_(negatives, axis=-1)
    return nx.relu(hardest - positive + margin)


def bidirectional_loss(positive, image_negatives, caption_negatives, cfg: RetrievalConfig | None = None) -> Tensor:
    """Weighted sum of the per-pair hardest-negative hinges in both directions.

    Text-to-image ranks the caption's true image against negative images;
    image-to-text ranks the image's true caption against negative captions.
    """
    cfg = cfg or RetrievalConfig()
    t2i = hardest_triplet_loss(positive, image_negatives, cfg.margin).sum()
    i2t = hardest_triplet_loss(positive, caption_negatives, cfg.margin).sum()
    return t2i * cfg.text_to_image_weight + i2t * cfg.image_to_text_weight


def sample_negatives(examples: Sequence[PairExample], index: int, rng: np.random.Generator,
                     k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Indices of ``k`` negative captions and ``k`` negative images for one positive."""
    anchor = examples[index].image_id
    others = np.array([j for j, ex in enumerate(examples) if ex.image_id != anchor])
    if len(others) == 0:
        raise ValueError("no example with a different image to draw negatives from")
    replace = len(others) < k
    captions = rng.choice(others, size=k, replace=replace)
    images = rng.choice(others, size=k, replace=replace)
    return captions, images


def retrieval_loss(examples: Sequence[PairExample], indices, cfg: ModelConfig, params: ParameterStore,
                   rcfg: RetrievalConfig, rng: np.random.Generator, training: bool = False,
                   negatives=None) -> Tensor:
    """Bidirectional hardest-triplet loss for a batch of positives.

    ``negatives`` optionally supplies precomputed (caption idx, image idx)
    per positive; otherwise they are drawn from ``rng``.
    """
    k = rcfg.negatives_per_positive
    pairs = []
    for n, i in enumerate(indices):
        ex = examples[i]
        caps, imgs = negatives[n] if negatives is not None else sample_negatives(examples, i, rng, k)
        pairs.append((ex.tokens, ex.regions))
        pairs.extend((examples[j].tokens, ex.regions) for j in caps)
        pairs.extend((ex.tokens, examples[j].regions) for j in imgs)
    logits = pair_logits(pairs, cfg, params, rng, training)
    scores = nx.sigmoid(logits).reshape(len(indices), 1 + 2 * k)
    pos = nx.take(scores, (slice(None), 0))
    cap_neg = nx.take(scores, (slice(None), slice(1, 1 + k)))
    img_neg = nx.take(scores, (slice(None), slice(1 + k, 1 + 2 * k)))
    return bidirectional_loss(pos, img_neg, cap_neg, rcfg)


# metrics


def ranking(scores_row: np.ndarray) -> np.ndarray:
    """Candidate indices by descending score, ties by ascending index."""
    return np.lexsort((np.arange(len(scores_row)), -scores_row))


def recall_at_k(m: ScoreMatrix, k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    k = min(k, m.scores.shape[1])
    hits = 0
    for row, truth in zip(m.scores, m.truth):
        top = ranking(row)[:k]
        hits += bool(truth.intersection(top.tolist()))
    return hits / len(m.truth)


def retrieval_matrices(examples: Sequence[PairExample], cfg: ModelConfig, params: ParameterStore,
                       batch_size: int = 256) -> dict[str, ScoreMatrix]:
    """Score every image against every caption.

    ``sentence_retrieval``: image queries over caption candidates (an image is
    right if any of its captions is retrieved). ``image_retrieval``: caption
    queries over image candidates.
    """
    image_ids: list[str] = []
    image_regions: list[RegionSet] = []
    for ex in examples:
        if ex.image_id not in image_ids:
            image_ids.append(ex.image_id)
            image_regions.append(ex.regions)
    pairs = [(ex.tokens, reg) for reg in image_regions for ex in examples]
    scores = score_pairs(pairs, cfg, params, batch_size).reshape(len(image_ids), len(examples))
    img_pos = {img: i for i, img in enumerate(image_ids)}
    caption_truth = [{img_pos[ex.image_id]} for ex in examples]
    image_truth = [set() for _ in image_ids]
    for j, ex in enumerate(examples):
        image_truth[img_pos[ex.image_id]].add(j)
    return {
        "sentence_retrieval": ScoreMatrix(scores, image_truth),
        "image_retrieval": ScoreMatrix(scores.T.copy(), caption_truth),
    }


def evaluate_retrieval(examples: Sequence[PairExample], cfg: ModelConfig, params: ParameterStore,
                       ks: Sequence[int] = (1, 5, 10), checkpoint_id: str = "", seed: int | None = None) -> list[dict]:
    """One report record per (direction, K)."""
    report = []
    for direction, m in retrieval_matrices(examples, cfg, params).items():
        for k in ks:
            report.append({
                "direction": direction,
                "K": int(k),
                "recall": recall_at_k(m, k),
                "num_queries": int(m.scores.shape[0]),
                "num_candidates": int(m.scores.shape[1]),
                "checkpoint_id": checkpoint_id,
                "seed": seed,
            })
    return report


def zero_shot_eval(params: ParameterStore, cfg: ModelConfig, examples: Sequence[PairExample], provenance: str,
                   ks: Sequence[int] = (1, 5, 10), checkpoint_id: str = "", seed: int | None = None) -> list[dict]:
    """Retrieval with the pretrained matching head as the scorer, no fine-tuning allowed."""
    if provenance != "pretrained":
        raise ProtocolError(f"zero-shot evaluation needs a pretrained checkpoint, got one marked {provenance!r}")
    return evaluate_retrieval(examples, cfg, params, ks, checkpoint_id, seed)


def recall_table(report: list[dict]) -> dict[tuple[str, int], float]:
    return {(r["direction"], r["K"]): r["recall"] for r in report}
