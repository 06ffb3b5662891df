"""Tokenization, text/region embeddings and assembly of the joint input sequence.

Layout of one assembled sequence::

    [CLS] w_1 .. w_T [SEP] v_1 .. v_I [PAD] ..

Text rows get word + position + segment embeddings; region rows get the
projected visual feature + projected 5-d location + the [IMG] word embedding +
segment embedding. Each stream has its own layer norm.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[IMG]")
PAD, UNK, CLS, SEP, MASK, IMG = range(6)

ROLE_CLS, ROLE_TEXT, ROLE_SEP, ROLE_REGION, ROLE_PAD = range(5)
TEXT_SEGMENT, IMAGE_SEGMENT = 0, 1
MIN_TEXT_BUDGET = 16


class EmptyInputError(ValueError):
    pass


class InvalidBoxError(ValueError):
    pass


class Vocabulary:
    """Dense token -> id table whose first six ids are the structural tokens."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, words: Sequence[str]) -> "Vocabulary":
        seen = list(RESERVED)
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(seen)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class TokenSequence:
    ids: list[int]
    text: str = ""

    def __post_init__(self):
        if not self.ids:
            raise EmptyInputError("token sequence is empty")

    def __len__(self):
        return len(self.ids)


@dataclass
class RegionSet:
    features: np.ndarray          # [I, d_vis]
    boxes: np.ndarray             # [I, 4] as (x1, y1, x2, y2) pixels
    label_ids: np.ndarray         # [I]
    scores: np.ndarray            # [I]
    image_size: tuple[float, float]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.label_ids = np.asarray(self.label_ids, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.image_size = (float(self.image_size[0]), float(self.image_size[1]))
        n = len(self.boxes)
        if n < 1:
            raise EmptyInputError("region set is empty")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features {self.features.shape} do not match {n} boxes")
        if len(self.label_ids) != n or len(self.scores) != n:
            raise ValueError("label_ids/scores length does not match boxes")
        for box in self.boxes:
            check_box(box, self.image_size)

    def __len__(self):
        return len(self.boxes)

    def subset(self, index) -> "RegionSet":
        index = np.asarray(index, dtype=np.int64)
        return RegionSet(self.features[index], self.boxes[index], self.label_ids[index],
                         self.scores[index], self.image_size)

    def locations(self) -> np.ndarray:
        return np.stack([location_vector(b, self.image_size) for b in self.boxes])


def check_box(box, image_size=None) -> None:
    x1, y1, x2, y2 = (float(c) for c in box)
    if not (x2 > x1 and y2 > y1):
        raise InvalidBoxError(f"degenerate box {tuple(box)}")
    if image_size is not None:
        w, h = image_size
        if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
            raise InvalidBoxError(f"box {tuple(box)} outside image {image_size}")


_SPLIT = re.compile(r"[a-z0-9']+|;")


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Lower-case, split on whitespace and punctuation, map to ids with [UNK] fallback."""
    if not text or not text.strip():
        raise EmptyInputError("cannot tokenize empty text")
    words = [w.strip("'") for w in _SPLIT.findall(text.lower())]
    words = [w for w in words if w]
    if not words:
        raise EmptyInputError(f"no tokens in {text!r}")
    return TokenSequence(vocab.ids(words), text)


def location_vector(box, image_size) -> np.ndarray:
    """(x1/W, y1/H, x2/W, y2/H, area fraction)."""
    check_box(box)
    x1, y1, x2, y2 = (float(c) for c in box)
    w, h = float(image_size[0]), float(image_size[1])
    return np.array([x1 / w, y1 / h, x2 / w, y2 / h, (y2 - y1) * (x2 - x1) / (w * h)])


def init_embeddings(store: ParameterStore, vocab_size: int, d_vis: int, hidden: int, max_seq_len: int,
                    rng: np.random.Generator, std: float = 0.02):
    store.add("embeddings.word", rng.normal(0.0, std, (vocab_size, hidden)))
    store.add("embeddings.position", rng.normal(0.0, std, (max_seq_len, hidden)))
    store.add("embeddings.segment", np.zeros((2, hidden)))
    store.add("embeddings.text_ln.gamma", np.ones(hidden))
    store.add("embeddings.text_ln.beta", np.zeros(hidden))
    store.add("embeddings.visual.weight", rng.normal(0.0, std, (d_vis, hidden)))
    store.add("embeddings.visual.bias", np.zeros(hidden))
    store.add("embeddings.location.weight", rng.normal(0.0, std, (5, hidden)))
    store.add("embeddings.location.bias", np.zeros(hidden))
    store.add("embeddings.region_ln.gamma", np.ones(hidden))
    store.add("embeddings.region_ln.beta", np.zeros(hidden))


def text_sum(ids, params: ParameterStore) -> Tensor:
    """Pre-norm text rows: word + position + text segment. ``ids`` is [T'] or [B, T']."""
    ids = np.asarray(ids, dtype=np.int64)
    word = params["embeddings.word"]
    if ids.size and (ids.min() < 0 or ids.max() >= word.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {word.shape[0]}")
    t = ids.shape[-1]
    pos = params["embeddings.position"]
    if t > pos.shape[0]:
        raise IndexError(f"{t} positions exceed the {pos.shape[0]} position embeddings")
    return nx.take(word, ids) + nx.take(pos, slice(0, t)) + nx.take(params["embeddings.segment"], TEXT_SEGMENT)


def region_sum(features, locations, params: ParameterStore) -> Tensor:
    """Pre-norm region rows: FC(feature) + FC(location) + [IMG] + image segment."""
    features = nx.as_tensor(features)
    w = params["embeddings.visual.weight"]
    if features.shape[-1] != w.shape[0]:
        raise nx.DimensionError(f"region features have width {features.shape[-1]}, model expects {w.shape[0]}")
    vis = nx.affine(features, w, params["embeddings.visual.bias"])
    loc = nx.affine(nx.as_tensor(locations, features), params["embeddings.location.weight"],
                    params["embeddings.location.bias"])
    marker = nx.take(params["embeddings.word"], IMG) + nx.take(params["embeddings.segment"], IMAGE_SEGMENT)
    return vis + loc + marker


def embed_text(ids, params: ParameterStore) -> Tensor:
    return nx.layer_norm(text_sum(ids, params), params["embeddings.text_ln.gamma"], params["embeddings.text_ln.beta"])


def embed_regions(regions: RegionSet, params: ParameterStore) -> Tensor:
    return nx.layer_norm(region_sum(regions.features, regions.locations(), params),
                         params["embeddings.region_ln.gamma"], params["embeddings.region_ln.beta"])


def inject_references(text_rows: Tensor, references, region_rows: Tensor) -> Tensor:
    """Add region rows onto the text rows that reference them.

    ``references`` maps text row -> region row (dict or (row, region) pairs).
    Works on pre-norm sums; the caller applies the text layer norm afterwards.
    """
    refs = list(references.items()) if isinstance(references, dict) else list(references)
    if not refs:
        return text_rows
    n_text, n_reg = text_rows.shape[-2], region_rows.shape[-2]
    select = np.zeros((n_text, n_reg), dtype=text_rows.dtype)
    for row, region in refs:
        if not 0 <= region < n_reg:
            raise ReferenceError(f"text row {row} references missing region {region}")
        select[row, region] = 1.0
    return text_rows + nx.matmul(nx.Tensor(select, dtype=text_rows.dtype), region_rows)


# assembly


def plan_lengths(num_tokens: int, num_regions: int, max_seq_len: int) -> tuple[int, int]:
    """How many text tokens and regions survive truncation.

    Text keeps max_seq_len - I - 2 tokens but never fewer than 16 (or all
    that fit); the regions take whatever budget is left.
    """
    room = max_seq_len - 2
    text_budget = max(room - num_regions, min(MIN_TEXT_BUDGET, room))
    t = min(num_tokens, text_budget)
    i = min(num_regions, room - t)
    return t, i


@dataclass
class SequenceItem:
    """One (text, regions) sequence ready to be batched.

    ``references`` pairs a content-token index with a region index whose
    visual embedding is added to that token.
    """

    token_ids: list[int]
    regions: RegionSet | None
    references: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class Batch:
    text_ids: np.ndarray        # [B, Lt] with [CLS]/[SEP], [PAD]-filled
    text_len: np.ndarray        # [B] rows used in text_ids (incl. [CLS]/[SEP])
    features: np.ndarray        # [B, Lr, d_vis]
    locations: np.ndarray       # [B, Lr, 5]
    region_labels: np.ndarray   # [B, Lr]
    region_count: np.ndarray    # [B]
    reference_matrix: np.ndarray | None  # [B, Lt, Lr] or None
    gather: np.ndarray          # [B, n] rows of concat(text, regions) per position
    mask: np.ndarray            # [B, n] True for real positions
    roles: np.ndarray           # [B, n]

    def __len__(self):
        return len(self.text_len)

    @property
    def seq_len(self) -> int:
        return self.mask.shape[1]

    def text_position(self, b: int, token_index: int) -> int:
        return 1 + token_index

    def region_position(self, b: int, region_index: int) -> int:
        return int(self.text_len[b]) + region_index


def collate(items: Sequence[SequenceItem], max_seq_len: int, d_vis: int) -> Batch:
    """Truncate, lay out and pad a list of sequences into one batch."""
    plans = []
    for item in items:
        n_reg = len(item.regions) if item.regions is not None else 0
        if not item.token_ids and n_reg == 0:
            raise EmptyInputError("sequence has neither tokens nor regions")
        plans.append(plan_lengths(len(item.token_ids), n_reg, max_seq_len))
    b = len(items)
    lt = max(t for t, _ in plans) + 2
    lr = max(1, max(i for _, i in plans))
    n = max(t + 2 + i for t, i in plans)
    text_ids = np.full((b, lt), PAD, dtype=np.int64)
    text_len = np.zeros(b, dtype=np.int64)
    features = np.zeros((b, lr, d_vis), dtype=np.float32)
    locations = np.zeros((b, lr, 5), dtype=np.float64)
    locations[:, :] = (0.0, 0.0, 1.0, 1.0, 1.0)
    labels = np.zeros((b, lr), dtype=np.int64)
    counts = np.zeros(b, dtype=np.int64)
    refs = None
    gather = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    roles = np.full((b, n), ROLE_PAD, dtype=np.int64)
    for k, (item, (t, i)) in enumerate(zip(items, plans)):
        text_ids[k, 0] = CLS
        text_ids[k, 1:t + 1] = item.token_ids[:t]
        text_ids[k, t + 1] = SEP
        text_len[k] = t + 2
        if i:
            reg = item.regions
            if reg.features.shape[1] != d_vis:
                raise nx.DimensionError(f"region features have width {reg.features.shape[1]}, expected {d_vis}")
            features[k, :i] = reg.features[:i]
            locations[k, :i] = reg.locations()[:i]
            labels[k, :i] = reg.label_ids[:i]
        counts[k] = i
        for tok, region in item.references:
            if not 0 <= region < (len(item.regions) if item.regions is not None else 0):
                raise ReferenceError(f"token {tok} references missing region {region}")
            if tok < t and region < i:
                if refs is None:
                    refs = np.zeros((b, lt, lr), dtype=np.float32)
                refs[k, 1 + tok, region] = 1.0
        used = t + 2 + i
        gather[k, :t + 2] = np.arange(t + 2)
        gather[k, t + 2:used] = lt + np.arange(i)
        gather[k, used:] = lt - 1  # any row will do; padded positions are masked
        mask[k, :used] = True
        roles[k, 0] = ROLE_CLS
        roles[k, 1:t + 1] = ROLE_TEXT
        roles[k, t + 1] = ROLE_SEP
        roles[k, t + 2:used] = ROLE_REGION
    return Batch(text_ids, text_len, features, locations, labels, counts, refs, gather, mask, roles)


def embed_batch(batch: Batch, params: ParameterStore) -> Tensor:
    """Embedded [B, n, d] matrix for a collated batch."""
    text = text_sum(batch.text_ids, params)
    regions = region_sum(batch.features, batch.locations, params)
    if batch.reference_matrix is not None:
        text = text + nx.matmul(nx.Tensor(batch.reference_matrix, dtype=text.dtype), regions)
    text = nx.layer_norm(text, params["embeddings.text_ln.gamma"], params["embeddings.text_ln.beta"])
    regions = nx.layer_norm(regions, params["embeddings.region_ln.gamma"], params["embeddings.region_ln.beta"])
    joint = nx.concat([text, regions], axis=1)
    rows = np.arange(len(batch))[:, None]
    return nx.take(joint, (rows, batch.gather))


@dataclass
class AssembledInput:
    embedded: Tensor            # [n, d]
    mask: np.ndarray            # [n]
    roles: np.ndarray           # [n]
    token_ids: np.ndarray       # [n], -1 where the position is not text
    region_index: np.ndarray    # [n], -1 where the position is not a region


def assemble(tokens: TokenSequence | None, regions: RegionSet | None, params: ParameterStore,
             max_seq_len: int, pad_to: int | None = None) -> AssembledInput:
    ids = list(tokens.ids) if tokens is not None else []
    d_vis = params["embeddings.visual.weight"].shape[0]
    batch = collate([SequenceItem(ids, regions)], max_seq_len, d_vis)
    embedded = embed_batch(batch, params)
    n = batch.seq_len
    mask, roles = batch.mask[0], batch.roles[0]
    if pad_to is not None and pad_to > n:
        extra = pad_to - n
        embedded = nx.concat([embedded, nx.Tensor(np.zeros((1, extra, embedded.shape[-1])), dtype=embedded.dtype)],
                             axis=1)
        mask = np.concatenate([mask, np.zeros(extra, dtype=bool)])
        roles = np.concatenate([roles, np.full(extra, ROLE_PAD)])
    n = len(mask)
    token_ids = np.full(n, -1, dtype=np.int64)
    t = int(batch.text_len[0])
    token_ids[:t] = batch.text_ids[0, :t]
    region_index = np.full(n, -1, dtype=np.int64)
    region_index[t:t + int(batch.region_count[0])] = np.arange(int(batch.region_count[0]))
    return AssembledInput(embedded.reshape(n, -1), mask, roles, token_ids, region_index)


def with_features(regions: RegionSet, features: np.ndarray) -> RegionSet:
    return replace(regions, features=features)
