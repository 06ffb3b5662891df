"""Visual commonsense reasoning: box alignment, 4-way choice scoring and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import SynthConfig, concept_names, concept_prototypes, parse_regions, random_box, region_payload
from .embeddings import RegionSet, SequenceItem, TokenSequence, Vocabulary, check_box, collate
from .embeddings import inject_references  # noqa: F401  (part of this module's surface)
from .model import ModelConfig, cls_states, encode, head
from .numerics import ParameterStore, Tensor

QA, QAR = "QA", "QAR"
NUM_CHOICES = 4
SEPARATOR = ";"


class BudgetError(ValueError):
    pass


@dataclass
class VcrExample:
    question: list[str]
    answers: list[list[str]]
    rationales: list[list[str]]
    answer_label: int
    rationale_label: int
    gt_boxes: list[tuple[tuple[float, float, float, float], int]]
    references: list[tuple[str, int, int]] = field(default_factory=list)   # (segment, token_pos, object_index)
    regions: RegionSet | None = None
    image_id: str = ""

    def __post_init__(self):
        if len(self.answers) != NUM_CHOICES or len(self.rationales) != NUM_CHOICES:
            raise ValueError("a VCR example has exactly four answers and four rationales")
        for label in (self.answer_label, self.rationale_label):
            if label is not None and not 0 <= label < NUM_CHOICES:
                raise IndexError(f"label {label} outside [0, 4)")
        objects = {obj for _, obj in self.gt_boxes}
        for seg, pos, obj in self.references:
            if obj not in objects:
                raise ReferenceError(f"reference to object {obj} with no ground-truth box")

    def segment(self, name: str) -> list[str]:
        if name == "q":
            return self.question
        kind, i = name[0], int(name[1:])
        return (self.answers if kind == "a" else self.rationales)[i]


@dataclass
class BoxMatch:
    region_index: int
    iou: float


def iou(box_a, box_b) -> float:
    check_box(box_a)
    check_box(box_b)
    ax1, ay1, ax2, ay2 = (float(c) for c in box_a)
    bx1, by1, bx2, by2 = (float(c) for c in box_b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def match_boxes(gt_boxes: Sequence, regions: RegionSet, budget: int = 100) -> tuple[list[BoxMatch], RegionSet]:
    """Pick the best-overlapping extracted region for every ground-truth box.

    Matched regions lead the returned set in ground-truth order (ties in IoU
    go to the lower region index); the remaining slots are filled with the
    unmatched regions in descending detector score until ``budget``.
    """
    if len(gt_boxes) > budget:
        raise BudgetError(f"{len(gt_boxes)} ground-truth boxes exceed the region budget {budget}")
    matches = []
    for box in gt_boxes:
        overlaps = [iou(box, r) for r in regions.boxes]
        best = int(np.argmax(overlaps))
        matches.append(BoxMatch(best, float(overlaps[best])))
    used = {m.region_index for m in matches}
    rest = [i for i in np.lexsort((np.arange(len(regions)), -regions.scores)) if i not in used]
    order = [m.region_index for m in matches] + rest[: budget - len(matches)]
    return matches, regions.subset(order)


def build_choice_input(example: VcrExample, mode: str, choice: int,
                       vocab: Vocabulary) -> tuple[TokenSequence, dict[int, int]]:
    """Token sequence ``q ; a`` (QA) or ``q ; a* ; r`` (QAR) and its object references.

    The reference map sends token positions in the concatenation to object
    indices.
    """
    if mode == QA:
        parts = [("q", example.question), (f"a{choice}", example.answers[choice])]
    elif mode == QAR:
        if example.answer_label is None:
            raise ValueError("QA->R input needs the correct answer")
        star = example.answer_label
        parts = [("q", example.question), (f"a{star}", example.answers[star]),
                 (f"r{choice}", example.rationales[choice])]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    words: list[str] = []
    offsets = {}
    for k, (name, seg) in enumerate(parts):
        if k:
            words.append(SEPARATOR)
        offsets[name] = len(words)
        words.extend(seg)
    refs = {}
    for seg, pos, obj in example.references:
        if seg in offsets:
            refs[offsets[seg] + pos] = obj
    return TokenSequence(vocab.ids(words), " ".join(words)), refs


@dataclass
class PreparedVcr:
    qa: list[SequenceItem]
    qar: list[SequenceItem]
    answer_label: int
    rationale_label: int
    matches: list[BoxMatch]


def prepare(example: VcrExample, vocab: Vocabulary, budget: int = 100) -> PreparedVcr:
    matches, regions = match_boxes([b for b, _ in example.gt_boxes], example.regions, budget)
    slot = {obj: k for k, (_, obj) in enumerate(example.gt_boxes)}

    def items(mode):
        out = []
        for c in range(NUM_CHOICES):
            tokens, refs = build_choice_input(example, mode, c, vocab)
            out.append(SequenceItem(list(tokens.ids), regions, [(pos, slot[obj]) for pos, obj in refs.items()]))
        return out

    return PreparedVcr(items(QA), items(QAR), example.answer_label, example.rationale_label, matches)


def choice_logits(prepared: Sequence[PreparedVcr], mode: str, cfg: ModelConfig, params: ParameterStore,
                  rng=None, training: bool = False) -> Tensor:
    """[E, 4] logits; each choice is encoded on its own and projected from [CLS]."""
    items = [it for p in prepared for it in (p.qa if mode == QA else p.qar)]
    batch = collate(items, cfg.encoder.max_seq_len, cfg.d_vis)
    out = head(cls_states(encode(batch, cfg, params, rng, training)), "vcr", params)
    return out.reshape(len(prepared), NUM_CHOICES)


def score_choices(example: VcrExample, mode: str, cfg: ModelConfig, params: ParameterStore,
                  vocab: Vocabulary, budget: int = 100) -> np.ndarray:
    with nx.no_grad():
        return choice_logits([prepare(example, vocab, budget)], mode, cfg, params).data[0].copy()


def vcr_loss(logits: Tensor, correct, weights=None) -> Tensor:
    """Cross-entropy over the four choices; ``logits`` is [4] or [E, 4]."""
    logits = nx.as_tensor(logits)
    if logits.shape[-1] != NUM_CHOICES:
        raise nx.DimensionError(f"expected {NUM_CHOICES} choice logits, got {logits.shape}")
    if logits.ndim == 1:
        logits = logits.reshape(1, NUM_CHOICES)
        correct = [correct]
    return nx.cross_entropy_from_logits(logits, np.atleast_1d(correct), weights)


def training_loss(prepared: Sequence[PreparedVcr], cfg: ModelConfig, params: ParameterStore,
                  rng=None, training: bool = False) -> Tensor:
    """Q->A cross-entropy plus QA->R cross-entropy, each averaged over examples."""
    qa = vcr_loss(choice_logits(prepared, QA, cfg, params, rng, training), [p.answer_label for p in prepared])
    qar = vcr_loss(choice_logits(prepared, QAR, cfg, params, rng, training), [p.rationale_label for p in prepared])
    return qa + qar


def joint_accuracy(pred_answers, pred_rationales, answers, rationales) -> dict[str, float]:
    a_ok = np.asarray(pred_answers) == np.asarray(answers)
    r_ok = np.asarray(pred_rationales) == np.asarray(rationales)
    return {"Q->A": float(a_ok.mean()), "QA->R": float(r_ok.mean()), "Q->AR": float((a_ok & r_ok).mean())}


def predict(prepared: Sequence[PreparedVcr], cfg: ModelConfig, params: ParameterStore,
            batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    answers, rationales = [], []
    with nx.no_grad():
        for i in range(0, len(prepared), batch_size):
            chunk = prepared[i:i + batch_size]
            answers.append(np.argmax(choice_logits(chunk, QA, cfg, params).data, axis=1))
            rationales.append(np.argmax(choice_logits(chunk, QAR, cfg, params).data, axis=1))
    return np.concatenate(answers), np.concatenate(rationales)


def evaluate_vcr(examples: Sequence[VcrExample], cfg: ModelConfig, params: ParameterStore, vocab: Vocabulary,
                 budget: int = 100, prepared: Sequence[PreparedVcr] | None = None) -> dict[str, float]:
    """Q->A, QA->R (conditioned on the correct answer) and Q->AR accuracies."""
    prepared = prepared if prepared is not None else [prepare(ex, vocab, budget) for ex in examples]
    pa, pr = predict(prepared, cfg, params)
    return joint_accuracy(pa, pr, [p.answer_label for p in prepared], [p.rationale_label for p in prepared])


# records


def vcr_to_json(ex: VcrExample) -> dict:
    return {
        "image_id": ex.image_id,
        "question_tokens": ex.question,
        "answers": ex.answers,
        "rationales": ex.rationales,
        "answer_label": ex.answer_label,
        "rationale_label": ex.rationale_label,
        "gt_boxes": [{"box": list(map(float, b)), "object_index": int(o)} for b, o in ex.gt_boxes],
        "references": [{"segment": s, "token_pos": int(p), "object_index": int(o)} for s, p, o in ex.references],
        "image_size": list(ex.regions.image_size),
        "regions": region_payload(ex.regions),
    }


def vcr_from_json(raw: dict, d_vis: int, where: str = "") -> VcrExample:
    return VcrExample(
        question=list(raw["question_tokens"]),
        answers=[list(a) for a in raw["answers"]],
        rationales=[list(r) for r in raw["rationales"]],
        answer_label=raw["answer_label"],
        rationale_label=raw["rationale_label"],
        gt_boxes=[(tuple(g["box"]), int(g["object_index"])) for g in raw["gt_boxes"]],
        references=[(r["segment"], int(r["token_pos"]), int(r["object_index"])) for r in raw["references"]],
        regions=parse_regions(raw, d_vis, None, where),
        image_id=str(raw.get("image_id", "")),
    )


def write_vcr(examples: Sequence[VcrExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(vcr_to_json(ex)) + "\n")


def load_vcr(path, d_vis: int) -> list[VcrExample]:
    from .data import ParseError

    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(vcr_from_json(json.loads(line), d_vis, f"{path}:{lineno}"))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return out


def _jitter(box, rng, image_size, scale=0.05):
    w, h = image_size
    x1, y1, x2, y2 = box
    dx, dy = scale * (x2 - x1), scale * (y2 - y1)
    x1 = min(max(0.0, x1 + rng.uniform(-dx, dx)), w)
    y1 = min(max(0.0, y1 + rng.uniform(-dy, dy)), h)
    x2 = max(min(w, x2 + rng.uniform(-dx, dx)), x1 + 1.0)
    y2 = max(min(h, y2 + rng.uniform(-dy, dy)), y1 + 1.0)
    return (float(x1), float(y1), float(x2), float(y2))


def generate_synthetic_vcr(cfg: SynthConfig, count: int, rng: np.random.Generator | None = None) -> list[VcrExample]:
    """Questions about a referenced object whose correct answer names its concept.

    Wrong answers and rationales name concepts absent from the image. Correct
    answer and rationale positions are balanced over the four slots.
    """
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 11])
    if cfg.num_concepts < cfg.max_regions + NUM_CHOICES - 1:
        raise ValueError("num_concepts too small to draw three absent distractor concepts")
    names = concept_names(cfg.num_concepts)
    prototypes = concept_prototypes(cfg)
    answer_slots = rng.permutation(np.arange(count) % NUM_CHOICES)
    rationale_slots = rng.permutation(np.arange(count) % NUM_CHOICES)
    out = []
    for e in range(count):
        k = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
        present = [int(c) for c in rng.choice(cfg.num_concepts, size=k, replace=False)]
        boxes = [random_box(rng, cfg.image_size) for _ in present]
        clutter = int(rng.integers(len(present)))
        concepts = present + [present[clutter]]
        boxes.append(random_box(rng, cfg.image_size))
        feats = prototypes[concepts] + cfg.noise * rng.normal(0.0, 1.0, (len(concepts), cfg.d_vis))
        order = rng.permutation(len(concepts))
        regions = RegionSet(feats[order].astype(np.float32), np.asarray(boxes)[order], np.asarray(concepts)[order],
                            rng.uniform(0.3, 1.0, len(concepts)), cfg.image_size)
        gt = [(_jitter(boxes[i], rng, cfg.image_size), i) for i in range(len(present))]
        target = present[0]
        absent = [c for c in range(cfg.num_concepts) if c not in present]

        def options(slot):
            wrong = [int(c) for c in rng.choice(absent, size=NUM_CHOICES - 1, replace=False)]
            return wrong[:slot] + [target] + wrong[slot:]

        a_label, r_label = int(answer_slots[e]), int(rationale_slots[e])
        answers = [["it", "is", "a", names[c]] for c in options(a_label)]
        rationales = [["because", "the", names[c], "is", "visible"] for c in options(r_label)]
        out.append(VcrExample(["what", "is", "the", "object", "?"], answers, rationales, a_label, r_label,
                              gt, [("q", 3, 0)], regions, f"vcr{e:05d}"))
    return out
