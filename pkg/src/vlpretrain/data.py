"""Pair records, file formats, batching and the synthetic concept corpus."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .embeddings import RegionSet, SequenceItem, TokenSequence, Vocabulary, collate, tokenize


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class PairRecord:
    pair_id: str
    image_id: str
    caption: str
    regions: RegionSet

    def __post_init__(self):
        if not self.caption or not self.caption.strip():
            raise SchemaError(f"pair {self.pair_id}: empty caption")


@dataclass
class PairExample:
    """A tokenized record, the unit the training code works on."""

    pair_id: str
    image_id: str
    tokens: TokenSequence
    regions: RegionSet


def tokenize_records(records: Sequence[PairRecord], vocab: Vocabulary) -> list[PairExample]:
    return [PairExample(r.pair_id, r.image_id, tokenize(r.caption, vocab), r.regions) for r in records]


@dataclass
class Manifest:
    d_vis: int
    num_labels: int
    vocab: str
    corpus: str = "corpus"
    records: int = 0
    pairs: str = "pairs.jsonl"
    features: str | None = None
    vcr: str | None = None
    region_cap: int = 8
    score_threshold: float = 0.2
    root: Path = field(default=Path("."), repr=False, compare=False)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        raw = json.loads(path.read_text())
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw and k != "root"}
        missing = {"d_vis", "num_labels", "vocab"} - set(known)
        if missing:
            raise SchemaError(f"manifest {path} lacks {sorted(missing)}")
        return cls(**known, root=path.parent)

    def save(self, path) -> None:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "root"}
        Path(path).write_text(json.dumps(d, indent=2) + "\n")

    def resolve(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.load(self.resolve(self.vocab))


# region selection


def select_regions(regions: RegionSet, cap: int = 100, threshold: float = 0.2) -> RegionSet:
    """Keep at most ``cap`` regions.

    Regions scoring above ``threshold`` come first; if fewer than ``cap`` of
    them exist the rest of the budget goes to the best remaining regions.
    Both tiers are ranked by score, so the result is the top-``cap`` by score,
    returned in the original order.
    """
    if len(regions) <= cap:
        return regions
    eligible = regions.scores > threshold
    # stable sort: eligible first, then by descending score, then by index
    order = np.lexsort((np.arange(len(regions)), -regions.scores, ~eligible))
    kept = np.sort(order[:cap])
    return regions.subset(kept)


def keep_fraction(pair_id: str, fraction: float) -> bool:
    """Deterministic subsampling keyed on the pair id."""
    if fraction >= 1.0:
        return True
    digest = hashlib.sha256(pair_id.encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0 ** 64 < fraction


# pair files


def region_payload(regions: RegionSet, sidecar=None) -> list[dict]:
    out = []
    for k in range(len(regions)):
        entry = {
            "box": [float(c) for c in regions.boxes[k]],
            "label_id": int(regions.label_ids[k]),
            "score": float(regions.scores[k]),
        }
        row = regions.features[k].astype("<f4")
        if sidecar is None:
            entry["feature"] = [float(v) for v in row]
        else:
            entry["feature_ref"] = {"offset": sidecar.tell() // 4, "count": int(row.size)}
            sidecar.write(row.tobytes())
        out.append(entry)
    return out


def write_pairs(records: Sequence[PairRecord], path, sidecar_path=None) -> None:
    sidecar = open(sidecar_path, "wb") if sidecar_path is not None else None
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                rec = {
                    "pair_id": r.pair_id,
                    "image_id": r.image_id,
                    "caption": r.caption,
                    "image_size": list(r.regions.image_size),
                    "regions": region_payload(r.regions, sidecar),
                }
                fh.write(json.dumps(rec) + "\n")
    finally:
        if sidecar is not None:
            sidecar.close()


def parse_regions(raw: dict, d_vis: int, sidecar: np.ndarray | None, where: str) -> RegionSet:
    regs = raw["regions"]
    if not regs:
        raise SchemaError(f"{where}: no regions")
    feats = []
    for reg in regs:
        if "feature" in reg:
            feat = np.asarray(reg["feature"], dtype=np.float32)
        elif "feature_ref" in reg:
            if sidecar is None:
                raise SchemaError(f"{where}: feature_ref without a feature sidecar")
            ref = reg["feature_ref"]
            feat = sidecar[ref["offset"]: ref["offset"] + ref["count"]]
        else:
            raise SchemaError(f"{where}: region without feature")
        if feat.shape != (d_vis,):
            raise SchemaError(f"{where}: feature width {feat.shape[0]} but manifest declares d_vis={d_vis}")
        feats.append(feat)
    return RegionSet(np.stack(feats), [reg["box"] for reg in regs], [reg["label_id"] for reg in regs],
                     [reg["score"] for reg in regs], tuple(raw["image_size"]))


def _read_sidecar(manifest: Manifest | None) -> np.ndarray | None:
    if manifest is None or not manifest.features:
        return None
    return np.fromfile(manifest.resolve(manifest.features), dtype="<f4")


def load_pairs(path, manifest: Manifest, cap: int | None = None, fraction: float = 1.0,
               apply_cap: bool = True) -> list[PairRecord]:
    """Read and validate a pair file, applying the region-count policy."""
    cap = manifest.region_cap if cap is None else cap
    sidecar = _read_sidecar(manifest)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                raw = json.loads(line)
                regions = parse_regions(raw, manifest.d_vis, sidecar, where)
                rec = PairRecord(str(raw["pair_id"]), str(raw["image_id"]), raw["caption"], regions)
            except SchemaError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{where}: {exc}") from exc
            if np.any(rec.regions.label_ids >= manifest.num_labels) or np.any(rec.regions.label_ids < 0):
                raise SchemaError(f"{where}: label id outside [0, {manifest.num_labels})")
            if not keep_fraction(rec.pair_id, fraction):
                continue
            if apply_cap:
                rec.regions = select_regions(rec.regions, cap, manifest.score_threshold)
            records.append(rec)
    return records


# batching


def example_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys), so sampling does not depend on processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None, shuffle: bool = True) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(examples: Sequence[PairExample], batch_size: int, max_seq_len: int, d_vis: int,
                 rng: np.random.Generator | None = None, shuffle: bool = True) -> Iterator[tuple[np.ndarray, object]]:
    """Yield (example indices, padded Batch) in seeded order."""
    for idx in batch_indices(len(examples), batch_size, rng, shuffle):
        items = [SequenceItem(list(examples[i].tokens.ids), examples[i].regions) for i in idx]
        yield idx, collate(items, max_seq_len, d_vis)


# synthetic corpus

CONCEPT_NAMES = (
    "dog", "cat", "car", "tree", "horse", "boat", "chair", "cup", "bird", "bike", "lamp", "clock",
    "train", "sheep", "kite", "bench", "bus", "apple", "phone", "book", "vase", "bear", "zebra", "pizza",
)
FILLER = ("a", "photo", "of", "and", "there", "is", "in", "the", "scene", "with", "near", "picture",
          "what", "object", "it", "because", "visible", "?", ";")
TEMPLATES = (
    "a photo of a {}",
    "there is a {} in the scene",
    "a picture with a {}",
)


@dataclass
class SynthConfig:
    num_concepts: int = 8
    vocab_size: int = 48
    d_vis: int = 16
    min_regions: int = 2
    max_regions: int = 5
    pairs: int = 32
    seed: int = 0
    noise: float = 0.1
    image_size: tuple[int, int] = (640, 480)
    templates: tuple[str, ...] = TEMPLATES
    unique_concept_sets: bool = True

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.templates = tuple(self.templates)
        if self.num_concepts > self.vocab_size - 6 - len(FILLER):
            raise ValueError("vocab_size too small for the concepts and filler words")
        if not 1 <= self.min_regions <= self.max_regions <= self.num_concepts:
            raise ValueError("need 1 <= min_regions <= max_regions <= num_concepts")


def concept_names(n: int) -> list[str]:
    return [CONCEPT_NAMES[i] if i < len(CONCEPT_NAMES) else f"thing{i}" for i in range(n)]


def synthetic_vocabulary(cfg: SynthConfig) -> Vocabulary:
    words = list(FILLER) + concept_names(cfg.num_concepts)
    k = 0
    while len(words) + 6 < cfg.vocab_size:
        words.append(f"word{k}")
        k += 1
    return Vocabulary.build(words)


def concept_prototypes(cfg: SynthConfig) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 7]).normal(0.0, 1.0, (cfg.num_concepts, cfg.d_vis))


def random_box(rng: np.random.Generator, image_size) -> list[float]:
    w, h = image_size
    bw, bh = rng.uniform(0.15, 0.6) * w, rng.uniform(0.15, 0.6) * h
    x1, y1 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
    return [float(x1), float(y1), float(x1 + bw), float(y1 + bh)]


def synthetic_regions(concepts: Sequence[int], cfg: SynthConfig, rng: np.random.Generator,
                      prototypes: np.ndarray) -> RegionSet:
    feats = prototypes[list(concepts)] + cfg.noise * rng.normal(0.0, 1.0, (len(concepts), cfg.d_vis))
    boxes = [random_box(rng, cfg.image_size) for _ in concepts]
    scores = rng.uniform(0.3, 1.0, len(concepts))
    return RegionSet(feats.astype(np.float32), boxes, list(concepts), scores, cfg.image_size)


def caption_for(concepts: Sequence[int], cfg: SynthConfig, rng: np.random.Generator) -> str:
    names = concept_names(cfg.num_concepts)
    template = cfg.templates[int(rng.integers(len(cfg.templates)))]
    return template.format(" and a ".join(names[c] for c in concepts))


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator | None = None) -> list[PairRecord]:
    """Images of 2-5 concept regions with template captions naming those concepts.

    Region features are a per-concept prototype plus Gaussian noise; the label
    of a region is its concept. With ``unique_concept_sets`` no two images share
    the same set of concepts, though concepts recur across images.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    prototypes = concept_prototypes(cfg)
    distinct = sum(math.comb(cfg.num_concepts, k) for k in range(cfg.min_regions, cfg.max_regions + 1))
    if cfg.unique_concept_sets and cfg.pairs > distinct:
        raise ValueError(f"only {distinct} distinct concept sets exist for {cfg.pairs} pairs; raise num_concepts")
    seen: set[frozenset] = set()
    records = []
    attempts = 0
    while len(records) < cfg.pairs:
        attempts += 1
        if attempts > 1000 * cfg.pairs:
            raise ValueError("cannot draw enough distinct concept sets; raise num_concepts")
        k = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
        concepts = [int(c) for c in rng.choice(cfg.num_concepts, size=k, replace=False)]
        key = frozenset(concepts)
        if cfg.unique_concept_sets and key in seen:
            continue
        seen.add(key)
        idx = len(records)
        records.append(PairRecord(f"p{idx:05d}", f"img{idx:05d}", caption_for(concepts, cfg, rng),
                                  synthetic_regions(concepts, cfg, rng, prototypes)))
    return records


def write_corpus(records: Sequence[PairRecord], cfg: SynthConfig, out_dir, name: str = "synthetic",
                 vcr_records=None) -> Manifest:
    """Write pairs.jsonl, vocab.txt and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synthetic_vocabulary(cfg).save(out / "vocab.txt")
    write_pairs(records, out / "pairs.jsonl")
    manifest = Manifest(d_vis=cfg.d_vis, num_labels=cfg.num_concepts, vocab="vocab.txt", corpus=name,
                        records=len(records), region_cap=max(8, cfg.max_regions), root=out)
    if vcr_records is not None:
        from .vcr import write_vcr

        write_vcr(vcr_records, out / "vcr.jsonl")
        manifest.vcr = "vcr.jsonl"
    manifest.save(out / "manifest.json")
    return manifest
