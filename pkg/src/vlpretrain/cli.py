"""Command-line entry point: ``vlpretrain <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import retrieval, vcr
from .checkpoint import load_checkpoint, resolve_path
from .data import (Manifest, SynthConfig, generate_synthetic, load_pairs, synthetic_vocabulary, tokenize_records,
                   write_corpus)
from .diagnostics import LOSSES, run_grad_check
from .model import ModelConfig
from .training import FINETUNE_RETRIEVAL, FINETUNE_VCR, PRETRAIN, TrainConfig, train

log = logging.getLogger("vlpretrain")

GRAD_TOLERANCE = 1e-4

# desk-scale defaults for the fine-tuning commands when no --config is given
FINETUNE_DEFAULTS = {
    FINETUNE_RETRIEVAL: dict(base_lr=2e-4, epochs=20, batch_size=8),
    FINETUNE_VCR: dict(base_lr=5e-4, epochs=6, batch_size=8),
}


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SystemExit(f"{path}: not valid JSON ({exc})")


def synth_config(raw: dict) -> tuple[SynthConfig, int]:
    """SynthConfig from a JSON dict; the optional ``vcr_examples`` key sizes a VCR file."""
    raw = dict(raw)
    n_vcr = int(raw.pop("vcr_examples", 0))
    return SynthConfig(**raw), n_vcr


def load_corpus(path, fraction: float = 1.0):
    """(manifest, vocabulary, tokenized examples) from a corpus directory or manifest file."""
    manifest = Manifest.load(path)
    vocab = manifest.vocabulary()
    records = load_pairs(manifest.resolve(manifest.pairs), manifest, fraction=fraction)
    return manifest, vocab, tokenize_records(records, vocab)


def train_config(args, task: str, encoder=None) -> TrainConfig:
    raw = read_json(args.config) if getattr(args, "config", None) else dict(FINETUNE_DEFAULTS.get(task, {}))
    raw["task"] = task
    if encoder is not None:
        raw["encoder"] = encoder.__dict__
    cfg = TrainConfig.from_dict(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "fraction", None) is not None:
        cfg.fraction = args.fraction
    cfg.out_dir = args.out
    return cfg


def cmd_pretrain(args) -> int:
    cfg = train_config(args, PRETRAIN)
    if args.data == "synthetic":
        synth = SynthConfig(seed=cfg.seed)
        vocab = synthetic_vocabulary(synth)
        examples = tokenize_records(generate_synthetic(synth), vocab)
        d_vis, num_labels = synth.d_vis, synth.num_concepts
    else:
        manifest, vocab, examples = load_corpus(args.data, cfg.fraction)
        d_vis, num_labels = manifest.d_vis, manifest.num_labels
    model = ModelConfig(len(vocab), d_vis, num_labels, cfg.encoder)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(args.out) / "config.json")
    result = train(cfg, model, examples)
    print(json.dumps({"checkpoint": str(Path(args.out) / "final.ckpt"), "optimizer_steps": result.optimizer_steps,
                      "final_loss": result.log.steps[-1]["loss"] if result.log.steps else None}))
    return 0


def cmd_finetune_retrieval(args) -> int:
    ckpt = load_checkpoint(args.init)
    cfg = train_config(args, FINETUNE_RETRIEVAL, ckpt.config.encoder)
    _, _, examples = load_corpus(args.data, cfg.fraction)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(args.out) / "config.json")
    result = train(cfg, ckpt.config, examples, params=ckpt.params)
    print(json.dumps({"checkpoint": str(Path(args.out) / "final.ckpt"), "optimizer_steps": result.optimizer_steps}))
    return 0


def load_vcr_corpus(path):
    manifest = Manifest.load(path)
    if not manifest.vcr:
        raise SystemExit(f"{path}: manifest names no VCR file")
    vocab = manifest.vocabulary()
    examples = vcr.load_vcr(manifest.resolve(manifest.vcr), manifest.d_vis)
    return vocab, examples


def cmd_finetune_vcr(args) -> int:
    ckpt = load_checkpoint(args.init)
    cfg = train_config(args, FINETUNE_VCR, ckpt.config.encoder)
    vocab, examples = load_vcr_corpus(args.data)
    prepared = [vcr.prepare(ex, vocab, cfg.region_budget) for ex in examples]
    Path(args.out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(args.out) / "config.json")
    result = train(cfg, ckpt.config, prepared, params=ckpt.params)
    print(json.dumps({"checkpoint": str(Path(args.out) / "final.ckpt"), "optimizer_steps": result.optimizer_steps}))
    return 0


def cmd_eval_retrieval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _, _, examples = load_corpus(args.data)
    ck_id = str(resolve_path(args.ckpt))
    ks = tuple(args.k)
    if args.zero_shot:
        try:
            report = retrieval.zero_shot_eval(ckpt.params, ckpt.config, examples, ckpt.provenance, ks, ck_id,
                                              args.seed)
        except retrieval.ProtocolError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    else:
        report = retrieval.evaluate_retrieval(examples, ckpt.config, ckpt.params, ks, ck_id, args.seed)
    for record in report:
        print(json.dumps(record))
    return 0


def cmd_eval_vcr(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    vocab, examples = load_vcr_corpus(args.data)
    scores = vcr.evaluate_vcr(examples, ckpt.config, ckpt.params, vocab, args.budget)
    print(json.dumps({"checkpoint_id": str(resolve_path(args.ckpt)), "num_examples": len(examples), **scores}))
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg, n_vcr = synth_config(read_json(args.config))
    records = generate_synthetic(cfg)
    vcr_records = vcr.generate_synthetic_vcr(cfg, n_vcr) if n_vcr else None
    manifest = write_corpus(records, cfg, args.out, vcr_records=vcr_records)
    print(json.dumps({"out": str(Path(args.out)), "records": manifest.records, "vcr_examples": n_vcr}))
    return 0


def cmd_grad_check(args) -> int:
    err = run_grad_check(args.loss, args.seed, None if args.all_coords else args.coords)
    ok = err <= GRAD_TOLERANCE
    print(json.dumps({"loss": args.loss, "seed": args.seed, "max_rel_error": err, "tolerance": GRAD_TOLERANCE,
                      "pass": ok}))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlpretrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch summaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="joint MLM + MOC + VLM pretraining")
    p.add_argument("--data", required=True, help="corpus directory, manifest file, or 'synthetic'")
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--fraction", type=float, help="keep this fraction of pairs, chosen by hash of pair_id")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    for name, func in (("finetune-retrieval", cmd_finetune_retrieval), ("finetune-vcr", cmd_finetune_vcr)):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} fine-tuning from a checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--init", required=True, help="checkpoint file or directory to start from")
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON training config (desk-scale defaults otherwise)")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("eval-retrieval", help="R@K in both directions")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--zero-shot", action="store_true", help="require a pretrained, never fine-tuned checkpoint")
    p.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-vcr", help="Q->A, QA->R and Q->AR accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--budget", type=int, default=100)
    p.set_defaults(func=cmd_eval_vcr)

    p = sub.add_parser("gen-synthetic", help="write a synthetic concept corpus")
    p.add_argument("--config", required=True, help="JSON SynthConfig fields, plus optional vcr_examples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("grad-check", help="backward() against finite differences")
    p.add_argument("--loss", required=True, choices=LOSSES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=24, help="coordinates sampled per tensor")
    p.add_argument("--all-coords", action="store_true", help="check every coordinate (slow)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
