"""Command-line entry point: ``fpevtt <command> [--config PATH] [--seed N] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config, parse_lines, write_config
from .data import DataValidationError, load_dataset, load_splits, select, synth_dataset
from .metrics import evaluate_captions
from .model import ConfigError, init_params, load_checkpoint
from .tokenizer import (
    Vocabulary,
    VocabError,
    build_default_vocab,
    load_embedding_matrix,
    normalize,
    unk_rate,
)
from .training import greedy_captions, train_loop, write_metric_log

log = logging.getLogger("fpevtt")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# shared plumbing


def _records(cfg: RunConfig, split: str | None = None):
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is not set")
    records = load_dataset(cfg.data.manifest, vision_dim=cfg.model.d_vision)
    if split is None:
        return records
    if not cfg.data.splits:
        log.warning("data.splits is not set; using every clip for split %r", split)
        return records
    if not Path(cfg.data.splits).exists():
        raise DataValidationError(f"splits file {cfg.data.splits} does not exist")
    return select(records, load_splits(cfg.data.splits)[split])


def _vocab_from_config(cfg: RunConfig, train_records) -> Vocabulary:
    if cfg.data.vocab:
        if not Path(cfg.data.vocab).exists():
            raise VocabError(f"vocabulary file {cfg.data.vocab} does not exist")
        return Vocabulary.load(cfg.data.vocab, kind=cfg.data.tokenizer)
    return build_default_vocab([c for r in train_records for c in r.captions], cfg.data.vocab_cap)


def _vocab_from_meta(meta: dict) -> Vocabulary:
    try:
        return Vocabulary(list(meta["vocab"]), meta.get("vocab_kind", "default"))
    except KeyError:
        raise ConfigError("checkpoint carries no vocabulary") from None


def _checkpoint(path):
    if path is None or not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_training(cfg: RunConfig, out: Path, objective: str = "xe", init=None) -> dict:
    train = _records(cfg, cfg.data.train_split)
    val = _records(cfg, cfg.data.val_split)
    if init is None:
        vocab = _vocab_from_config(cfg, train)
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, vocab_size=len(vocab)))
        params = init_params(cfg.model, cfg.seed)
        if cfg.data.embeddings:
            params["word_emb"] = load_embedding_matrix(
                vocab, cfg.data.embeddings, cfg.model.d_model, cfg.data.freeze_embeddings
            )
    else:
        model_cfg, params, meta = _checkpoint(init)
        vocab = _vocab_from_meta(meta)
        cfg = dataclasses.replace(cfg, model=model_cfg)
    cfg.check()
    write_config(out / "config.txt", cfg)
    vocab.save(out / "vocab.txt")
    meta = {"vocab": vocab.tokens, "vocab_kind": vocab.kind, "use_audio": cfg.train.use_audio}
    result = train_loop(cfg.train, cfg.model, params, train, val, vocab, objective, out, meta)
    best = result.log[result.best_epoch - 1] if result.best_epoch else result.log[-1]
    return dict(best)


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(cfg: RunConfig, args) -> int:
    records = _records(cfg, cfg.data.train_split)
    corpus = [c for r in records for c in r.captions]
    vocab = build_default_vocab(corpus, cfg.data.vocab_cap)
    out = args.out or cfg.data.vocab
    if not out:
        raise ConfigError("give --out or data.vocab for the vocabulary file")
    vocab.save(out)
    distinct = len({w for c in corpus for w in normalize(c)})
    print(
        f"vocabulary: {len(vocab)} tokens (cap {cfg.data.vocab_cap}), {distinct} distinct words, "
        f"unk rate {unk_rate(corpus, vocab):.4f}",
        file=sys.stderr,
    )
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    best = _run_training(cfg, out)
    print(json.dumps({"out": str(out), **best}))
    return 0


def cmd_finetune_scst(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    best = _run_training(cfg, out, objective="scst", init=args.init)
    print(json.dumps({"out": str(out), **best}))
    return 0


def cmd_generate(cfg: RunConfig, args) -> int:
    model_cfg, params, meta = _checkpoint(args.checkpoint)
    vocab = _vocab_from_meta(meta)
    cfg = dataclasses.replace(cfg, model=model_cfg)
    records = _records(cfg, args.split)
    use_audio = bool(meta.get("use_audio", cfg.train.use_audio))
    caps = greedy_captions(model_cfg, params, records, vocab, use_audio, cfg.train.decode_max_len)
    lines = [json.dumps({"video_id": r.video_id, "caption": c}) for r, c in zip(records, caps)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _read_candidates(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise DataValidationError(f"candidate file {p} does not exist")
    out = {}
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out[str(row["video_id"])] = str(row["caption"])
        except (json.JSONDecodeError, KeyError) as e:
            raise DataValidationError(f"{p}:{lineno}: bad candidate line ({e})") from None
    return out


def _read_references(manifest) -> dict[str, list[str]]:
    if not manifest or not Path(manifest).exists():
        raise DataValidationError(f"manifest {manifest} does not exist")
    refs = {}
    for line in Path(manifest).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            refs[str(row["video_id"])] = list(row.get("captions") or [])
    return refs


def cmd_evaluate(cfg: RunConfig, args) -> int:
    cands = _read_candidates(args.candidates)
    refs = _read_references(cfg.data.manifest)
    missing = [v for v in cands if v not in refs]
    if missing:
        raise DataValidationError(f"candidates for unknown video ids: {missing[:5]}")
    ids = sorted(cands)
    scores = evaluate_captions([cands[v] for v in ids], [refs[v] for v in ids])
    text = json.dumps(scores, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    stats = synth_dataset(out, cfg.seed, args.n_clips)
    # a starter config pointing at the generated data
    starter = apply_overrides(cfg, {
        "data.manifest": str((out / "manifest.jsonl").resolve()),
        "data.splits": str((out / "splits.json").resolve()),
        "model.d_vision": "16",
        "model.n_v_max": "32",
    })
    write_config(out / "synth.cfg", starter)
    print(json.dumps(stats))
    return 0


def _parse_variant(spec: str) -> tuple[str, dict[str, str]]:
    name, _, rest = spec.partition(":")
    if not name:
        raise ConfigError(f"variant {spec!r} has no name")
    pairs = parse_lines(rest.replace(",", "\n"), f"variant {name}") if rest else {}
    return name, pairs


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _prepare_out(args.out)
    variants = [_parse_variant(v) for v in args.variant]
    names = [n for n, _ in variants]
    if len(set(names)) != len(names):
        raise ConfigError("variant names must be unique")
    configs = []
    for name, pairs in variants:
        vcfg = apply_overrides(cfg, pairs)
        vcfg.check()
        configs.append((name, vcfg))
    rows = []
    for name, vcfg in configs:
        log.info("ablation variant %s", name)
        best = _run_training(vcfg, _prepare_out(out / name))
        rows.append({"config": name, **best})
    write_metric_log(out / "ablation.csv", rows, extra_first=("config",))
    print((out / "ablation.csv").read_text(encoding="utf-8"), end="")
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "finetune-scst": cmd_finetune_scst,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="fpevtt", description="Audio-visual video captioning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", parents=[common], help="build a word vocabulary from training captions")
    p.add_argument("--out", help="vocabulary file (defaults to data.vocab)")

    p = sub.add_parser("train", parents=[common], help="cross-entropy training")
    p.add_argument("--out", required=True, help="directory for checkpoints, log and effective config")

    p = sub.add_parser("finetune-scst", parents=[common], help="self-critical fine-tuning from a checkpoint")
    p.add_argument("--init", required=True, help="checkpoint to start from")
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", parents=[common], help="greedy captions as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="output file (defaults to stdout)")

    p = sub.add_parser("evaluate", parents=[common], help="score generated captions against the manifest")
    p.add_argument("--candidates", required=True, help="JSON lines from generate")
    p.add_argument("--out", help="also write the scores here")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic alignment dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int, default=2000)

    p = sub.add_parser("ablate", parents=[common], help="train several config variants, one CSV row each")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", action="append", required=True, metavar="NAME[:KEY=VALUE,...]",
                   help="variant name with comma-separated overrides (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataValidationError, VocabError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
