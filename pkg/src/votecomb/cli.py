"""``votecomb`` command line: gen-data, train, translate, evaluate, ablate, similarity.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.
Settings come from ``--config`` (JSON, see ``experiments``) and are then
overridden by explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from . import experiments as ex
from .corpus import CombinationExample, Vocabulary, build_vocab, load_corpus, save_corpus, write_manifest
from .evaluation import bleu, corpus_stats, matching_rate, paired_bootstrap, similarity_report
from .model import CheckpointError, load_checkpoint, read_checkpoint_header
from .train import apply_ablation, configure_threads

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("votecomb")


class UsageError(ex.ConfigError):
    pass


def _prepare_out(path: Path, force: bool, is_dir: bool = True) -> None:
    if path.exists():
        if not force:
            raise UsageError(f"{path} already exists (use --force to overwrite)")
        if is_dir and path.is_dir():
            shutil.rmtree(path)
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


def _apply_overrides(cfg: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "n_systems", None) is not None:
        cfg.data.n_systems = args.n_systems
    if getattr(args, "beam_size", None) is not None:
        cfg.decode.beam_size = args.beam_size
    if getattr(args, "length_penalty", None) is not None:
        cfg.decode.length_penalty = args.length_penalty
    ab = cfg.train.ablation
    if getattr(args, "disable_voting", False):
        ab.voting = False
    if getattr(args, "disable_restricted_vocab", False):
        ab.restricted_vocab = False
    if getattr(args, "disable_dynamic_weighting", False):
        ab.dynamic_weighting = False
    if not ab.dynamic_weighting:
        cfg.decode.dynamic_weighting_enabled = False
    # re-run validation after overrides
    return ex.config_from_dict(cfg.to_dict())


def _manifest(args, cfg: ex.ExperimentConfig, inputs: list[Path]) -> dict:
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "inputs": {str(p): ex.file_sha256(p) for p in inputs if p.is_file()},
    }


def _corpus_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.txt"))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ex.ExperimentConfig) -> None:
    out = Path(args.out)
    _prepare_out(out, args.force)
    splits = ex.generate_splits(cfg.data)
    for name in ("train", "dev", "test"):
        save_corpus(getattr(splits, name), out / name)
    vocab = build_vocab(_corpus_files(out / "train") + _corpus_files(out / "dev") + _corpus_files(out / "test"))
    vocab.save(out / "vocab.txt")
    write_manifest(out / "manifest.json", _manifest(args, cfg, []))
    print(f"wrote {len(splits.train)}/{len(splits.dev)}/{len(splits.test)} sentences with {cfg.data.n_systems} systems to {out}")


def _load_split(data: Path, split: str, vocab: Vocabulary, n_hyps: int | None) -> list[CombinationExample]:
    return [vocab.encode_example(e) for e in load_corpus(data / split, n_hyps=n_hyps)]


def cmd_train(args, cfg: ex.ExperimentConfig) -> None:
    data, out = Path(args.data), Path(args.out)
    vocab = Vocabulary.load(data / "vocab.txt")
    n = args.n_systems
    train_set = _load_split(data, "train", vocab, n)
    dev_set = _load_split(data, "dev", vocab, n)
    _prepare_out(out, args.force)
    inputs = [data / "vocab.txt"] + _corpus_files(data / "train") + _corpus_files(data / "dev")
    write_manifest(out / "manifest.json", _manifest(args, cfg, inputs))
    shutil.copyfile(data / "vocab.txt", out / "vocab.txt")
    res = ex.train_variant(train_set, dev_set, cfg, len(vocab), cfg.train.ablation, cfg.train.seed, out_dir=out)
    print(f"best dev BLEU {res.best_dev_bleu:.2f} at step {res.best_step}; checkpoint {out / 'best.ckpt'}")


def cmd_translate(args, cfg: ex.ExperimentConfig) -> None:
    ckpt = Path(args.checkpoint)
    vocab = Vocabulary.load(args.vocab or ckpt.parent / "vocab.txt")
    header, _ = read_checkpoint_header(ckpt)
    if header["config"]["vocab_size"] != len(vocab):
        raise CheckpointError(f"checkpoint expects {header['config']['vocab_size']} tokens, vocabulary has {len(vocab)}")
    expected = apply_ablation(cfg.model_config(len(vocab)), cfg.train.ablation) if args.config else None
    model = load_checkpoint(ckpt, expected)
    texts = load_corpus(args.input, n_hyps=args.n_systems)
    examples = [vocab.encode_example(t) for t in texts]
    examples = [CombinationExample(src=e.src, hyps=e.hyps) for e in examples]
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    nbest = ex.translate(model, examples, cfg.decode)
    with open(out, "w", encoding="utf-8") as fh, open(str(out) + ".jsonl", "w", encoding="utf-8") as side:
        for i, hyps in enumerate(nbest):
            fh.write(" ".join(vocab.decode(hyps[0].tokens)) + "\n")
            for rank, h in enumerate(hyps):
                side.write(json.dumps({
                    "line": i, "rank": rank, "tokens": vocab.decode(h.tokens),
                    "score": h.score, "logprob": h.logprob, "truncated": h.truncated, "lambdas": h.lambdas,
                }) + "\n")
    write_manifest(str(out) + ".manifest.json", _manifest(args, cfg, [ckpt] + _corpus_files(Path(args.input))))
    print(f"translated {len(examples)} sentences -> {out}")


def _read_tokens(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_evaluate(args, cfg: ex.ExperimentConfig) -> None:
    cands = _read_tokens(args.candidate)
    refs = [[r] for r in _read_tokens(args.reference)]
    if len(cands) != len(refs):
        raise UsageError(f"{args.candidate} has {len(cands)} lines, {args.reference} has {len(refs)}")
    stats = corpus_stats(cands, refs, case_sensitive=not args.lowercase)
    rows = [{"system": "candidate", "bleu": bleu(cands, refs, case_sensitive=not args.lowercase)}]
    if args.hyps:
        hyp_sets = [[h.hyps[k] for k in range(len(h.hyps))] for h in load_corpus(args.hyps)]
        if len(hyp_sets) != len(cands):
            raise UsageError("hypothesis files and candidate differ in line count")
        for n in (1, 2, 3, 4):
            rows[0][f"match{n}"] = matching_rate(cands, hyp_sets, n)
    for base in args.baseline or []:
        b = _read_tokens(base)
        b_stats = corpus_stats(b, refs, case_sensitive=not args.lowercase)
        rows.append({
            "system": base,
            "bleu": bleu(b, refs, case_sensitive=not args.lowercase),
            # small p: the candidate is significantly better than this baseline
            "p_value": paired_bootstrap(stats, b_stats, resamples=args.resamples, seed=args.seed or 0),
        })
    cols = ["system", "bleu", "match1", "match2", "match3", "match4", "p_value"]
    lines = []
    for r in rows:
        parts = [f"{r['system']}\tBLEU {r['bleu']:.2f}"]
        parts += [f"match{n} {r[f'match{n}']:.4f}" for n in (1, 2, 3, 4) if f"match{n}" in r]
        if "p_value" in r:
            parts.append(f"p {r['p_value']:.4f}")
        lines.append("\t".join(parts))
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        _prepare_out(Path(str(out) + ".csv"), args.force, is_dir=False)
        Path(str(out) + ".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        with open(str(out) + ".csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, restval="")
            w.writeheader()
            for r in rows:
                w.writerow(r)


def cmd_ablate(args, cfg: ex.ExperimentConfig) -> None:
    data, out = Path(args.data), Path(args.out)
    vocab = Vocabulary.load(data / "vocab.txt")
    n = args.n_systems
    train_set = _load_split(data, "train", vocab, n)
    dev_set = _load_split(data, "dev", vocab, n)
    test_set = _load_split(data, "test", vocab, n)
    _prepare_out(out, args.force)
    inputs = [data / "vocab.txt"] + [p for s in ("train", "dev", "test") for p in _corpus_files(data / s)]
    write_manifest(out / "manifest.json", _manifest(args, cfg, inputs))
    rows = ex.ablation_sweep(train_set, dev_set, test_set, cfg, len(vocab), cfg.train.seed)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["system", "bleu", "match1", "match2", "match3", "match4"])
        for r in rows:
            w.writerow([r["system"], f"{r['bleu']:.4f}"] + [f"{m:.4f}" for m in r["matching"]])
    width = max(len(r["system"]) for r in rows)
    print(f"{'system':<{width}}  BLEU")
    for r in rows:
        print(f"{r['system']:<{width}}  {r['bleu']:.2f}")


def cmd_similarity(args, cfg: ex.ExperimentConfig) -> None:
    ckpt = Path(args.checkpoint)
    vocab = Vocabulary.load(args.vocab or ckpt.parent / "vocab.txt")
    model = load_checkpoint(ckpt)
    examples = [vocab.encode_example(t) for t in load_corpus(args.input, n_hyps=args.n_systems)]
    report = similarity_report(model, examples, vocab, top_k=args.top_k, min_pair_count=args.min_pair_count)
    for rank, a, b, mean in report:
        print(f"{rank}\t{a}\t{b}\t{mean:.4f}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="votecomb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, decode=False, ablation=False):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--n-systems", type=int, help="number of hypotheses per sentence")
        if decode:
            sp.add_argument("--beam-size", type=int)
            sp.add_argument("--length-penalty", type=float)
            sp.add_argument("--disable-dynamic-weighting", action="store_true")
        if ablation:
            sp.add_argument("--disable-voting", action="store_true")
            sp.add_argument("--disable-restricted-vocab", action="store_true")
            if not decode:
                sp.add_argument("--disable-dynamic-weighting", action="store_true")

    sp = sub.add_parser("gen-data", help="write a synthetic train/dev/test corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a combiner")
    common(sp, ablation=True)
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="combine hypotheses with a trained checkpoint")
    common(sp, decode=True, ablation=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", help="defaults to vocab.txt next to the checkpoint")
    sp.add_argument("--input", required=True, help="directory with src.txt and hyp1.txt..hypN.txt")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("evaluate", help="BLEU, matching rates and bootstrap significance")
    common(sp)
    sp.add_argument("--candidate", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--hyps", help="directory with hyp*.txt for matching rates")
    sp.add_argument("--baseline", action="append", help="baseline output file (repeatable)")
    sp.add_argument("--resamples", type=int, default=1000)
    sp.add_argument("--lowercase", action="store_true")
    sp.add_argument("--out", help="report prefix; writes PREFIX.txt and PREFIX.csv")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and score full, -dynamic weighting, -restricted vocab, -voting")
    common(sp, decode=True, ablation=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("similarity", help="most similar non-identical cross-hypothesis word pairs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--input", required=True)
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--min-pair-count", type=int, default=1)
    sp.set_defaults(func=cmd_similarity)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    configure_threads()
    try:
        cfg = _apply_overrides(ex.load_config(args.config), args)
        args.func(args, cfg)
    except (ex.ConfigError, CheckpointError) as exc:
        print(f"votecomb: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"votecomb: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
