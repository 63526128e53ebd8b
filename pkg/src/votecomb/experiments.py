"""Experiment plumbing shared by the command line, the scripts and the acceptance suite.

An experiment config is a JSON object with four optional sections:

    {"data": {...DataConfig}, "model": {...ModelConfig minus vocab_size},
     "train": {...TrainConfig}, "decode": {...DecodeConfig}}
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    CombinationExample,
    NoiseProfile,
    TextExample,
    Vocabulary,
    generate_synthetic_systems,
    generate_targets,
)
from .decode import BeamHypothesis, DecodeConfig, beam_search, strip_eos
from .evaluation import bleu, corpus_stats, matching_rate
from .model import ModelConfig, VotingCombiner
from .train import Ablation, TrainConfig, TrainResult, train


class ConfigError(ValueError):
    """Bad or inconsistent configuration (as opposed to a failure while running)."""


@dataclass
class DataConfig:
    n_train: int = 5000
    n_dev: int = 500
    n_test: int = 500
    n_systems: int = 3
    n_words: int = 200
    min_len: int = 4
    max_len: int = 14
    noise: NoiseProfile = field(default_factory=lambda: NoiseProfile(0.15, 0.1, 0.1))
    # number of distinct source symbols; None keeps the source an invertible cipher
    source_classes: int | None = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseProfile(**self.noise)
        if min(self.n_train, self.n_dev, self.n_test, self.n_systems) < 1:
            raise ValueError("split sizes and n_systems must be >= 1")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def to_dict(self) -> dict:
        return {"data": asdict(self.data), "model": dict(self.model), "train": asdict(self.train), "decode": asdict(self.decode)}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - {"data", "model", "train", "decode"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    model_keys = {f.name for f in fields(ModelConfig)} - {"vocab_size"}
    if set(model) - model_keys:
        raise ConfigError(f"unknown model keys: {sorted(set(model) - model_keys)}")
    cfg = ExperimentConfig(
        data=_build(DataConfig, raw.get("data", {}), "data"),
        model=model,
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        decode=_build(DecodeConfig, raw.get("decode", {}), "decode"),
    )
    try:
        cfg.model_config(vocab_size=8)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# data


@dataclass
class Splits:
    train: list[TextExample]
    dev: list[TextExample]
    test: list[TextExample]

    def vocabulary(self) -> Vocabulary:
        seen = set()
        for ex in self.train + self.dev + self.test:
            for s in (ex.src, ex.trg or [], *ex.hyps):
                seen.update(s)
        return Vocabulary(sorted(seen))


def generate_splits(dc: DataConfig) -> Splits:
    total = dc.n_train + dc.n_dev + dc.n_test
    targets = generate_targets(total, n_words=dc.n_words, min_len=dc.min_len, max_len=dc.max_len, seed=dc.seed)
    exs = generate_synthetic_systems(targets, dc.n_systems, dc.noise, seed=dc.seed + 1, source_classes=dc.source_classes)
    a, b = dc.n_train, dc.n_train + dc.n_dev
    return Splits(exs[:a], exs[a:b], exs[b:])


def with_n_hyps(examples: Sequence[CombinationExample], n: int) -> list[CombinationExample]:
    if any(ex.n_hyps < n for ex in examples):
        raise ValueError(f"some examples have fewer than {n} hypotheses")
    return [CombinationExample(src=ex.src, hyps=ex.hyps[:n], trg=ex.trg) for ex in examples]


# ---------------------------------------------------------------------------
# decoding and scoring


def translate(model: VotingCombiner, examples: Sequence[CombinationExample], cfg: DecodeConfig) -> list[list[BeamHypothesis]]:
    return [beam_search(model, ex, cfg) for ex in examples]


def best_tokens(nbest_lists: Sequence[Sequence[BeamHypothesis]]) -> list[list[int]]:
    return [strip_eos(n[0].tokens) for n in nbest_lists]


def evaluate_ids(outputs: Sequence[Sequence[int]], examples: Sequence[CombinationExample]) -> dict:
    """BLEU and matching rates (n = 1..4) of id-level outputs; ids are compared as tokens."""
    refs = [[strip_eos(ex.trg)] for ex in examples]
    hyp_sets = [[strip_eos(h) for h in ex.hyps] for ex in examples]
    return {
        "bleu": bleu(outputs, refs),
        "matching": [matching_rate(outputs, hyp_sets, n) for n in (1, 2, 3, 4)],
        "stats": corpus_stats(outputs, refs),
    }


def single_system_bleus(examples: Sequence[CombinationExample]) -> list[float]:
    refs = [[strip_eos(ex.trg)] for ex in examples]
    return [bleu([strip_eos(ex.hyps[k]) for ex in examples], refs) for k in range(examples[0].n_hyps)]


def best_single_system(examples: Sequence[CombinationExample]) -> tuple[int, float, np.ndarray]:
    scores = single_system_bleus(examples)
    k = int(np.argmax(scores))
    refs = [[strip_eos(ex.trg)] for ex in examples]
    return k, scores[k], corpus_stats([strip_eos(ex.hyps[k]) for ex in examples], refs)


# ---------------------------------------------------------------------------
# ablation sweep

ABLATION_ROWS = (
    ("full", Ablation()),
    ("-dynamic weighting", Ablation(dynamic_weighting=False)),
    ("-restricted vocab", Ablation(restricted_vocab=False)),
    ("-voting", Ablation(voting=False)),
)


def train_variant(train_set, dev_set, cfg: ExperimentConfig, vocab_size: int, ablation: Ablation, seed: int, out_dir=None) -> TrainResult:
    tc = copy.deepcopy(cfg.train)
    tc.ablation = ablation
    tc.seed = seed
    return train(train_set, dev_set, cfg.model_config(vocab_size), tc, out_dir=out_dir)


def ablation_sweep(
    train_set: Sequence[CombinationExample],
    dev_set: Sequence[CombinationExample],
    test_set: Sequence[CombinationExample],
    cfg: ExperimentConfig,
    vocab_size: int,
    seed: int,
    models: dict | None = None,
) -> list[dict]:
    """One row per ABLATION_ROWS entry.

    Turning off dynamic weighting only changes decoding, so that row reuses the
    full model. ``models`` may carry already-trained models keyed by row name;
    newly trained ones are added to it.
    """
    models = {} if models is None else models
    rows = []
    for name, ab in ABLATION_ROWS:
        train_ab = Ablation(voting=ab.voting, restricted_vocab=ab.restricted_vocab)
        key = "full" if train_ab == Ablation() else name
        if key not in models:
            models[key] = train_variant(train_set, dev_set, cfg, vocab_size, train_ab, seed).model
        dc = copy.deepcopy(cfg.decode)
        dc.dynamic_weighting_enabled = dc.dynamic_weighting_enabled and ab.dynamic_weighting
        t0 = time.perf_counter()
        outs = best_tokens(translate(models[key], test_set, dc))
        seconds = time.perf_counter() - t0
        rows.append({"system": name, "outputs": outs, "decode_seconds": seconds, **evaluate_ids(outs, test_set)})
    return rows



# ---------------------------------------------------------------------------
# multi-seed study on one synthetic corpus


@dataclass
class StudyResult:
    """Test-set results of an ablation sweep repeated over seeds.

    ``rows[seed][system]`` holds ``evaluate_ids`` output for each ABLATION_ROWS
    system; ``by_n[seed][n]`` the full model's BLEU when decoding with the
    first ``n`` hypotheses; ``seconds[seed]`` the wall time to train and decode
    the full model.
    """

    single_bleus: list[float]
    best_single: tuple[int, float, np.ndarray]
    rows: dict[int, dict[str, dict]]
    by_n: dict[int, dict[int, float]]
    seconds: dict[int, float]

    def median(self, system: str, key: str = "bleu"):
        vals = [self.rows[s][system][key] for s in self.rows]
        return np.median(np.asarray(vals), axis=0)


def run_study(
    cfg: ExperimentConfig,
    seeds: Sequence[int],
    train_n: int = 3,
    eval_ns: Sequence[int] = (),
    progress=None,
) -> StudyResult:
    """Generate ``cfg.data``, then for each seed train full / -restricted vocab / -voting on
    the first ``train_n`` hypotheses and score all ABLATION_ROWS systems on the test split.

    ``eval_ns`` lists extra hypothesis counts to decode the full model with
    (the corpus must have that many systems).
    """
    note = progress or (lambda msg: None)
    splits = generate_splits(cfg.data)
    vocab = splits.vocabulary()
    enc = {name: [vocab.encode_example(e) for e in getattr(splits, name)] for name in ("train", "dev", "test")}
    train_set, dev_set, test_set = (with_n_hyps(enc[k], train_n) for k in ("train", "dev", "test"))
    rows, by_n, seconds = {}, {}, {}
    for seed in seeds:
        t0 = time.perf_counter()
        full = train_variant(train_set, dev_set, cfg, len(vocab), Ablation(), seed).model
        train_seconds = time.perf_counter() - t0
        rows[seed] = {}
        for row in ablation_sweep(train_set, dev_set, test_set, cfg, len(vocab), seed, {"full": full}):
            rows[seed][row["system"]] = row
        seconds[seed] = train_seconds + rows[seed]["full"]["decode_seconds"]
        by_n[seed] = {}
        for n in eval_ns:
            outs = best_tokens(translate(full, with_n_hyps(enc["test"], n), cfg.decode))
            by_n[seed][n] = evaluate_ids(outs, test_set)["bleu"]
        note(f"seed {seed}: " + ", ".join(f"{k} {v['bleu']:.2f}" for k, v in rows[seed].items()))
    return StudyResult(
        single_bleus=single_system_bleus(test_set),
        best_single=best_single_system(test_set),
        rows=rows,
        by_n=by_n,
        seconds=seconds,
    )
