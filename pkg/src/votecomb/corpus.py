"""Vocabularies, synthetic multi-system corpora and parallel-file I/O.

Randomness is drawn exclusively from ``numpy.random.Generator(PCG64(seed))``
so generated corpora are bit-reproducible across machines.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


def make_rng(seed: int) -> np.random.Generator:
    """The one RNG used for data generation: PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


class Vocabulary:
    """Dense token<->id map whose first four ids are the special symbols."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIALS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            if tok in self.index:
                raise ValueError(f"duplicate or reserved token {tok!r}")
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> list[int]:
        ids = [self.index.get(t, UNK) for t in tokens]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def encode_example(self, ex: "TextExample") -> "CombinationExample":
        return CombinationExample(
            src=self.encode(ex.src),
            hyps=[self.encode(h) for h in ex.hyps],
            trg=None if ex.trg is None else self.encode(ex.trg),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError(f"{path}: missing specials header {SPECIALS}")
        return cls(lines[4:])


def build_vocab(corpus_files: Sequence[str | Path], min_count: int = 1) -> Vocabulary:
    """Collect whitespace tokens from ``corpus_files``.

    Tokens with frequency >= ``min_count`` are kept, ordered by frequency
    (descending) and then lexicographically.
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for path in corpus_files:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                n_lines += 1
                counts.update(line.split())
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class TextExample:
    """Whitespace-token view of one combination instance (no EOS)."""

    src: list[str]
    hyps: list[list[str]]
    trg: list[str] | None = None


@dataclass
class CombinationExample:
    """Id-level instance: every sequence ends with EOS."""

    src: list[int]
    hyps: list[list[int]]
    trg: list[int] | None = None

    @property
    def n_hyps(self) -> int:
        return len(self.hyps)

    def validate(self, vocab_size: int) -> None:
        if not self.hyps:
            raise ValueError("an example needs at least one hypothesis")
        seqs = [("src", self.src)] + [(f"hyp{n + 1}", h) for n, h in enumerate(self.hyps)]
        if self.trg is not None:
            seqs.append(("trg", self.trg))
        for name, seq in seqs:
            if not seq:
                raise ValueError(f"{name} is empty")
            if any(i < 0 or i >= vocab_size for i in seq):
                raise ValueError(f"{name} has ids outside [0, {vocab_size})")
            if name != "src" and seq[-1] != EOS:
                raise ValueError(f"{name} does not end with EOS")


@dataclass(frozen=True)
class NoiseProfile:
    substitution_rate: float = 0.0
    deletion_rate: float = 0.0
    swap_rate: float = 0.0

    def __post_init__(self):
        for name in ("substitution_rate", "deletion_rate", "swap_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class SourceCipher:
    """Token-level cipher ``w -> s<k>`` applied in reversed word order.

    With ``n_classes=None`` the map is a bijection over the word list and
    ``invert`` recovers the target exactly. With ``n_classes=K`` words are
    hashed into K source symbols, so the source only tells which class each
    target word belongs to.
    """

    forward: dict[str, str] = field(default_factory=dict)
    lossy: bool = False

    @classmethod
    def for_words(cls, words: Sequence[str], seed: int, n_classes: int | None = None) -> "SourceCipher":
        words = sorted(set(words))
        perm = make_rng(seed).permutation(len(words))
        if n_classes is None:
            return cls({w: f"s{int(k)}" for w, k in zip(words, perm)})
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        return cls({w: f"s{int(k) % n_classes}" for w, k in zip(words, perm)}, lossy=n_classes < len(words))

    def encipher(self, tokens: Sequence[str]) -> list[str]:
        return [self.forward[t] for t in reversed(tokens)]

    def invert(self, tokens: Sequence[str]) -> list[str]:
        if self.lossy:
            raise ValueError("a many-to-one cipher cannot be inverted")
        back = {v: k for k, v in self.forward.items()}
        return [back[t] for t in reversed(tokens)]


def generate_targets(
    n_sentences: int,
    n_words: int = 200,
    min_len: int = 4,
    max_len: int = 14,
    branching: int = 6,
    seed: int = 0,
) -> list[list[str]]:
    """Sample sentences from a sparse first-order Markov chain over ``n_words`` types.

    Each word has ``branching`` admissible successors with Zipfian weights, so
    the target language has learnable local structure.
    """
    rng = make_rng(seed)
    words = [f"w{i}" for i in range(n_words)]
    zipf = 1.0 / np.arange(1, n_words + 1)
    start_p = zipf / zipf.sum()
    succ = np.stack([rng.choice(n_words, size=branching, replace=False, p=start_p) for _ in range(n_words)])
    succ_p = 1.0 / np.arange(1, branching + 1)
    succ_p /= succ_p.sum()
    out = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.choice(n_words, p=start_p))
        sent = [words[cur]]
        for _ in range(length - 1):
            cur = int(succ[cur, rng.choice(branching, p=succ_p)])
            sent.append(words[cur])
        out.append(sent)
    return out


def corrupt(tokens: Sequence[str], profile: NoiseProfile, pool: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Apply deletion, then substitution, then adjacent swaps to one sentence."""
    out = []
    for tok in tokens:
        if rng.random() < profile.deletion_rate:
            continue
        if rng.random() < profile.substitution_rate:
            k = int(rng.integers(len(pool) - 1))
            # skip over the original token so the draw always differs
            cand = pool[k]
            if cand == tok:
                cand = pool[len(pool) - 1]
            tok = cand
        out.append(tok)
    i = 0
    while i < len(out) - 1:
        if rng.random() < profile.swap_rate:
            out[i], out[i + 1] = out[i + 1], out[i]
            i += 2
        else:
            i += 1
    return out


def generate_synthetic_systems(
    targets: Sequence[Sequence[str]],
    n_systems: int,
    noise: NoiseProfile | Sequence[NoiseProfile],
    seed: int,
    cipher: SourceCipher | None = None,
    source_classes: int | None = None,
) -> list[TextExample]:
    """Simulate ``n_systems`` MT systems as independent corruptions of each target.

    ``noise`` is either one profile shared by every system or one per system.
    The source side is ``cipher`` applied to the target; by default a cipher
    with ``source_classes`` symbols (None: invertible) is derived from the
    target word list and ``seed``.
    """
    if n_systems < 1:
        raise ValueError("n_systems must be >= 1")
    profiles = [noise] * n_systems if isinstance(noise, NoiseProfile) else list(noise)
    if len(profiles) != n_systems:
        raise ValueError(f"got {len(profiles)} noise profiles for {n_systems} systems")
    if any(len(t) == 0 for t in targets):
        raise ValueError("empty target sequence")
    pool = sorted({w for t in targets for w in t})
    if len(pool) < 2 and any(p.substitution_rate > 0 for p in profiles):
        raise ValueError("substitution needs at least two word types")
    if cipher is None:
        cipher = SourceCipher.for_words(pool, seed, source_classes)
    rng = make_rng(seed)
    examples = []
    for trg in targets:
        hyps = [corrupt(trg, p, pool, rng) for p in profiles]
        examples.append(TextExample(src=cipher.encipher(trg), hyps=hyps, trg=list(trg)))
    return examples


def build_restricted_vocab(example: CombinationExample, vocab_size: int) -> np.ndarray:
    """Boolean membership over the full vocabulary: hypothesis tokens plus EOS."""
    member = np.zeros(vocab_size, dtype=bool)
    for h in example.hyps:
        member[h] = True
    member[EOS] = True
    member[[PAD, BOS]] = False
    return member


def hypothesis_count_vector(example: CombinationExample, vocab_size: int) -> np.ndarray:
    """Average per-hypothesis occurrence count of every word (specials excluded)."""
    if not example.hyps:
        raise ValueError("need at least one hypothesis")
    counts = np.zeros(vocab_size, dtype=np.float64)
    for h in example.hyps:
        np.add.at(counts, h, 1.0)
    counts[[PAD, BOS, EOS]] = 0.0
    return counts / len(example.hyps)


# ---------------------------------------------------------------------------
# parallel text files


def _read_lines(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def _write_lines(path: Path, sents: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sents:
            fh.write(" ".join(s) + "\n")


def save_corpus(examples: Sequence[TextExample], directory: str | Path, prefix: str = "") -> None:
    """Write ``src.txt``, ``hyp1.txt`` .. ``hypN.txt`` and (if present) ``trg.txt``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = {len(ex.hyps) for ex in examples}
    if len(n) != 1:
        raise ValueError("all examples in a corpus file set must have the same N")
    (n,) = n
    _write_lines(d / f"{prefix}src.txt", (ex.src for ex in examples))
    for k in range(n):
        _write_lines(d / f"{prefix}hyp{k + 1}.txt", (ex.hyps[k] for ex in examples))
    if all(ex.trg is not None for ex in examples):
        _write_lines(d / f"{prefix}trg.txt", (ex.trg for ex in examples))


def load_corpus(directory: str | Path, prefix: str = "", n_hyps: int | None = None) -> list[TextExample]:
    """Read a parallel file set; ``n_hyps`` limits how many hypothesis files are used."""
    d = Path(directory)
    src = _read_lines(d / f"{prefix}src.txt")
    hyp_files = []
    k = 1
    while (d / f"{prefix}hyp{k}.txt").exists() and (n_hyps is None or k <= n_hyps):
        hyp_files.append(_read_lines(d / f"{prefix}hyp{k}.txt"))
        k += 1
    if not hyp_files:
        raise FileNotFoundError(f"no {prefix}hyp1.txt in {d}")
    if n_hyps is not None and len(hyp_files) < n_hyps:
        raise ValueError(f"requested {n_hyps} hypotheses but only {len(hyp_files)} files exist")
    trg_path = d / f"{prefix}trg.txt"
    trg = _read_lines(trg_path) if trg_path.exists() else None
    lengths = {len(src)} | {len(h) for h in hyp_files} | ({len(trg)} if trg is not None else set())
    if len(lengths) != 1:
        raise ValueError(f"parallel files in {d} have differing line counts {sorted(lengths)}")
    return [
        TextExample(src=src[i], hyps=[h[i] for h in hyp_files], trg=None if trg is None else trg[i])
        for i in range(len(src))
    ]


def write_manifest(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
