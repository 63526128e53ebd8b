"""Greedy and beam-search decoding over the gated output distribution.

Dynamic weighting rescales the step distribution by how much of each
hypothesis word's average count is still unused by the partial output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import BOS, EOS, PAD, CombinationExample, hypothesis_count_vector
from .model import VotingCombiner, collate


@dataclass
class DecodeConfig:
    beam_size: int = 4
    length_penalty: float = 1.0
    max_steps: int = 60
    dynamic_weighting_enabled: bool = True
    n_best: int = 1

    def __post_init__(self):
        if self.beam_size < 1 or self.max_steps < 1:
            raise ValueError("beam_size and max_steps must be >= 1")
        if not 1 <= self.n_best <= self.beam_size:
            raise ValueError("n_best must lie in [1, beam_size]")


def dynamic_weights(c_h: np.ndarray, c_y: np.ndarray) -> np.ndarray:
    """log2(max(c_h - c_y, 0) + 2); EOS is pinned to 1. Works on [..., V] arrays."""
    w = np.log2(np.maximum(np.asarray(c_h, dtype=np.float64) - c_y, 0.0) + 2.0)
    w[..., EOS] = 1.0
    return w


def apply_weights(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    q = np.asarray(w, dtype=np.float64) * p
    z = q.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise ValueError("weighted distribution has zero mass")
    return q / z


def length_normalize(logprob: float, length: int, alpha: float) -> float:
    return logprob / ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    c_y: np.ndarray
    finished: bool = False
    truncated: bool = False
    lambdas: list[float] = field(default_factory=list)
    score: float = 0.0

    def extend(self, token: int, logp: float, lam: float | None) -> "BeamHypothesis":
        c_y = self.c_y.copy()
        c_y[token] += 1.0
        return BeamHypothesis(
            tokens=self.tokens + [token],
            logprob=self.logprob + logp,
            c_y=c_y,
            finished=token == EOS,
            lambdas=self.lambdas + ([] if lam is None else [lam]),
        )


@torch.no_grad()
def _step_probs(model, trg_in, enc, restricted):
    h_src, src_mask, h_hyp, hyp_mask, sim = enc
    k = trg_in.shape[0]
    h_trg = model.decode(
        trg_in,
        h_src.expand(k, -1, -1),
        src_mask.expand(k, -1),
        h_hyp.expand(k, -1, -1, -1),
        hyp_mask.expand(k, -1, -1),
        None if sim is None else sim.expand(k, -1, -1),
    )[:, -1]
    dist = model.mix_vocab_probs(h_trg, restricted.expand(k, -1) if model.cfg.restricted_vocab_enabled else None)
    p = dist.log_p.exp().double().numpy()
    lam = None if dist.lam is None else dist.lam.double().numpy()
    return p, lam


@torch.no_grad()
def _encode_one(model: VotingCombiner, example: CombinationExample):
    batch = collate([example], model.cfg.vocab_size, with_target=False)
    h_src, h_hyp, sim = model.encode(batch)
    return (h_src, batch.src_mask, h_hyp, batch.hyp_mask, sim), batch.restricted


def beam_search(
    model: VotingCombiner,
    example: CombinationExample,
    cfg: DecodeConfig,
    trace: list | None = None,
) -> list[BeamHypothesis]:
    """Return up to ``cfg.n_best`` hypotheses, best first.

    Every step, each live beam's EOS extension is moved to the finished pool
    and the ``beam_size`` best non-EOS extensions survive. Candidates are
    ranked by accumulated log-probability with ties going to the lower token
    id and then the lower parent rank. Search stops once no live beam can
    still overtake the ``n_best``-th finished hypothesis: accumulated
    log-probabilities only fall, so a live beam's score is bounded by its
    current log-probability under the largest length penalty still
    reachable. If fewer than ``n_best`` hypotheses finish within
    ``max_steps`` the best live beams fill the list with ``truncated=True``.
    ``trace``, when given, receives the ranked candidate scores per step.
    """
    model.eval()
    vocab = model.cfg.vocab_size
    max_steps = min(cfg.max_steps, model.cfg.max_len - 1)
    enc, restricted = _encode_one(model, example)
    c_h = hypothesis_count_vector(example, vocab)
    live = [BeamHypothesis(tokens=[], logprob=0.0, c_y=np.zeros(vocab))]
    finished: list[BeamHypothesis] = []
    for step in range(max_steps):
        trg_in = torch.tensor([[BOS] + b.tokens for b in live], dtype=torch.long)
        p, lam = _step_probs(model, trg_in, enc, restricted)
        if cfg.dynamic_weighting_enabled:
            p = apply_weights(p, dynamic_weights(c_h, np.stack([b.c_y for b in live])))
        with np.errstate(divide="ignore"):
            logp = np.log(p)
        logp[:, [PAD, BOS]] = -np.inf
        scores = np.array([b.logprob for b in live])[:, None] + logp
        parents = np.repeat(np.arange(len(live)), vocab)
        tokens = np.tile(np.arange(vocab), len(live))
        flat = scores.ravel()
        order = np.lexsort((parents, tokens, -flat))
        order = order[np.isfinite(flat[order])]
        if trace is not None:
            trace.append(flat[order].copy())
        new_live = []
        for idx in order:
            parent, tok = int(parents[idx]), int(tokens[idx])
            if tok != EOS and len(new_live) == cfg.beam_size:
                continue
            cand = live[parent].extend(tok, float(logp[parent, tok]), None if lam is None else float(lam[parent]))
            if cand.finished:
                cand.score = length_normalize(cand.logprob, len(cand.tokens), cfg.length_penalty)
                finished.append(cand)
            else:
                new_live.append(cand)
        live = new_live
        if not live:
            break
        if len(finished) >= cfg.n_best:
            finished.sort(key=lambda b: (-b.score, b.tokens))
            del finished[cfg.n_best :]
            reachable = max(length_normalize(b.logprob, n, cfg.length_penalty) for b in live for n in (len(b.tokens) + 1, max_steps))
            if reachable < finished[-1].score:
                break
    finished.sort(key=lambda b: (-b.score, b.tokens))
    if len(finished) < cfg.n_best:
        for b in live:
            b.truncated = True
            b.score = length_normalize(b.logprob, len(b.tokens), cfg.length_penalty)
        live.sort(key=lambda b: (-b.score, b.tokens))
        finished.extend(live)
    return finished[: cfg.n_best]


@torch.no_grad()
def greedy_decode(
    model: VotingCombiner,
    examples: list[CombinationExample],
    max_steps: int = 60,
    dynamic_weighting: bool = False,
    batch_size: int = 64,
) -> list[list[int]]:
    """Batched argmax decoding; outputs include the final EOS when produced."""
    model.eval()
    vocab = model.cfg.vocab_size
    max_steps = min(max_steps, model.cfg.max_len - 1)
    outputs: list[list[int]] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, vocab, with_target=False)
        h_src, h_hyp, sim = model.encode(batch)
        c_h = np.stack([hypothesis_count_vector(ex, vocab) for ex in chunk])
        c_y = np.zeros_like(c_h)
        ys = torch.full((len(chunk), 1), BOS, dtype=torch.long)
        done = np.zeros(len(chunk), dtype=bool)
        for _ in range(max_steps):
            h = model.decode(ys, h_src, batch.src_mask, h_hyp, batch.hyp_mask, sim)[:, -1]
            restricted = batch.restricted if model.cfg.restricted_vocab_enabled else None
            p = model.mix_vocab_probs(h, restricted).log_p.exp().double().numpy()
            if dynamic_weighting:
                p = apply_weights(p, dynamic_weights(c_h, c_y))
            p[:, [PAD, BOS]] = -1.0
            nxt = p.argmax(axis=1)
            nxt[done] = PAD
            c_y[np.arange(len(chunk)), nxt] += ~done
            ys = torch.cat([ys, torch.as_tensor(nxt, dtype=torch.long)[:, None]], dim=1)
            done |= nxt == EOS
            if done.all():
                break
        for row in ys[:, 1:].tolist():
            out = [t for t in row if t != PAD]
            outputs.append(out)
    return outputs


def strip_eos(tokens: list[int]) -> list[int]:
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens
