"""Multi-source transformer combiner with hypothesis voting.

Layout: one source encoder, one hypothesis encoder whose weights are reused
for every hypothesis, and a pre-norm decoder whose layers run
self-attention -> source attention -> hypothesis (voting) attention -> FFN.
Embeddings are shared by all three sides and tied to the output projection.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import PAD, BOS, CombinationExample, build_restricted_vocab, hypothesis_count_vector


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    dropout: float = 0.1
    voting_enabled: bool = True
    restricted_vocab_enabled: bool = True
    # "all" decoder layers vote, or only the "last" one
    voting_layers: str = "all"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers_enc", "n_layers_dec", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.voting_layers not in ("all", "last"):
            raise ValueError("voting_layers must be 'all' or 'last'")


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: torch.Tensor  # [B, Ls]
    src_mask: torch.Tensor  # [B, Ls] True on real tokens
    hyps: torch.Tensor  # [B, N, Lh]
    hyp_mask: torch.Tensor  # [B, N, Lh]
    restricted: torch.Tensor  # [B, V] bool
    trg_in: torch.Tensor | None = None  # [B, T] BOS-shifted
    trg_out: torch.Tensor | None = None  # [B, T]
    trg_mask: torch.Tensor | None = None

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(seqs: Sequence[Sequence[int]], length: int | None = None) -> torch.Tensor:
    length = length or max(len(s) for s in seqs)
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def collate(examples: Sequence[CombinationExample], vocab_size: int, with_target: bool = True) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    n = {ex.n_hyps for ex in examples}
    if len(n) != 1:
        raise ValueError("all examples in a batch must have the same number of hypotheses")
    (n,) = n
    src = _pad([ex.src for ex in examples])
    lh = max(len(h) for ex in examples for h in ex.hyps)
    hyps = torch.stack([_pad(ex.hyps, lh) for ex in examples])
    restricted = torch.as_tensor(np.stack([build_restricted_vocab(ex, vocab_size) for ex in examples]))
    batch = Batch(src=src, src_mask=src != PAD, hyps=hyps, hyp_mask=hyps != PAD, restricted=restricted)
    if with_target:
        if any(ex.trg is None for ex in examples):
            raise ValueError("teacher forcing requires a target for every example")
        batch.trg_out = _pad([ex.trg for ex in examples])
        batch.trg_in = _pad([[BOS] + ex.trg[:-1] for ex in examples])
        batch.trg_mask = batch.trg_out != PAD
    return batch


def count_vectors(examples: Sequence[CombinationExample], vocab_size: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([hypothesis_count_vector(ex, vocab_size) for ex in examples]))


# ---------------------------------------------------------------------------
# voting primitives


def stable_softmax(x: torch.Tensor, dim: int) -> torch.Tensor:
    x = x - x.amax(dim=dim, keepdim=True).detach()
    ex = torch.exp(x)
    return ex / ex.sum(dim=dim, keepdim=True)


def compute_similarity(h_hyp: torch.Tensor, hyp_mask: torch.Tensor) -> torch.Tensor:
    """Voter/candidate similarity normalised over the voter positions of each hypothesis.

    ``h_hyp`` is [B, N, L, d]. Returns [B, N*L, N*L] where entry
    ``[m*L + i, n*L + j]`` is the preference of voter i in hypothesis m for
    candidate j in hypothesis n. Same-hypothesis blocks and padded positions
    are exactly zero.
    """
    b, n, length, _ = h_hyp.shape
    dots = torch.einsum("bmid,bnjd->bmnij", h_hyp, h_hyp)
    voter_ok = hyp_mask[:, :, None, :, None]
    dots = dots.masked_fill(~voter_ok, float("-inf"))
    sim = stable_softmax(dots, dim=3)
    keep = ~torch.eye(n, dtype=torch.bool, device=h_hyp.device)[None, :, :, None, None]
    keep = keep & voter_ok & hyp_mask[:, None, :, None, :]
    sim = torch.where(keep, sim, torch.zeros_like(sim))
    return sim.permute(0, 1, 3, 2, 4).reshape(b, n * length, n * length)


def tally_votes(energies: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    """Extended energies: own energy plus similarity-weighted energies of cross-hypothesis voters.

    ``energies`` is [B, H, Q, N*L]; ``sim`` is [B, N*L, N*L].
    """
    return energies + torch.matmul(energies, sim.unsqueeze(1))


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

    def energies(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        return torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.d_head)

    def adjust(self, energies: torch.Tensor, sim: torch.Tensor | None) -> torch.Tensor:
        return energies

    def forward(self, query, memory, key_mask, sim=None, return_state=False):
        """``key_mask`` broadcasts to [B, H, Q, K]; True marks attendable keys."""
        e = self.energies(query, memory)
        e_ext = self.adjust(e, sim)
        alpha = stable_softmax(e_ext.masked_fill(~key_mask, float("-inf")), dim=-1)
        v = self._split(self.v(memory))
        ctx = torch.matmul(self.drop(alpha), v)
        b, _, t, _ = ctx.shape
        out = self.o(ctx.transpose(1, 2).reshape(b, t, -1))
        if return_state:
            return out, {"e": e, "e_ext": e_ext, "alpha": alpha}
        return out


class VotingAttention(MultiHeadAttention):
    """Hypothesis-target attention whose energies are re-scored by cross-hypothesis votes."""

    def __init__(self, d_model: int, n_heads: int, dropout: float, voting: bool):
        super().__init__(d_model, n_heads, dropout)
        self.voting = voting

    def adjust(self, energies, sim):
        if not self.voting or sim is None:
            return energies
        return tally_votes(energies, sim)


def voting_attention(query, keys, values, sim, key_mask=None, voting_enabled=True):
    """Single-head functional form over already-projected keys/values.

    query [Q, d], keys/values [K, d], sim [K, K]. Returns (context, state).
    """
    e = query @ keys.T / math.sqrt(keys.shape[-1])
    e_ext = tally_votes(e[None, None], sim[None])[0, 0] if voting_enabled else e
    if key_mask is not None:
        e_ext_masked = e_ext.masked_fill(~key_mask, float("-inf"))
    else:
        e_ext_masked = e_ext
    alpha = stable_softmax(e_ext_masked, dim=-1)
    return alpha @ values, {"e": e, "e_ext": e_ext, "alpha": alpha}


# ---------------------------------------------------------------------------
# layers


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_att = nn.LayerNorm(cfg.d_model)
        self.att = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        h = self.ln_att(x)
        x = x + self.drop(self.att(h, h, key_mask))
        return x + self.drop(self.ff(self.ln_ff(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers_enc))
        self.ln_out = nn.LayerNorm(cfg.d_model)

    def forward(self, x, mask):
        key_mask = mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, key_mask)
        return self.ln_out(x)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, voting: bool):
        super().__init__()
        self.ln_self = nn.LayerNorm(cfg.d_model)
        self.self_att = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln_src = nn.LayerNorm(cfg.d_model)
        self.src_att = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln_hyp = nn.LayerNorm(cfg.d_model)
        self.hyp_att = VotingAttention(cfg.d_model, cfg.n_heads, cfg.dropout, voting)
        self.ln_ff = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, self_mask, h_src, src_mask, h_hyp, hyp_mask, sim, states=None):
        h = self.ln_self(x)
        x = x + self.drop(self.self_att(h, h, self_mask))
        x = x + self.drop(self.src_att(self.ln_src(x), h_src, src_mask))
        if states is None:
            y = self.hyp_att(self.ln_hyp(x), h_hyp, hyp_mask, sim)
        else:
            y, st = self.hyp_att(self.ln_hyp(x), h_hyp, hyp_mask, sim, return_state=True)
            states.append(st)
        x = x + self.drop(y)
        return x + self.drop(self.ff(self.ln_ff(x)))


def sinusoid_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    dim = torch.arange(0, d_model, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, dim / d_model)
    table = torch.zeros(max_len, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle)[:, : d_model // 2]
    return table


@dataclass
class StepDistribution:
    """Output distributions for every decoder position (leading dims [B, T])."""

    h_trg: torch.Tensor
    log_p: torch.Tensor
    p_f: torch.Tensor
    p_r: torch.Tensor | None = None
    lam: torch.Tensor | None = None

    @property
    def p(self) -> torch.Tensor:
        return self.log_p.exp()


class VotingCombiner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=PAD)
        nn.init.normal_(self.embed.weight, std=cfg.d_model**-0.5)
        with torch.no_grad():
            self.embed.weight[PAD].zero_()
        self.register_buffer("pos", sinusoid_table(cfg.max_len, cfg.d_model).float(), persistent=False)
        self.src_encoder = Encoder(cfg)
        self.hyp_encoder = Encoder(cfg)
        last = cfg.n_layers_dec - 1
        self.dec_layers = nn.ModuleList(
            DecoderLayer(cfg, cfg.voting_enabled and (cfg.voting_layers == "all" or i == last))
            for i in range(cfg.n_layers_dec)
        )
        self.dec_ln = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        if cfg.restricted_vocab_enabled:
            self.gate = nn.Linear(cfg.d_model, 1)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        length = ids.shape[-1]
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len={self.cfg.max_len}")
        x = self.embed(ids) * math.sqrt(self.cfg.d_model) + self.pos[:length]
        return self.drop(x)

    # -- encoders ----------------------------------------------------------

    def encode_source(self, src: torch.Tensor, src_mask: torch.Tensor | None = None) -> torch.Tensor:
        if src_mask is None:
            src_mask = src != PAD
        return self.src_encoder(self._embed(src), src_mask)

    def encode_hypotheses(self, hyps: torch.Tensor, hyp_mask: torch.Tensor | None = None) -> torch.Tensor:
        """[B, N, L] ids -> [B, N, L, d]; each hypothesis is encoded independently."""
        if hyps.dim() != 3 or hyps.shape[1] == 0:
            raise ValueError("need at least one hypothesis per example")
        if hyp_mask is None:
            hyp_mask = hyps != PAD
        b, n, length = hyps.shape
        flat = self.hyp_encoder(self._embed(hyps.reshape(b * n, length)), hyp_mask.reshape(b * n, length))
        return flat.view(b, n, length, -1)

    def encode(self, batch: Batch):
        h_src = self.encode_source(batch.src, batch.src_mask)
        h_hyp = self.encode_hypotheses(batch.hyps, batch.hyp_mask)
        sim = compute_similarity(h_hyp, batch.hyp_mask) if self.cfg.voting_enabled else None
        return h_src, h_hyp, sim

    # -- decoder -----------------------------------------------------------

    def decode(self, trg_in, h_src, src_mask, h_hyp, hyp_mask, sim, states=None) -> torch.Tensor:
        b, t = trg_in.shape
        causal = torch.ones(t, t, dtype=torch.bool, device=trg_in.device).tril()
        self_mask = causal[None, None] & (trg_in != PAD)[:, None, None, :]
        n, length = h_hyp.shape[1], h_hyp.shape[2]
        mem = h_hyp.reshape(b, n * length, -1)
        mem_mask = hyp_mask.reshape(b, n * length)[:, None, None, :]
        src_key_mask = src_mask[:, None, None, :]
        x = self._embed(trg_in)
        for layer in self.dec_layers:
            x = layer(x, self_mask, h_src, src_key_mask, mem, mem_mask, sim, states)
        return self.dec_ln(x)

    def mix_vocab_probs(self, h_trg: torch.Tensor, restricted: torch.Tensor | None) -> StepDistribution:
        """Gate between a softmax over the restricted (hypothesis) vocabulary and the full one.

        ``restricted`` is a bool mask broadcastable to the logits.
        """
        logits = F.linear(h_trg, self.embed.weight)
        log_pf = F.log_softmax(logits, dim=-1)
        if not self.cfg.restricted_vocab_enabled:
            return StepDistribution(h_trg=h_trg, log_p=log_pf, p_f=log_pf.exp())
        if restricted is None or not bool(restricted.any(dim=-1).all()):
            raise ValueError("restricted vocabulary mask must have at least one member")
        log_pr = F.log_softmax(logits.masked_fill(~restricted, float("-inf")), dim=-1)
        z = self.gate(h_trg)
        log_p = torch.logaddexp(F.logsigmoid(z) + log_pr, F.logsigmoid(-z) + log_pf)
        return StepDistribution(h_trg=h_trg, log_p=log_p, p_f=log_pf.exp(), p_r=log_pr.exp(), lam=torch.sigmoid(z).squeeze(-1))

    def forward(self, batch: Batch, states: list | None = None) -> StepDistribution:
        if batch.trg_in is None:
            raise ValueError("teacher forcing requires a target")
        h_src, h_hyp, sim = self.encode(batch)
        h_trg = self.decode(batch.trg_in, h_src, batch.src_mask, h_hyp, batch.hyp_mask, sim, states)
        restricted = batch.restricted[:, None, :] if self.cfg.restricted_vocab_enabled else None
        return self.mix_vocab_probs(h_trg, restricted)


def smoothed_nll(log_p: torch.Tensor, target: torch.Tensor, label_smoothing: float = 0.0) -> torch.Tensor:
    """Cross-entropy against (1 - eps) * one_hot + eps * uniform, per position."""
    nll = -log_p.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if label_smoothing > 0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * log_p.mean(dim=-1)
    return nll


def forward_loss(model: VotingCombiner, batch: Batch, label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean per-target-token (smoothed) negative log-likelihood."""
    if batch.size == 0:
        raise ValueError("empty batch")
    nll = smoothed_nll(model(batch).log_p, batch.trg_out, label_smoothing)
    mask = batch.trg_mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


def loss_and_grads(model: VotingCombiner, examples: Sequence[CombinationExample], label_smoothing: float = 0.0):
    """Loss value plus a name -> gradient array map for every parameter."""
    if not examples:
        raise ValueError("empty batch")
    model.zero_grad(set_to_none=True)
    loss = forward_loss(model, collate(examples, model.cfg.vocab_size), label_smoothing)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return loss.item(), grads


# ---------------------------------------------------------------------------
# checkpoint file
#
#   bytes 0-7    magic b"VOTECOMB"
#   bytes 8-11   format version, uint32 little-endian
#   bytes 12-15  header length H, uint32 little-endian
#   next H bytes UTF-8 JSON: {"config": {...}, "params": [{"name", "dtype",
#                "shape", "offset", "nbytes"}, ...]}
#   remainder    parameter blocks, raw little-endian, offsets relative to
#                the end of the header

CHECKPOINT_MAGIC = b"VOTECOMB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: VotingCombiner, path, extra: dict | None = None) -> None:
    blocks, index, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blocks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(model.cfg), "params": index, "extra": extra or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blocks:
            fh.write(raw)


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a votecomb checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(fh.read(hlen).decode("utf-8")), 16 + hlen


def load_checkpoint(path, expected: ModelConfig | None = None) -> VotingCombiner:
    """Rebuild a model; a mismatch with ``expected`` raises CheckpointError."""
    header, start = read_checkpoint_header(path)
    cfg = ModelConfig(**header["config"])
    if expected is not None and expected != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in vars(expected).items() if getattr(cfg, k) != v}
        raise CheckpointError(f"checkpoint config does not match (expected, found): {diff}")
    model = VotingCombiner(cfg)
    data = open(path, "rb").read()[start:]
    state = {}
    for entry in header["params"]:
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])), offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model
