"""Adam training with inverse-square-root warmup and dev-BLEU model selection."""

from __future__ import annotations

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .corpus import CombinationExample, make_rng
from .decode import greedy_decode, strip_eos
from .evaluation import bleu
from .model import ModelConfig, VotingCombiner, collate, forward_loss, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class Ablation:
    voting: bool = True
    restricted_vocab: bool = True
    dynamic_weighting: bool = True


@dataclass
class TrainConfig:
    batch_tokens: int = 1024
    warmup_steps: int = 300
    base_lr_scale: float = 1.0
    max_steps: int = 2000
    seed: int = 0
    eval_every: int = 250
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    dev_sentences: int = 300
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = Ablation(**self.ablation)
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


def lr_schedule(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def apply_ablation(cfg: ModelConfig, ablation: Ablation) -> ModelConfig:
    out = copy.copy(cfg)
    out.voting_enabled = cfg.voting_enabled and ablation.voting
    out.restricted_vocab_enabled = cfg.restricted_vocab_enabled and ablation.restricted_vocab
    return out


def configure_threads() -> None:
    """Honour VOTECOMB_THREADS (default 1: the bit-deterministic reference mode)."""
    torch.set_num_threads(max(1, int(os.environ.get("VOTECOMB_THREADS", "1"))))


def make_batches(examples: Sequence[CombinationExample], batch_tokens: int) -> list[list[int]]:
    """Group length-sorted examples so padded target tokens per batch stay <= batch_tokens."""
    longest = max(len(ex.trg) for ex in examples)
    if batch_tokens < longest:
        raise ValueError(f"batch_tokens={batch_tokens} is smaller than the longest example ({longest})")
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].trg), len(examples[i].src), i))
    batches, cur, cur_max = [], [], 0
    for i in order:
        length = len(examples[i].trg)
        if cur and max(cur_max, length) * (len(cur) + 1) > batch_tokens:
            batches.append(cur)
            cur, cur_max = [], 0
        cur.append(i)
        cur_max = max(cur_max, length)
    if cur:
        batches.append(cur)
    return batches


def dev_bleu(model: VotingCombiner, dev: Sequence[CombinationExample]) -> float:
    outs = greedy_decode(model, list(dev))
    return bleu([strip_eos(o) for o in outs], [[strip_eos(ex.trg)] for ex in dev])


@dataclass
class TrainResult:
    model: VotingCombiner
    best_step: int
    best_dev_bleu: float
    records: list[dict]


LOG_HEADER = "step\tlr\ttrain_loss\tdev_bleu"


def train(
    train_set: Sequence[CombinationExample],
    dev_set: Sequence[CombinationExample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train a combiner and keep the parameters with the best greedy dev BLEU.

    If ``out_dir`` is given, ``metrics.tsv`` (columns ``LOG_HEADER``, ``-`` for
    steps without a dev evaluation) and ``best.ckpt`` are written there.
    """
    configure_threads()
    torch.manual_seed(cfg.seed)
    model_cfg = apply_ablation(model_cfg, cfg.ablation)
    model = VotingCombiner(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=1.0, betas=(0.9, 0.98), eps=1e-9)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: lr_schedule(i + 1, model_cfg.d_model, cfg.warmup_steps, cfg.base_lr_scale)
    )
    dev = list(dev_set)[: cfg.dev_sentences]
    batches = make_batches(train_set, cfg.batch_tokens)
    rng = make_rng(cfg.seed)

    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.tsv", "w", encoding="utf-8")
        log_fh.write(LOG_HEADER + "\n")

    records, best_state, best_bleu, best_step = [], None, -1.0, 0
    step = 0
    try:
        while step < cfg.max_steps:
            for b in rng.permutation(len(batches)):
                if step >= cfg.max_steps:
                    break
                step += 1
                model.train()
                batch = collate([train_set[i] for i in batches[b]], model_cfg.vocab_size)
                loss = forward_loss(model, batch, cfg.label_smoothing)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(step, loss.item())
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
                lr = opt.param_groups[0]["lr"]
                opt.step()
                sched.step()
                rec = {"step": step, "lr": lr, "train_loss": loss.item(), "dev_bleu": None}
                if step % cfg.eval_every == 0 or step == cfg.max_steps:
                    rec["dev_bleu"] = dev_bleu(model, dev)
                    log.info("step %d loss %.4f dev BLEU %.2f", step, rec["train_loss"], rec["dev_bleu"])
                    if rec["dev_bleu"] > best_bleu:
                        best_bleu, best_step = rec["dev_bleu"], step
                        best_state = copy.deepcopy(model.state_dict())
                records.append(rec)
                if log_fh is not None:
                    dv = "-" if rec["dev_bleu"] is None else f"{rec['dev_bleu']:.4f}"
                    log_fh.write(f"{step}\t{lr:.8g}\t{rec['train_loss']:.6f}\t{dv}\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "best.ckpt", extra={"train_config": asdict(cfg), "best_step": best_step})
    return TrainResult(model=model, best_step=best_step, best_dev_bleu=best_bleu, records=records)


def parameter_names(cfg: ModelConfig) -> set[str]:
    return {name for name, _ in VotingCombiner(cfg).named_parameters()}

