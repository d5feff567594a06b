"""Cross-entropy and self-critical training, learning-rate schedules, Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ClipRecord
from .metrics import DocumentFrequency, RewardSpec, combined_reward, cider_corpus, corpus_bleu
from .model import (
    ModelConfig,
    ModelParams,
    decoder_logits,
    encode_batch,
    greedy_decode_batch,
    make_encoder_batch,
    sample_decode_batch,
    save_checkpoint,
    sequence_log_probs,
)
from .tokenizer import PAD, Vocabulary, detokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_cider", "val_bleu4")


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass
class ScheduleState:
    mode: str = "default"
    it: int = 0
    warmup_steps: int = 10000
    d_model: int = 512
    T0_steps: int = 1
    eta_min: float = 0.0
    eta_max: float | None = None
    restarts_enabled: bool = False
    constant_rate: float = 5e-6

    def peak(self) -> float:
        """Largest rate of the inverse-square-root schedule, reached at the end of warm-up."""
        return self.d_model ** -0.5 * self.warmup_steps ** -0.5


def lr_default(state: ScheduleState) -> float:
    it = state.it
    if it < 1:
        raise ValueError("schedule step must be >= 1")
    return state.d_model ** -0.5 * min(it ** -0.5, it * state.warmup_steps ** -1.5)


def lr_sgdr_warmup(state: ScheduleState) -> float:
    """Linear warm-up to ``eta_max``, then cosine decay over ``T0_steps``.

    With restarts the cosine repeats with the same period; without, the rate
    stays at ``eta_min`` once the first period is over.
    """
    it = state.it
    if it < 1:
        raise ValueError("schedule step must be >= 1")
    if state.T0_steps <= 0:
        raise ValueError("T0_steps must be positive")
    eta_max = state.peak() if state.eta_max is None else state.eta_max
    if it < state.warmup_steps:
        return eta_max * it / state.warmup_steps
    t = it - state.warmup_steps
    if state.restarts_enabled:
        t %= state.T0_steps
    elif t >= state.T0_steps:
        return state.eta_min
    return state.eta_min + 0.5 * (eta_max - state.eta_min) * (1 + math.cos(math.pi * t / state.T0_steps))


def learning_rate(state: ScheduleState) -> float:
    if state.mode == "default":
        return lr_default(state)
    if state.mode == "sgdr_warmup":
        return lr_sgdr_warmup(state)
    if state.mode == "constant":
        return state.constant_rate
    raise ValueError(f"unknown schedule {state.mode!r}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, opt: OptimizerState, rate: float) -> None:
    """One bias-corrected Adam update from the gradients held on ``params``.

    Frozen tensors and tensors the loss never reached are left alone.
    """
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p.values)
            opt.v[name] = np.zeros_like(p.values)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= rate * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# ---------------------------------------------------------------------------
# objectives


def xe_loss(logits: Tensor, target) -> Tensor:
    """Summed negative log-likelihood of ``target`` tokens, averaged over sequences.

    ``logits`` is [T, V] or [B, T, V]; ``target`` holds the matching next
    tokens (already shifted past bos). Pad targets are ignored.
    """
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim == 2:
        logits = ad.reshape(logits, (1, *logits.shape))
        target = target.reshape(1, -1)
    if target.shape != logits.shape[:2]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape[:2]}")
    vocab = logits.shape[-1]
    if target.size and (target.max() >= vocab or target.min() < 0):
        raise ValueError(f"target id {int(target.max())} outside vocabulary of size {vocab}")
    lp = ad.pick_last(ad.log_softmax(logits, axis=-1), target)
    weight = (target != PAD).astype(np.float64)
    return ad.sum_all(ad.mul(lp, Tensor(weight))) * (-1.0 / target.shape[0])


def pad_tokens(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def clip_inputs(records: Sequence[ClipRecord], use_audio: bool):
    return [(r.vision, r.audio if use_audio else None) for r in records]


def xe_batch_loss(cfg, params, records, token_seqs, use_audio: bool,
                  rng: np.random.Generator | None = None) -> Tensor:
    batch = make_encoder_batch(cfg, clip_inputs(records, use_audio))
    z = encode_batch(cfg, params, batch, rng)
    tokens = pad_tokens(token_seqs)
    if tokens.shape[1] - 1 > cfg.max_len:
        raise ValueError(f"caption of {tokens.shape[1]} tokens exceeds max_len={cfg.max_len}")
    logits = decoder_logits(cfg, params, tokens[:, :-1], z, batch.key_mask, rng)
    return xe_loss(logits, tokens[:, 1:])


@dataclass
class ScstStats:
    loss: float
    mean_sample_reward: float
    mean_greedy_reward: float
    mean_advantage: float
    updated: bool


def scst_loss(cfg, params, records: Sequence[ClipRecord], vocab: Vocabulary, spec: RewardSpec,
              df: DocumentFrequency, rng: np.random.Generator, use_audio: bool,
              max_len: int | None = None, use_baseline: bool = True):
    """Self-critical policy-gradient surrogate for one batch.

    Every token of a sample is weighted by ``r(sample) - r(greedy)``; the
    result is averaged over samples and items. Returns (loss, advantages,
    sample rewards, greedy rewards).
    """
    for r in records:
        if not r.captions:
            raise ValueError(f"{r.video_id}: no reference captions for the reward")
    max_len = max_len or cfg.max_len
    batch = make_encoder_batch(cfg, clip_inputs(records, use_audio))
    mask = batch.key_mask
    with ad.no_grad():
        z0 = encode_batch(cfg, params, batch)
        greedy = greedy_decode_batch(cfg, params, z0, mask, max_len)
        samples = sample_decode_batch(cfg, params, z0, mask, max_len, rng, spec.n_samples)

    seqs, adv, r_s, r_g = [], [], [], []
    for item, rec in enumerate(records):
        base = combined_reward(detokenize(greedy[item], vocab), rec.captions, spec, df)
        r_g.append(base)
        for seq, _ in samples[item]:
            r = combined_reward(detokenize(seq, vocab), rec.captions, spec, df)
            r_s.append(r)
            adv.append(r - base if use_baseline else r)
            seqs.append(seq)
    adv = np.asarray(adv)

    rows = np.repeat(np.arange(len(records)), spec.n_samples)
    z = ad.take_rows(encode_batch(cfg, params, batch), rows)
    lp, valid = sequence_log_probs(cfg, params, z, mask[rows], seqs)
    weight = adv[:, None] * valid
    loss = ad.sum_all(ad.mul(lp, Tensor(weight))) * (-1.0 / len(seqs))
    return loss, adv, np.asarray(r_s), np.asarray(r_g)


def scst_step(cfg, params, opt: OptimizerState, records, vocab, spec: RewardSpec,
              df: DocumentFrequency, rng: np.random.Generator, rate: float,
              use_audio: bool, max_len: int | None = None) -> ScstStats:
    """Compute the SCST loss, backpropagate and apply Adam.

    A batch whose advantages are all zero carries no signal; parameters and
    optimizer state are then left exactly as they were.
    """
    params.zero_grad()
    loss, adv, r_s, r_g = scst_loss(cfg, params, records, vocab, spec, df, rng, use_audio, max_len)
    updated = bool(np.any(adv != 0))
    if updated:
        loss.backward()
        adam_step(params, opt, rate)
    params.zero_grad()
    return ScstStats(loss.item(), float(r_s.mean()), float(r_g.mean()), float(adv.mean()), updated)


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class TrainRunConfig:
    max_epochs: int = 50
    batch_size: int = 128
    scst_batch_size: int = 16
    scst_lr: float = 5e-6
    scst_max_len: int | None = None
    patience: int = 5
    schedule: str = "default"
    warmup_steps: int = 10000
    eta_min: float = 0.0
    eta_max: float | None = None
    sgdr_period_epochs: float = 5.0
    restarts: bool = False
    reward: RewardSpec = field(default_factory=RewardSpec)
    use_audio: bool = True
    decode_max_len: int | None = None
    seed: int = 0


@dataclass
class TrainResult:
    best_params: ModelParams
    last_params: ModelParams
    log: list[dict]
    best_epoch: int
    stopped_early: bool


def greedy_captions(cfg, params, records, vocab, use_audio: bool, max_len: int | None = None,
                    batch_size: int = 256) -> list[str]:
    max_len = max_len or cfg.max_len
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        batch = make_encoder_batch(cfg, clip_inputs(chunk, use_audio))
        with ad.no_grad():
            z = encode_batch(cfg, params, batch)
        for seq in greedy_decode_batch(cfg, params, z, batch.key_mask, max_len):
            out.append(detokenize(seq, vocab))
    return out


def validate(cfg, params, records, vocab, use_audio, max_len=None) -> tuple[float, float, list[str]]:
    if not records:
        return 0.0, 0.0, []
    caps = greedy_captions(cfg, params, records, vocab, use_audio, max_len)
    refs = [r.captions for r in records]
    return cider_corpus(caps, refs).mean, corpus_bleu(caps, refs)[3], caps


def write_metric_log(path, rows: Sequence[dict], extra_first: Sequence[str] = ()) -> None:
    cols = list(extra_first) + list(LOG_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: _fmt(row[c]) for c in cols})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def train_loop(
    run: TrainRunConfig,
    cfg: ModelConfig,
    params: ModelParams,
    train_records: Sequence[ClipRecord],
    val_records: Sequence[ClipRecord],
    vocab: Vocabulary,
    objective: str = "xe",
    out_dir=None,
    meta: dict | None = None,
) -> TrainResult:
    """Epochs of seeded minibatches with greedy validation and CIDEr early stopping.

    ``objective`` is ``"xe"`` (teacher-forced cross-entropy) or ``"scst"``.
    When ``out_dir`` is given, ``best.fpec``, ``last.fpec`` and ``metrics.csv``
    are written there.
    """
    rng = np.random.default_rng(run.seed)
    drop_rng = np.random.default_rng([run.seed, 1])
    sample_rng = np.random.default_rng([run.seed, 2])

    examples = [(i, vocab.encode(c)) for i, r in enumerate(train_records) for c in r.captions]
    if not examples:
        raise ValueError("no training examples")
    bs = run.batch_size if objective == "xe" else run.scst_batch_size
    steps_per_epoch = math.ceil((len(examples) if objective == "xe" else len(train_records)) / bs)
    sched = ScheduleState(
        mode="constant" if objective == "scst" else run.schedule,
        warmup_steps=run.warmup_steps,
        d_model=cfg.d_model,
        T0_steps=max(1, int(round(run.sgdr_period_epochs * steps_per_epoch))),
        eta_min=run.eta_min,
        eta_max=run.eta_max,
        restarts_enabled=run.restarts,
        constant_rate=run.scst_lr,
    )
    df = None
    if objective == "scst":
        df = DocumentFrequency.from_references([r.captions for r in train_records])
    opt = OptimizerState()
    best_score = -math.inf
    best_params = params.copy()
    best_epoch = 0
    bad_epochs = 0
    rows: list[dict] = []
    stopped_early = False
    max_len = run.decode_max_len

    for epoch in range(1, run.max_epochs + 1):
        losses = []
        if objective == "xe":
            order = rng.permutation(len(examples))
            for s in range(0, len(order), bs):
                idx = order[s : s + bs]
                recs = [train_records[examples[k][0]] for k in idx]
                toks = [examples[k][1] for k in idx]
                sched.it += 1
                rate = learning_rate(sched)
                params.zero_grad()
                loss = xe_batch_loss(cfg, params, recs, toks, run.use_audio, drop_rng)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError(f"non-finite loss at step {sched.it}")
                loss.backward()
                adam_step(params, opt, rate)
                losses.append(loss.item())
        else:
            order = rng.permutation(len(train_records))
            for s in range(0, len(order), bs):
                recs = [train_records[k] for k in order[s : s + bs]]
                sched.it += 1
                rate = learning_rate(sched)
                stats = scst_step(cfg, params, opt, recs, vocab, run.reward, df, sample_rng, rate,
                                  run.use_audio, run.scst_max_len or max_len)
                losses.append(stats.loss)
        params.zero_grad()

        val_cider, val_bleu4, _ = validate(cfg, params, list(val_records), vocab, run.use_audio, max_len)
        row = {
            "epoch": epoch,
            "step": sched.it,
            "lr": rate,
            "train_loss": float(np.mean(losses)),
            "val_cider": val_cider,
            "val_bleu4": val_bleu4,
        }
        rows.append(row)
        log.info("epoch %d step %d lr %.3g loss %.4f val CIDEr %.4f BLEU-4 %.4f",
                 epoch, sched.it, rate, row["train_loss"], val_cider, val_bleu4)
        if val_cider > best_score:
            best_score = val_cider
            best_params = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > run.patience:
                stopped_early = True
                break

    result = TrainResult(best_params, params.copy(), rows, best_epoch, stopped_early)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(meta or {}, seed=run.seed, objective=objective, best_epoch=best_epoch)
        save_checkpoint(out / "best.fpec", cfg, result.best_params, meta)
        save_checkpoint(out / "last.fpec", cfg, result.last_params, meta)
        write_metric_log(out / "metrics.csv", rows)
    return result
