"""Encoder-decoder captioning transformer over vision and audio frame sequences.

Pre-norm residual blocks throughout. Encoder self-attention may append learned
memory slots to its keys and values; the output projection reuses the word
embedding matrix.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AUDIO_DIM, FeatureSequence
from .positional import TimestampFactors, build_plan, sinusoidal_table
from .tokenizer import BOS, EOS, PAD

NEG_INF = -1e9
CHECKPOINT_MAGIC = b"FPEC"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 512
    d_ff: int = 2048
    n_layers_enc: int = 8
    n_layers_dec: int = 8
    n_heads: int = 8
    mem_slots: int = 64
    vocab_size: int = 12000
    max_len: int = 30
    pe_mode: str = "default"
    dropout_rate: float = 0.1
    d_vision: int = 1024
    n_v_max: int = 64
    encoder_attention: str = "memory"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal encodings")
        if self.mem_slots < 0:
            raise ConfigError("mem_slots must be nonnegative")
        if self.pe_mode not in ("default", "naive_fusion", "fpe"):
            raise ConfigError(f"unknown pe_mode {self.pe_mode!r}")
        if self.encoder_attention not in ("memory", "standard"):
            raise ConfigError(f"unknown encoder_attention {self.encoder_attention!r}")
        if self.encoder_attention == "standard" and self.mem_slots:
            raise ConfigError("standard encoder attention has no memory slots")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ModelParams(dict):
    """Name -> Tensor. The word embedding doubles as the output projection."""

    @property
    def word_embedding(self) -> Tensor:
        return self["word_emb"]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.items() if v.requires_grad]

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.values.copy(), requires_grad=v.requires_grad) for k, v in self.items()}
        )


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains, N(0, 1/sqrt(d)) memory."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p = ModelParams()

    def lin(name, fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        p[name + ".w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), True)
        p[name + ".b"] = Tensor(np.zeros(fan_out), True)

    def norm(name):
        p[name + ".g"] = Tensor(np.ones(d), True)
        p[name + ".b"] = Tensor(np.zeros(d), True)

    def attn(prefix):
        for w in ("q", "k", "v", "o"):
            lin(f"{prefix}.{w}", d, d)

    bound = 1.0 / math.sqrt(d)
    p["word_emb"] = Tensor(rng.uniform(-bound, bound, size=(cfg.vocab_size, d)), True)
    lin("vis_emb", cfg.d_vision, d)
    lin("aud_emb", AUDIO_DIM, d)
    for layer in range(cfg.n_layers_enc):
        pre = f"enc.{layer}"
        norm(pre + ".ln1")
        attn(pre + ".attn")
        if cfg.mem_slots:
            std = 1.0 / math.sqrt(d)
            p[pre + ".mem_k"] = Tensor(rng.normal(0, std, size=(cfg.mem_slots, d)), True)
            p[pre + ".mem_v"] = Tensor(rng.normal(0, std, size=(cfg.mem_slots, d)), True)
        norm(pre + ".ln2")
        lin(pre + ".ff1", d, cfg.d_ff)
        lin(pre + ".ff2", cfg.d_ff, d)
    norm("enc.ln")
    for layer in range(cfg.n_layers_dec):
        pre = f"dec.{layer}"
        norm(pre + ".ln1")
        attn(pre + ".self")
        norm(pre + ".ln2")
        attn(pre + ".cross")
        norm(pre + ".ln3")
        lin(pre + ".ff1", d, cfg.d_ff)
        lin(pre + ".ff2", cfg.d_ff, d)
    norm("dec.ln")
    return p


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, p: ModelParams, name: str) -> Tensor:
    return ad.matmul(x, p[name + ".w"]) + p[name + ".b"]


def norm(x: Tensor, p: ModelParams, name: str, eps: float) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"], eps)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None) -> tuple[Tensor, Tensor]:
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(qh.shape[-1]))
    if mask is not None:
        scores = ad.masked_fill(scores, ~mask, NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    return _merge_heads(ad.matmul(weights, vh)), weights


def multi_head_attention(
    query: Tensor,
    source: Tensor,
    p: ModelParams,
    prefix: str,
    n_heads: int,
    key_mask: np.ndarray | None = None,
    causal: bool = False,
) -> Tensor:
    """Plain multi-head attention of ``query`` [B, n, d] over ``source`` [B, k, d].

    ``key_mask`` [B, k] marks valid (non-padding) source positions.
    """
    q = linear(query, p, prefix + ".q")
    k = linear(source, p, prefix + ".k")
    v = linear(source, p, prefix + ".v")
    mask = None
    if key_mask is not None:
        mask = key_mask[:, None, None, :]
    if causal:
        n = query.shape[1]
        tri = np.tril(np.ones((n, source.shape[1]), dtype=bool))[None, None]
        mask = tri if mask is None else (mask & tri)
    out, _ = _attend(q, k, v, n_heads, mask)
    return linear(out, p, prefix + ".o")


def memory_augmented_attention(
    x: Tensor,
    mem_k: Tensor,
    mem_v: Tensor,
    p: ModelParams,
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Self-attention whose keys and values are extended by ``m`` learned slots.

    ``x`` is [B, n, d] (or [n, d]); ``mem_k``/``mem_v`` are [m, d] and are
    appended after the key/value projections, split across heads like any
    other key. ``mask`` [B, n] marks valid frames; memory slots are never
    masked.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1, *x.shape))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    b, n, _ = x.shape
    m = mem_k.shape[0]
    if mask is not None and mask.shape != (b, n):
        raise ad.ShapeError(f"mask shape {mask.shape} does not match frames ({b}, {n})")
    q = linear(x, p, prefix + ".q")
    k = ad.concat([linear(x, p, prefix + ".k"), ad.expand(mem_k, (b,))], axis=1)
    v = ad.concat([linear(x, p, prefix + ".v"), ad.expand(mem_v, (b,))], axis=1)
    full_mask = None
    if mask is not None:
        full_mask = np.concatenate([mask, np.ones((b, m), dtype=bool)], axis=1)[:, None, None, :]
    out, weights = _attend(q, k, v, n_heads, full_mask)
    out = linear(out, p, prefix + ".o")
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return linear(ad.relu(linear(x, p, prefix + ".ff1")), p, prefix + ".ff2")


# ---------------------------------------------------------------------------
# encoder


@dataclass
class EncoderBatch:
    vision: np.ndarray          # [B, Nv, d_vision]
    vision_mask: np.ndarray     # [B, Nv]
    audio: np.ndarray | None    # [B, Na, 128]
    audio_mask: np.ndarray | None
    positions: np.ndarray       # [B, Nv + Na]

    @property
    def key_mask(self) -> np.ndarray:
        if self.audio is None:
            return self.vision_mask
        return np.concatenate([self.vision_mask, self.audio_mask], axis=1)

    def __len__(self) -> int:
        return self.vision.shape[0]


def make_encoder_batch(
    cfg: ModelConfig,
    clips: Sequence[tuple[FeatureSequence, FeatureSequence | None]],
) -> EncoderBatch:
    """Pad a list of (vision, audio) pairs and lay out their frame positions."""
    use_audio = any(a is not None for _, a in clips)
    if use_audio and any(a is None for _, a in clips):
        raise ConfigError("a batch must have audio for every clip or for none")
    b = len(clips)
    nv = max(v.n for v, _ in clips)
    na = max(a.n for _, a in clips) if use_audio else 0
    vision = np.zeros((b, nv, cfg.d_vision))
    vmask = np.zeros((b, nv), dtype=bool)
    audio = np.zeros((b, na, AUDIO_DIM)) if use_audio else None
    amask = np.zeros((b, na), dtype=bool) if use_audio else None
    positions = np.zeros((b, nv + na))
    for i, (v, a) in enumerate(clips):
        if v.dim != cfg.d_vision:
            raise ConfigError(f"vision features are {v.dim}-wide, model expects {cfg.d_vision}")
        vision[i, : v.n] = v.frames
        vmask[i, : v.n] = True
        n_a = 0
        factors_a = 1.0
        if use_audio:
            if a.dim != AUDIO_DIM:
                raise ConfigError(f"audio features are {a.dim}-wide, model expects {AUDIO_DIM}")
            audio[i, : a.n] = a.frames
            amask[i, : a.n] = True
            n_a = a.n
            factors_a = a.spf
        plan = build_plan(
            cfg.pe_mode,
            v.n,
            n_a,
            TimestampFactors(v.spf, factors_a) if cfg.pe_mode == "fpe" else None,
            cfg.n_v_max,
        )
        positions[i, : v.n] = plan.positions[: v.n]
        if use_audio:
            positions[i, nv : nv + n_a] = plan.positions[v.n:]
    return EncoderBatch(vision, vmask, audio, amask, positions)


def encode_batch(
    cfg: ModelConfig,
    p: ModelParams,
    batch: EncoderBatch,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encoder states [B, Nv + Na, d_model]; ``rng`` enables dropout."""
    d = cfg.d_model
    parts = [linear(Tensor(batch.vision), p, "vis_emb")]
    if batch.audio is not None:
        parts.append(linear(Tensor(batch.audio), p, "aud_emb"))
    x = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    pe = sinusoidal_table(batch.positions.reshape(-1), d).reshape(*batch.positions.shape, d)
    x = ad.dropout(x + Tensor(pe), cfg.dropout_rate, rng)
    mask = batch.key_mask
    b = len(batch)
    empty = Tensor(np.zeros((0, d)))
    for layer in range(cfg.n_layers_enc):
        pre = f"enc.{layer}"
        h = norm(x, p, pre + ".ln1", cfg.ln_eps)
        if cfg.encoder_attention == "standard":
            a = multi_head_attention(h, h, p, pre + ".attn", cfg.n_heads, key_mask=mask)
        else:
            mk = p.get(pre + ".mem_k", empty)
            mv = p.get(pre + ".mem_v", empty)
            a = memory_augmented_attention(h, mk, mv, p, pre + ".attn", cfg.n_heads, mask)
        x = x + ad.dropout(a, cfg.dropout_rate, rng)
        h = norm(x, p, pre + ".ln2", cfg.ln_eps)
        x = x + ad.dropout(feed_forward(h, p, pre), cfg.dropout_rate, rng)
    assert x.shape[0] == b
    return norm(x, p, "enc.ln", cfg.ln_eps)


def encode(
    vision: FeatureSequence,
    audio: FeatureSequence | None,
    cfg: ModelConfig,
    params: ModelParams,
) -> Tensor:
    """Encoder states [n_v (+ n_a), d_model] for one clip."""
    z = encode_batch(cfg, params, make_encoder_batch(cfg, [(vision, audio)]))
    return ad.reshape(z, z.shape[1:])


# ---------------------------------------------------------------------------
# decoder


def decoder_logits(
    cfg: ModelConfig,
    p: ModelParams,
    tokens: np.ndarray,
    z: Tensor,
    key_mask: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Next-token logits [B, T, V] for every prefix of ``tokens`` [B, T]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, t = tokens.shape
    d = cfg.d_model
    emb = p.word_embedding
    x = ad.take_rows(emb, tokens) * math.sqrt(d)
    x = ad.dropout(x + Tensor(sinusoidal_table(np.arange(t), d)), cfg.dropout_rate, rng)
    for layer in range(cfg.n_layers_dec):
        pre = f"dec.{layer}"
        h = norm(x, p, pre + ".ln1", cfg.ln_eps)
        x = x + ad.dropout(
            multi_head_attention(h, h, p, pre + ".self", cfg.n_heads, causal=True),
            cfg.dropout_rate, rng,
        )
        h = norm(x, p, pre + ".ln2", cfg.ln_eps)
        x = x + ad.dropout(
            multi_head_attention(h, z, p, pre + ".cross", cfg.n_heads, key_mask=key_mask),
            cfg.dropout_rate, rng,
        )
        h = norm(x, p, pre + ".ln3", cfg.ln_eps)
        x = x + ad.dropout(feed_forward(h, p, pre), cfg.dropout_rate, rng)
    h = norm(x, p, "dec.ln", cfg.ln_eps)
    return ad.matmul(h, ad.transpose(emb, (1, 0)))


def _next_log_probs(cfg, p, prefixes: np.ndarray, z: Tensor, key_mask) -> np.ndarray:
    logits = decoder_logits(cfg, p, prefixes, z, key_mask)
    last = logits.values[:, -1, :]
    shifted = last - last.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _as_batch(z: Tensor, key_mask):
    if z.ndim == 2:
        z = Tensor(z.values[None])
    if key_mask is None:
        key_mask = np.ones(z.shape[:2], dtype=bool)
    return z, np.asarray(key_mask, dtype=bool).reshape(z.shape[:2])


def decode_step(tokens_so_far: Sequence[int], z: Tensor, cfg: ModelConfig, params: ModelParams,
                key_mask=None) -> np.ndarray:
    """Distribution over the next token given a bos-led prefix."""
    if len(tokens_so_far) < 1:
        raise ValueError("prefix must contain at least the bos token")
    if len(tokens_so_far) > cfg.max_len:
        raise ValueError(f"prefix of length {len(tokens_so_far)} exceeds max_len={cfg.max_len}")
    z, key_mask = _as_batch(z, key_mask)
    with ad.no_grad():
        lp = _next_log_probs(cfg, params, np.asarray([tokens_so_far]), z, key_mask)
    return np.exp(lp[0])


def greedy_decode_batch(cfg, p, z: Tensor, key_mask, max_len: int) -> list[list[int]]:
    """Argmax decoding; stops per row at eos or after ``max_len`` generated tokens."""
    if max_len > cfg.max_len:
        raise ValueError(f"max_len={max_len} exceeds model max_len={cfg.max_len}")
    b = z.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    with ad.no_grad():
        for _ in range(max_len):
            lp = _next_log_probs(cfg, p, seqs, z, key_mask)
            nxt = np.where(done, PAD, lp.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    return [_trim(row) for row in seqs]


def greedy_decode(z: Tensor, cfg: ModelConfig, params: ModelParams, max_len: int,
                  key_mask=None) -> list[int]:
    z, key_mask = _as_batch(z, key_mask)
    return greedy_decode_batch(cfg, params, z, key_mask, max_len)[0]


def _trim(row: np.ndarray) -> list[int]:
    out = [int(row[0])]
    for tok in row[1:]:
        if tok == PAD:
            break
        out.append(int(tok))
        if tok == EOS:
            break
    return out


def sample_decode_batch(cfg, p, z: Tensor, key_mask, max_len: int, rng: np.random.Generator,
                        n_samples: int) -> list[list[tuple[list[int], list[float]]]]:
    """``n_samples`` categorical rollouts per item, with the log-prob of every emitted token."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if max_len > cfg.max_len:
        raise ValueError(f"max_len={max_len} exceeds model max_len={cfg.max_len}")
    b = z.shape[0]
    rep = np.repeat(np.arange(b), n_samples)
    zr = Tensor(z.values[rep])
    mask = key_mask[rep]
    rows = len(rep)
    seqs = np.full((rows, 1), BOS, dtype=np.int64)
    logps = np.zeros((rows, 0))
    done = np.zeros(rows, dtype=bool)
    with ad.no_grad():
        for _ in range(max_len):
            lp = _next_log_probs(cfg, p, seqs, zr, mask)
            cdf = np.cumsum(np.exp(lp), axis=-1)
            u = rng.random(rows) * cdf[:, -1]
            nxt = np.minimum((cdf <= u[:, None]).sum(axis=-1), lp.shape[-1] - 1)
            chosen = lp[np.arange(rows), nxt]
            nxt = np.where(done, PAD, nxt)
            chosen = np.where(done, 0.0, chosen)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            logps = np.concatenate([logps, chosen[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out: list[list[tuple[list[int], list[float]]]] = [[] for _ in range(b)]
    for r in range(rows):
        seq = _trim(seqs[r])
        out[rep[r]].append((seq, [float(x) for x in logps[r, : len(seq) - 1]]))
    return out


def sample_decode(z: Tensor, cfg: ModelConfig, params: ModelParams, max_len: int, rng_seed: int,
                  n_s: int, key_mask=None) -> list[tuple[list[int], list[float]]]:
    z, key_mask = _as_batch(z, key_mask)
    rng = np.random.default_rng(rng_seed)
    return sample_decode_batch(cfg, params, z, key_mask, max_len, rng, n_s)[0]


def sequence_log_probs(cfg, p, z: Tensor, key_mask, seqs: Sequence[Sequence[int]],
                       rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Differentiable log p of each token after bos: ([B, T-1] tensor, validity mask)."""
    t = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), t), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    logits = decoder_logits(cfg, p, tokens[:, :-1], z, key_mask, rng)
    lp = ad.pick_last(ad.log_softmax(logits, axis=-1), tokens[:, 1:])
    valid = np.zeros_like(tokens[:, 1:], dtype=bool)
    for i, s in enumerate(seqs):
        valid[i, : len(s) - 1] = True
    return lp, valid


def sequence_probability(cfg, p, z: Tensor, key_mask, seq: Sequence[int]) -> float:
    """Exact probability of one complete token sequence (chain rule over decode steps)."""
    z, key_mask = _as_batch(z, key_mask)
    with ad.no_grad():
        lp, valid = sequence_log_probs(cfg, p, z, key_mask, [list(seq)])
    return float(np.exp(lp.values[valid].sum()))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, meta: dict | None = None) -> None:
    header = dict(asdict(cfg))
    header["_meta"] = meta or {}
    header["_frozen"] = sorted(k for k, v in params.items() if not v.requires_grad)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name].values
            bname = name.encode("utf-8")
            f.write(struct.pack("<I", len(bname)))
            f.write(bname)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    meta = header.pop("_meta", {})
    frozen = set(header.pop("_frozen", []))
    cfg = ModelConfig.from_dict(header)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = ModelParams()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        params[name] = Tensor(arr, requires_grad=name not in frozen)
    return cfg, params, meta
