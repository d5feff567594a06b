"""Small fixtures shared by the model, training and acceptance tests."""

import numpy as np

from fpevtt.data import AUDIO_DIM, ClipRecord, FeatureSequence
from fpevtt.model import ModelConfig
from fpevtt.positional import AUDIO, VISION
from fpevtt.tokenizer import SPECIALS, Vocabulary


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d_model=8, d_ff=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, mem_slots=2,
        vocab_size=7, max_len=5, pe_mode="default", dropout_rate=0.0, d_vision=6, n_v_max=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_vocab(words=("a", "b", "c")) -> Vocabulary:
    return Vocabulary(list(SPECIALS) + list(words))


def make_clip(rng, n_v=4, n_a=3, d_vision=6, duration=4.0, vid="c0", captions=("a b",)) -> ClipRecord:
    vision = FeatureSequence(VISION, rng.normal(size=(n_v, d_vision)), duration)
    audio = FeatureSequence(AUDIO, rng.normal(size=(n_a, AUDIO_DIM)), duration)
    return ClipRecord(vid, vision, audio, list(captions), duration)


def two_caption_problem(seed: int = 0):
    """One clip whose reference is "a b"; the model is teacher-forced towards
    "a c" (3:1) so greedy decoding starts on the lower-reward caption.

    Returns (cfg, params, records, vocab, df, higher, lower) with the two
    captions as token lists.
    """
    from fpevtt.metrics import DocumentFrequency
    from fpevtt.model import init_params
    from fpevtt.training import OptimizerState, adam_step, xe_batch_loss

    cfg = tiny_config(vocab_size=7, max_len=3)
    vocab = toy_vocab(("a", "b", "c"))
    rng = np.random.default_rng(seed)
    rec = make_clip(rng, vid="only", captions=["a b"])
    params = init_params(cfg, seed=seed)
    higher, lower = vocab.encode("a b"), vocab.encode("a c")
    opt = OptimizerState()
    for _ in range(60):
        params.zero_grad()
        xe_batch_loss(cfg, params, [rec] * 4, [higher, lower, lower, lower], True).backward()
        adam_step(params, opt, 1e-2)
    params.zero_grad()
    df = DocumentFrequency.from_references([rec.captions, ["x"], ["y"]])
    return cfg, params, [rec], vocab, df, higher, lower
