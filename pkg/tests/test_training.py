import math

import numpy as np
import pytest

from fpevtt.autodiff import Tensor
from fpevtt.metrics import DocumentFrequency, RewardSpec
from fpevtt.model import init_params
from fpevtt.tokenizer import EOS
from fpevtt.training import (
    OptimizerState,
    ScheduleState,
    TrainRunConfig,
    adam_step,
    learning_rate,
    lr_default,
    lr_sgdr_warmup,
    scst_loss,
    scst_step,
    train_loop,
    xe_batch_loss,
    xe_loss,
)
from fpevtt.model import ModelParams

from helpers import make_clip, tiny_config, toy_vocab, two_caption_problem


def test_xe_loss_uniform_logits():
    logits = Tensor(np.zeros((1, 4, 2)))
    assert xe_loss(logits, np.array([[1, 1, 1, 0]])).item() == pytest.approx(3 * math.log(2), abs=1e-15)


def test_xe_loss_ignores_padding_and_averages_over_batch():
    logits = Tensor(np.zeros((2, 3, 4)))
    loss = xe_loss(logits, np.array([[1, 2, 0], [3, 0, 0]])).item()
    assert loss == pytest.approx(3 * math.log(4) / 2, abs=1e-15)


def test_xe_loss_rejects_out_of_range_token():
    with pytest.raises(ValueError):
        xe_loss(Tensor(np.zeros((1, 2, 3))), np.array([[1, 3]]))


def test_default_schedule_values():
    expected = {1: 4.4194e-8, 10000: 4.4194e-4, 40000: 2.2097e-4}
    for it, value in expected.items():
        direct = 512 ** -0.5 * min(it ** -0.5, it * 10000 ** -1.5)
        got = lr_default(ScheduleState(it=it, d_model=512, warmup_steps=10000))
        assert abs(got - direct) < 1e-12
        assert got == pytest.approx(value, rel=1e-4)


def test_default_schedule_peaks_at_warmup():
    rates = [lr_default(ScheduleState(it=i, warmup_steps=100, d_model=64)) for i in range(1, 400)]
    assert int(np.argmax(rates)) + 1 == 100
    assert max(rates) == pytest.approx(ScheduleState(warmup_steps=100, d_model=64).peak())


def test_sgdr_warmup_landmarks():
    s = ScheduleState(mode="sgdr_warmup", warmup_steps=10, T0_steps=100, eta_min=1e-5, eta_max=1e-3)

    def at(it, **kw):
        return learning_rate(ScheduleState(**{**s.__dict__, "it": it, **kw}))

    assert at(5) == pytest.approx(5e-4, abs=1e-15)
    assert at(10) == pytest.approx(1e-3, abs=1e-15)
    assert at(60) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-15)
    assert at(110) == 1e-5
    assert at(500) == 1e-5
    assert at(110, restarts_enabled=True) == pytest.approx(1e-3, abs=1e-15)
    rates = [at(i) for i in range(10, 111)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_sgdr_defaults_to_inverse_sqrt_peak():
    s = ScheduleState(mode="sgdr_warmup", it=50, warmup_steps=50, T0_steps=10, d_model=64)
    assert lr_sgdr_warmup(s) == pytest.approx(64 ** -0.5 * 50 ** -0.5)


def test_schedule_errors():
    with pytest.raises(ValueError):
        lr_default(ScheduleState(it=0))
    with pytest.raises(ValueError):
        learning_rate(ScheduleState(mode="step", it=1))


def test_adam_matches_scalar_oracle():
    p = ModelParams({"w": Tensor(np.array([1.0]), requires_grad=True),
                     "frozen": Tensor(np.array([2.0]), requires_grad=False)})
    opt = OptimizerState()
    grads = [0.5, -1.0, 2.0]
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p["w"].grad = np.array([g])
        p["frozen"].grad = np.array([g])
        adam_step(p, opt, 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p["w"].values[0] == pytest.approx(w, abs=1e-15)
    assert p["frozen"].values[0] == 2.0
    # first step moves by almost exactly the rate
    q = ModelParams({"w": Tensor(np.array([0.0]), requires_grad=True)})
    q["w"].grad = np.array([123.0])
    adam_step(q, OptimizerState(), 0.01)
    assert q["w"].values[0] == pytest.approx(-0.01, rel=1e-9)


def _collapsed_model():
    """A model that emits eos with probability ~1 at every step."""
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    for name in ("dec.ln.g",):
        params[name].values[...] = 0.0
    params["dec.ln.b"].values[...] = 1000.0 * params["word_emb"].values[EOS]
    return cfg, params


def test_zero_advantage_leaves_everything_untouched():
    cfg, params = _collapsed_model()
    rng = np.random.default_rng(0)
    recs = [make_clip(rng, vid="x", captions=["a b"]), make_clip(rng, vid="y", captions=["c"])]
    df = DocumentFrequency.from_references([r.captions for r in recs])
    before = params.copy()
    opt = OptimizerState()
    stats = scst_step(cfg, params, opt, recs, toy_vocab(), RewardSpec(), df,
                      np.random.default_rng(1), 1e-2, use_audio=True)
    assert not stats.updated and stats.mean_advantage == 0.0
    assert opt.step == 0 and not opt.m and not opt.v
    for k in params:
        assert np.array_equal(params[k].values, before[k].values)


def test_advantage_is_sample_reward_minus_greedy_reward():
    cfg = tiny_config(vocab_size=6)
    params = init_params(cfg, seed=3)
    vocab = toy_vocab(("a", "b"))
    rng = np.random.default_rng(4)
    recs = [make_clip(rng, vid="x", captions=["a"]), make_clip(rng, vid="y", captions=["b"])]
    df = DocumentFrequency.from_references([r.captions for r in recs] + [["c"]])
    # a little teacher forcing so the greedy caption earns a nonzero reward
    opt = OptimizerState()
    toks = [vocab.encode(r.captions[0]) for r in recs]
    for _ in range(30):
        params.zero_grad()
        xe_batch_loss(cfg, params, recs, toks, True).backward()
        adam_step(params, opt, 1e-2)
    spec = RewardSpec(1.0, 0.0, 3)
    _, adv, r_s, r_g = scst_loss(cfg, params, recs, vocab, spec, df, np.random.default_rng(0), True, 2)
    assert np.all(r_g > 0)
    assert np.array_equal(adv, r_s - np.repeat(r_g, 3))
    _, adv_raw, r_s2, _ = scst_loss(cfg, params, recs, vocab, spec, df, np.random.default_rng(0), True, 2,
                                    use_baseline=False)
    assert np.array_equal(r_s2, r_s) and np.array_equal(adv_raw, r_s)


def test_greedy_baseline_lowers_gradient_variance():
    # greedy decoding starts on the weaker caption, the regime SCST is for
    cfg, params, recs, vocab, df, _, _ = two_caption_problem()
    spec = RewardSpec(1.0, 1.0, 5)
    spread = {}
    for use_baseline in (True, False):
        grads = []
        for seed in range(1000):
            params.zero_grad()
            loss, *_ = scst_loss(cfg, params, recs, vocab, spec, df, np.random.default_rng(seed), True,
                                 use_baseline=use_baseline)
            loss.backward()
            grads.append(np.concatenate([t.grad.ravel() for _, t in sorted(params.items())]))
        spread[use_baseline] = np.var(np.array(grads), axis=0).sum()
    assert spread[True] < spread[False]


def _records(n, rng, captions=("a b",)):
    return [make_clip(rng, vid=f"v{i}", captions=list(captions)) for i in range(n)]


def test_patience_zero_stops_after_first_flat_epoch():
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    recs = _records(3, rng)
    run = TrainRunConfig(max_epochs=10, batch_size=2, patience=0, schedule="sgdr_warmup",
                         warmup_steps=1, eta_max=0.0, decode_max_len=3)
    res = train_loop(run, cfg, init_params(cfg), recs, recs, toy_vocab())
    assert res.stopped_early and len(res.log) == 2 and res.best_epoch == 1


def test_train_loop_writes_artifacts(tmp_path):
    cfg = tiny_config()
    rng = np.random.default_rng(1)
    recs = _records(4, rng)
    run = TrainRunConfig(max_epochs=2, batch_size=2, schedule="sgdr_warmup", warmup_steps=2,
                         eta_max=1e-2, decode_max_len=3)
    train_loop(run, cfg, init_params(cfg), recs, recs[:2], toy_vocab(), out_dir=tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,step,lr,train_loss,val_cider,val_bleu4"
    assert (tmp_path / "best.fpec").exists() and (tmp_path / "last.fpec").exists()


def test_xe_training_lowers_loss():
    cfg = tiny_config()
    rng = np.random.default_rng(2)
    recs = _records(4, rng, captions=("a b c",))
    run = TrainRunConfig(max_epochs=15, batch_size=4, schedule="sgdr_warmup", warmup_steps=3,
                         eta_max=1e-2, sgdr_period_epochs=100, patience=100, decode_max_len=4)
    res = train_loop(run, cfg, init_params(cfg), recs, recs, toy_vocab())
    assert res.log[-1]["train_loss"] < 0.5 * res.log[0]["train_loss"]


def test_scst_objective_runs_through_train_loop():
    cfg = tiny_config()
    rng = np.random.default_rng(3)
    recs = _records(3, rng)
    run = TrainRunConfig(max_epochs=2, scst_batch_size=2, scst_lr=1e-3, decode_max_len=3,
                         reward=RewardSpec(1.0, 1.0, 2))
    res = train_loop(run, cfg, init_params(cfg), recs, recs, toy_vocab(), objective="scst")
    assert len(res.log) == 2 and all(r["lr"] == 1e-3 for r in res.log)


def test_scst_requires_references():
    cfg = tiny_config()
    rec = make_clip(np.random.default_rng(0), captions=())
    with pytest.raises(ValueError, match="reference"):
        scst_loss(cfg, init_params(cfg), [rec], toy_vocab(), RewardSpec(),
                  DocumentFrequency({}, 1), np.random.default_rng(0), True)
