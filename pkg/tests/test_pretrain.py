import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from oracles import make_sample, tiny_config, weights_of
from timesbert import numerics as nx
from timesbert.data import FamilySpec, generate_synthetic_corpus
from timesbert.embedding import TimeSeriesSample, build_token_grid
from timesbert.encoder import init_params
from timesbert.pretrain import (
    Action,
    AdamW,
    CosineSchedule,
    DivergenceError,
    DonorPool,
    DonorPoolExhausted,
    Example,
    FtpLabels,
    MaskPlan,
    PretrainConfig,
    WarmupConstant,
    apply_variate_replacement,
    batch_forward,
    batch_order,
    clip_grad_norm,
    derive_seed,
    fit_length,
    ftp_loss,
    mpm_loss,
    prepare_examples,
    run_pretraining,
    sample_mask,
)


def tiny_corpus(n=6, c=2, t=16, seed=0):
    return generate_synthetic_corpus([FamilySpec(f, n, c, t, 0.05) for f in ("sine-mix", "sawtooth")], seed=seed)


def tiny_pretrain(**kw):
    base = dict(encoder=tiny_config(), batch_size=4, lr_init=1e-3)
    base.update(kw)
    return PretrainConfig(**base)


# ---------------------------------------------------------------- masking


def test_mask_alpha_zero_and_one():
    g = build_token_grid(make_sample(c=2, t=16), 4)
    assert sample_mask(g, 0.0, 1).S == 0
    plan = sample_mask(g, 1.0, 1)
    assert plan.S == 8 and sorted(plan.masked) == [(c, i) for c in range(2) for i in range(4)]


def test_mask_rejects_bad_alpha():
    with pytest.raises(ValueError):
        sample_mask(build_token_grid(make_sample(), 4), 1.5, 0)


def test_mask_targets_captured_before_corruption():
    s = TimeSeriesSample(np.arange(10.0)[None, :])
    g = build_token_grid(s, 4)
    plan = MaskPlan.from_coords(g, [(0, 2)])
    assert plan.targets.tolist() == [[8.0, 9.0, 0.0, 0.0]]
    assert plan.weights.tolist() == [[1.0, 1.0, 0.0, 0.0]]


def test_mask_fractions_match_rates():
    g = build_token_grid(TimeSeriesSample(np.zeros((8, 4 * 50))), 4)  # 400 PATCH slots
    masked = replaced = slots = 0
    for seed in range(250):
        plan = sample_mask(g, 0.25, seed)
        slots += 400
        masked += plan.S
        replaced += sum(a is Action.REPLACE for a in plan.actions)
    assert abs(masked / slots - 0.25) <= 0.005
    assert abs(replaced / masked - 0.90) <= 0.005


def test_derive_seed_is_stable_and_sensitive():
    assert derive_seed(1, 2, "a") == derive_seed(1, 2, "a")
    assert len({derive_seed(1, 2, "a"), derive_seed(1, 3, "a"), derive_seed(1, 2, "b"), derive_seed(2, 2, "a")}) == 4


# ---------------------------------------------------------------- variate replacement


def test_replacement_skips_single_variate():
    corpus = tiny_corpus(c=1)
    pool = DonorPool(corpus.samples)
    s = corpus.samples[0]
    out, labels = apply_variate_replacement(s, pool, 0)
    assert out is s and labels.variate_labels is None and labels.domain_label == s.dataset_id


def test_replacement_labels_and_untouched_variates():
    corpus = tiny_corpus(c=3)
    pool = DonorPool(corpus.samples)
    s = corpus.samples[0]
    out, labels = apply_variate_replacement(s, pool, 1)  # seed 1 picks the middle variate
    assert labels.variate_labels.tolist() == [0, 1, 0]
    assert np.array_equal(out.values[0], s.values[0]) and np.array_equal(out.values[2], s.values[2])
    donor = out.values[1]
    assert abs(donor.mean()) < 1e-12 and abs(donor.std() - 1.0) < 1e-9


def test_donor_pool_excludes_own_dataset():
    corpus = tiny_corpus()
    pool = DonorPool(corpus.samples)
    rng = np.random.default_rng(0)
    own = {tuple(s.values[c]) for s in corpus.by_dataset()[0] for c in range(s.n_variates)}
    for _ in range(50):
        assert tuple(pool.draw(0, rng)) not in own
    with pytest.raises(DonorPoolExhausted):
        DonorPool(corpus.by_dataset()[0]).draw(0, rng)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 80))
def test_fit_length_tiles_or_crops(n, t):
    x = np.arange(n, dtype=float)
    out = fit_length(x, t, np.random.default_rng(0))
    assert out.shape == (t,)
    if n >= t:
        assert np.array_equal(out, x[int(out[0]) : int(out[0]) + t])
    else:
        assert np.array_equal(out, x[np.arange(t) % n])


# ---------------------------------------------------------------- losses


def _plan(targets, weights=None):
    targets = np.asarray(targets, dtype=float)
    w = np.ones_like(targets) if weights is None else np.asarray(weights, dtype=float)
    return MaskPlan([(0, k) for k in range(len(targets))], [Action.REPLACE] * len(targets), targets, w)


@pytest.mark.parametrize(
    "pred, target, expected",
    [
        ([[0.3, -1.0]], [[0.3, -1.0]], 0.0),
        ([[1.0, 1.0]], [[0.0, 0.0]], 1.0),
        ([[1.0, 1.0], [3.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], 2.75),
    ],
)
def test_mpm_loss_values(pred, target, expected):
    assert math.isclose(mpm_loss(nx.Tensor(pred), _plan(target)).item(), expected, abs_tol=1e-15)


def test_mpm_loss_ignores_padding():
    plan = _plan([[0.0, 0.0]], [[1.0, 0.0]])
    assert mpm_loss(nx.Tensor([[2.0, 100.0]]), plan).item() == 4.0


def _zero_ftp_params(m):
    p = init_params(tiny_config(), m)
    p["ftp.W_VAR"].data[:] = 0.0
    p["ftp.W_DOM"].data[:] = 0.0
    return p


def test_ftp_uniform_logits():
    p = _zero_ftp_params(4)
    h = nx.Tensor(np.random.default_rng(0).standard_normal((2, 16)))
    out = ftp_loss(h, nx.Tensor(np.ones(16)), FtpLabels(np.array([0, 1]), 3), p)
    assert math.isclose(out.item(), 2 * math.log(2) + math.log(4), rel_tol=1e-12)
    assert math.isclose(out.item(), 2.772588722239781, rel_tol=1e-12)


def test_ftp_single_variate_only_domain_term():
    p = _zero_ftp_params(8)
    out = ftp_loss(None, nx.Tensor(np.ones(16)), FtpLabels(None, 5), p)
    assert math.isclose(out.item(), math.log(8), rel_tol=1e-12)


def test_ftp_near_certain_logits_near_zero():
    p = _zero_ftp_params(2)
    p["ftp.W_VAR"].data[:] = np.array([[50.0, -50.0]] + [[0.0, 0.0]] * 15)
    p["ftp.W_DOM"].data[:] = np.array([[-50.0, 50.0]] + [[0.0, 0.0]] * 15)
    h = nx.Tensor(np.eye(16)[:1].repeat(3, axis=0))
    out = ftp_loss(h, nx.Tensor(np.eye(16)[0]), FtpLabels(np.array([0, 0, 0]), 1), p)
    assert out.item() < 1e-12


def _examples(params, corpus, config, seed=0, n=4):
    pool = DonorPool(corpus.samples)
    out = []
    for s in corpus.samples[:n]:
        out.extend(prepare_examples(s, config, pool, derive_seed(seed, 0, s.sample_id)))
    return out


def test_batch_loss_matches_per_example_oracle():
    corpus = tiny_corpus(c=3)
    cfg = tiny_pretrain(alpha=0.5)
    params = init_params(cfg.encoder, 2, seed=1)
    ex = _examples(params, corpus, cfg, n=5)
    out = batch_forward(ex, params)
    w = weights_of(params)
    parts = [oracles.example_loss(e.grid, e.plan, e.labels, w, cfg.encoder) for e in ex]
    assert abs(out.mpm.item() - np.mean([p[0] for p in parts])) <= 1e-9
    assert abs(out.ftp.item() - np.mean([p[1] for p in parts])) <= 1e-9
    assert math.isclose(out.total.item(), out.mpm.item() + out.ftp.item(), rel_tol=1e-15)


def test_ftp_disabled_total_equals_mpm():
    corpus = tiny_corpus(c=3)
    cfg = tiny_pretrain()
    params = init_params(cfg.encoder, 2, seed=1)
    ex = _examples(params, corpus, cfg)
    off = batch_forward(ex, params, use_ftp=False)
    assert off.total.item() == off.mpm.item()
    assert batch_forward(ex, params).mpm.item() == off.mpm.item()


def test_pack_width_does_not_change_the_loss():
    corpus = tiny_corpus(c=2)
    cfg = tiny_pretrain()
    params = init_params(cfg.encoder, 2, seed=2)
    ex = _examples(params, corpus, cfg, n=6)
    wide = batch_forward(ex, params).total.item()
    narrow = batch_forward(ex, params, pack_width=max(len(e.grid) for e in ex)).total.item()
    assert abs(wide - narrow) <= 1e-12


def test_channel_independent_examples():
    corpus = tiny_corpus(c=3)
    cfg = tiny_pretrain(channel_independent=True)
    ex = prepare_examples(corpus.samples[0], cfg, DonorPool(corpus.samples), 0)
    assert len(ex) == 3 and all(e.grid.n_variates == 1 and e.labels.variate_labels is None for e in ex)


# ---------------------------------------------------------------- optimization


def test_cosine_endpoints_exact():
    total = 500
    sched = CosineSchedule(1e-4, 2e-7, total - 1)
    assert sched(0) == 1e-4 and sched(total - 1) == 2e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 2000))
def test_cosine_is_monotone(total):
    sched = CosineSchedule(1e-4, 2e-7, total)
    lrs = [sched(s) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(2e-7 <= v <= 1e-4 for v in lrs)


def test_warmup_constant():
    w = WarmupConstant(1e-3, 4)
    assert [w(s) for s in range(6)] == pytest.approx([2e-4, 4e-4, 6e-4, 8e-4, 1e-3, 1e-3])


def test_adamw_first_step_and_decay_only_on_matrices():
    wmat = nx.Tensor(np.ones((2, 2)), requires_grad=True)
    bias = nx.Tensor(np.ones(2), requires_grad=True)
    wmat.grad = np.full((2, 2), 0.5)
    bias.grad = np.full(2, -2.0)
    opt = AdamW({"w": wmat, "b": bias}, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.01)
    opt.step(0.1)
    # bias-corrected first step moves each entry by lr * sign(g) (up to eps)
    assert np.allclose(wmat.data, 1.0 * (1 - 0.1 * 0.01) - 0.1, atol=1e-7)
    assert np.allclose(bias.data, 1.0 + 0.1, atol=1e-7)


def test_clip_grad_norm():
    a = nx.Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"a": a}, 1.0) == 5.0
    assert np.allclose(a.grad, [0.6, 0.8])
    a.grad = np.array([0.3, 0.4])
    clip_grad_norm({"a": a}, 1.0)
    assert np.allclose(a.grad, [0.3, 0.4])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 16), st.integers(0, 5))
def test_batch_order_covers_each_epoch(n, bs, seed):
    stream = [i for step in range(n) for i in batch_order(n, bs, step, seed)]
    for e in range(bs):
        assert sorted(stream[e * n : (e + 1) * n]) == list(range(n))


# ---------------------------------------------------------------- training loop


def test_runs_are_bitwise_reproducible(tmp_path):
    corpus = tiny_corpus()
    cfg = tiny_pretrain()
    run_pretraining(corpus, cfg, 6, seed=3, log_path=tmp_path / "a.jsonl")
    run_pretraining(corpus, cfg, 6, seed=3, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    recs = [json.loads(x) for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(6))
    assert recs[0]["lr"] == cfg.lr_init and recs[-1]["lr"] == cfg.lr_final


def test_training_lowers_the_loss():
    corpus = tiny_corpus()
    res = run_pretraining(corpus, tiny_pretrain(lr_init=3e-3, batch_size=6), 60, seed=0)
    first = np.mean([r["loss_mpm"] for r in res.log[:5]])
    last = np.mean([r["loss_mpm"] for r in res.log[-5:]])
    assert last < first


def test_steps_zero_writes_init_checkpoint(tmp_path):
    res = run_pretraining(tiny_corpus(), tiny_pretrain(), 0, seed=1, checkpoint_path=tmp_path / "m.ckpt")
    assert res.log == [] and (tmp_path / "m.ckpt").exists()


def test_divergence_raises():
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        run_pretraining(tiny_corpus(), tiny_pretrain(lr_init=1e200, grad_clip=0.0), 5, seed=0)


def test_single_dataset_corpus_trains_without_variate_task(caplog):
    corpus = generate_synthetic_corpus([FamilySpec("ar2", 4, 2, 16)], seed=0)
    res = run_pretraining(corpus, tiny_pretrain(), 2, seed=0)
    assert len(res.log) == 2
    assert "single-dataset" in caplog.text


def test_example_dataclass_defaults():
    g = build_token_grid(make_sample(), 4)
    e = Example(g, None)
    assert e.labels.variate_labels is None and e.labels.domain_label is None
