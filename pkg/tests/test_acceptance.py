"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line PASS/FAIL verdict (also printed in the
terminal summary) before asserting, so a failing criterion still reports its
measured values.
"""
import json
import time
import zlib

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES
from oracles import make_sample, tiny_config, weights_of
from timesbert import checkpoint
from timesbert import numerics as nx
from timesbert.data import FamilySpec, generate_synthetic_corpus
from timesbert.embedding import TimeSeriesSample, build_token_grid, grid_size, pack
from timesbert.encoder import encode_packed, init_params, transformer_block
from timesbert.experiments import (
    pretrain_for_transfer,
    run_anomaly,
    run_classification,
    run_forecast,
    run_imputation,
    run_overfit,
)
from timesbert.pretrain import (
    Action,
    CosineSchedule,
    DonorPool,
    PretrainConfig,
    batch_forward,
    derive_seed,
    prepare_examples,
    run_pretraining,
    sample_mask,
)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def pretrained_p4():
    return pretrain_for_transfer(4, seed=0)


# ---------------------------------------------------------------- 1. gradients


def _primitive_checks(rng):
    def leaf(shape, name, shift=0.0):
        return nx.Tensor(shift + rng.standard_normal(shape), requires_grad=True, name=name)

    a, b, m, v = leaf((3, 4), "a"), leaf((3, 4), "b"), leaf((4, 2), "m"), leaf(4, "v")
    g = leaf(4, "g", 1.0)
    x3 = leaf((2, 3, 4), "x3")
    w, w2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    mask = np.array([[True, True, False, True]] * 3)
    return [
        (lambda: nx.sum(nx.mul(nx.add(a, b), w)), [a, b]),
        (lambda: nx.sum(nx.mul(nx.sub(a, b), w)), [a, b]),
        (lambda: nx.sum(nx.mul(nx.mul(a, b), w)), [a, b]),
        (lambda: nx.sum(nx.mul(nx.scale(a, -2.5), w)), [a]),
        (lambda: nx.sum(nx.mul(nx.add_bias(a, v), w)), [a, v]),
        (lambda: nx.sum(nx.mul(nx.gelu(a), w)), [a]),
        (lambda: nx.sum(nx.mul(nx.matmul(a, m), w2)), [a, m]),
        (lambda: nx.sum(nx.matmul(x3, m)), [x3, m]),
        (lambda: nx.sum(nx.mul(nx.reshape(a, (4, 3)), w.reshape(4, 3))), [a]),
        (lambda: nx.sum(nx.mul(nx.transpose(x3, (2, 0, 1)), np.full((4, 2, 3), 0.3))), [x3]),
        (lambda: nx.sum(nx.mul(nx.take_rows(a, [2, 0, 2]), w)), [a]),
        (lambda: nx.sum(nx.mul(nx.concat([a, b], axis=1), np.hstack([w, w]))), [a, b]),
        (lambda: nx.mean(nx.mul(a, b)), [a, b]),
        (lambda: nx.sum(nx.mul(nx.softmax(a, mask), w)), [a]),
        (lambda: nx.sum(nx.mul(nx.log_softmax(a), w)), [a]),
        (lambda: nx.sum(nx.mul(nx.layer_norm(a, g, v), w)), [a, g, v]),
        (lambda: nx.cross_entropy_from_logits(a, [0, 3, 1], [0.2, 0.5, 1.0]), [a]),
    ]


def _ftp_batch():
    """C=2 samples of T=16 at P=4 (N=4) from two datasets, so every loss term is live."""
    corpus = generate_synthetic_corpus([FamilySpec(f, 3, 2, 16, 0.05) for f in ("sine-mix", "sawtooth")], seed=0)
    cfg = PretrainConfig(encoder=tiny_config(context_len=32), alpha=0.5)
    params = init_params(cfg.encoder, 2, seed=0)
    pool = DonorPool(corpus.samples)
    examples = []
    for k, s in enumerate(corpus.samples[2:4]):
        examples.extend(prepare_examples(s, cfg, pool, derive_seed(k, 0, s.sample_id)))
    return params, examples


def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    errs = {}
    errs["primitives"] = max(nx.check_gradients(f, ps).max_rel_error for f, ps in _primitive_checks(
        np.random.default_rng(0)))

    params = init_params(tiny_config(), 1, seed=1)
    allowed = np.ones((1, 7, 7), bool)
    allowed[0, :3, 3:] = allowed[0, 3:, :3] = False  # two packed samples
    z = nx.Tensor(np.random.default_rng(2).standard_normal((1, 7, 16)), requires_grad=True, name="z")
    proj = np.random.default_rng(3).standard_normal((1, 7, 16))
    block = {n: t for n, t in params.items() if n.startswith("layers.0.")}
    errs["block"] = nx.check_gradients(
        lambda: nx.sum(nx.mul(transformer_block(z, allowed, params, 0, params.config), proj)), {"z": z, **block}
    ).max_rel_error

    p2, examples = _ftp_batch()
    assert any(e.labels.variate_labels is not None and any(e.labels.variate_labels) for e in examples)
    errs["joint_loss"] = nx.check_gradients(lambda: batch_forward(examples, p2).total, p2.trainable()).max_rel_error
    secs = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-4 and secs <= 60
    verdict(1, ok, f"max rel error {json.dumps({k: float(f'{v:.2e}') for k, v in errs.items()})}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. structure


def test_c2_structural_invariants():
    t0 = time.perf_counter()
    bad = [
        (c, t, p)
        for p in (4, 24, 36)
        for c in range(1, 9)
        for t in range(1, 201)
        if len(build_token_grid(TimeSeriesSample(np.zeros((c, t))), p)) != (-(-t // p) + 1) * c + 1
        or grid_size(c, t, p) != (-(-t // p) + 1) * c + 1
    ]

    params = init_params(tiny_config(), 2, seed=0)
    rng = np.random.default_rng(5)
    grids = [build_token_grid(make_sample(int(rng.integers(1, 4)), int(rng.integers(1, 20)), seed=k), 4)
             for k in range(6)]

    def rows(gs, k):
        (b,) = pack(gs, params.config.context_len, params)
        h, u = encode_packed(b, params)
        return h.data[b.flat(k, np.arange(len(gs[k])), u)]

    neutrality = max(float(np.max(np.abs(rows(grids, k) - rows([grids[k]], 0)))) for k in range(len(grids)))
    other = build_token_grid(make_sample(grids[1].n_variates, 13, seed=99), 4)
    isolation = float(np.max(np.abs(rows(grids[:2], 0) - rows([grids[0], other], 0))))

    corpus = generate_synthetic_corpus([FamilySpec(f, 3, 3, 20, 0.05) for f in ("sine-mix", "sawtooth")], seed=1)
    cfg = PretrainConfig(encoder=tiny_config(), alpha=0.5)
    pool = DonorPool(corpus.samples)
    ex = [e for s in corpus.samples for e in prepare_examples(s, cfg, pool, derive_seed(0, 0, s.sample_id))]
    out = batch_forward(ex, params)
    w = weights_of(params)
    parts = [oracles.example_loss(e.grid, e.plan, e.labels, w, cfg.encoder) for e in ex]
    oracle_gap = max(abs(out.mpm.item() - np.mean([p[0] for p in parts])),
                     abs(out.ftp.item() - np.mean([p[1] for p in parts])))
    secs = time.perf_counter() - t0
    ok = not bad and neutrality <= 1e-9 and isolation <= 1e-12 and oracle_gap <= 1e-9 and secs <= 120
    verdict(2, ok, f"token-count misses {len(bad)}/4800, packing {neutrality:.1e}, isolation {isolation:.1e}, "
                   f"loss oracle {oracle_gap:.1e}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. masking


def test_c3_masking_statistics():
    t0 = time.perf_counter()
    grid = build_token_grid(TimeSeriesSample(np.zeros((8, 4 * 50))), 4)  # 400 PATCH slots
    slots = masked = replaced = 0
    for seed in range(300):
        plan = sample_mask(grid, 0.25, seed)
        slots += 400
        masked += plan.S
        replaced += sum(a is Action.REPLACE for a in plan.actions)
    secs = time.perf_counter() - t0
    frac, rep = masked / slots, replaced / masked
    ok = slots >= 100_000 and abs(frac - 0.25) <= 0.005 and abs(rep - 0.90) <= 0.005 and secs <= 10
    verdict(3, ok, f"{slots} slots, mask fraction {frac:.4f}, REPLACE among masked {rep:.4f}, {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4. overfit


def test_c4_pretraining_overfit():
    r = run_overfit(seed=7, steps=500)
    ok = (r["mpm_ratio"] < 0.10 and r["domain_accuracy"] >= 0.95 and r["variate_accuracy"] >= 0.90
          and r["seconds"] <= 300)
    verdict(4, ok, f"L_MPM {r['initial_mpm']:.4f} -> {r['final_mpm']:.4f} (ratio {r['mpm_ratio']:.4f}), "
                   f"domain acc {r['domain_accuracy']:.3f}, variate acc {r['variate_accuracy']:.3f}, "
                   f"{r['seconds']:.0f}s")
    assert ok


# ---------------------------------------------------------------- 5-8. transfer tasks


def test_c5_classification_transfer(pretrained_p4):
    r = run_classification(pretrained_p4["params"], seed=0)
    ok = r["test_accuracy"] >= 0.95 and pretrained_p4["seconds"] + r["seconds"] <= 180
    verdict(5, ok, f"test accuracy {r['test_accuracy']:.3f}, fine-tune {r['seconds']:.0f}s "
                   f"(pre-training {pretrained_p4['seconds']:.0f}s)")
    assert ok


def test_c6_imputation_benefit():
    pre = pretrain_for_transfer(24, seed=0)
    r = run_imputation(pre["params"], seed=0)
    ok = (r["mse_pretrained"] < r["mse_random"] and r["mse_pretrained"] <= 0.75 * r["mse_mean_fill"]
          and pre["seconds"] + r["seconds"] <= 300)
    verdict(6, ok, f"masked MSE pretrained {r['mse_pretrained']:.4f}, random {r['mse_random']:.4f}, "
                   f"mean fill {r['mse_mean_fill']:.4f} ({r['n_train']} training samples), "
                   f"fine-tune {r['seconds']:.0f}s (pre-training {pre['seconds']:.0f}s)")
    assert ok


def test_c7_anomaly_detection(pretrained_p4):
    r = run_anomaly(pretrained_p4["params"], seed=0)
    ok = r["best_f1"] >= 0.80 and r["seconds"] <= 180
    verdict(7, ok, f"best point-adjusted F1 {r['best_f1']:.3f} at q={r['best_quantile']}, "
                   f"val-selected q={r['val_selected_quantile']} gives {r['val_selected_test_f1']:.3f}, "
                   f"{r['seconds']:.0f}s")
    assert ok


def test_c8_forecasting(pretrained_p4):
    r = run_forecast(pretrained_p4["params"], seed=0)
    ok = r["smape"] < r["smape_naive_last"] and r["owa"] < 1.0 and r["seconds"] <= 180
    verdict(8, ok, f"horizon {r['horizon']}: SMAPE {r['smape']:.3f} vs naive-last {r['smape_naive_last']:.3f}, "
                   f"OWA {r['owa']:.3f}, {r['seconds']:.0f}s")
    assert ok


# ---------------------------------------------------------------- 9. ablation


def test_c9_ablation_direction(pretrained_p4):
    joint, mpm_only = [], []
    for seed in (0, 1, 2):
        pj = pretrained_p4["params"] if seed == 0 else pretrain_for_transfer(4, seed=seed)["params"]
        pm = pretrain_for_transfer(4, seed=seed, use_ftp=False)["params"]
        joint.append(run_classification(pj, seed=seed)["test_accuracy"])
        mpm_only.append(run_classification(pm, seed=seed)["test_accuracy"])
    per_seed = all(j >= m - 0.02 for j, m in zip(joint, mpm_only))
    ok = per_seed and np.mean(joint) >= np.mean(mpm_only) - 0.02
    verdict(9, ok, f"joint {joint} (mean {np.mean(joint):.3f}) vs MPM-only {mpm_only} "
                   f"(mean {np.mean(mpm_only):.3f})")
    assert ok


# ---------------------------------------------------------------- 10. persistence


def test_c10_persistence_and_determinism(tmp_path):
    params = init_params(tiny_config(), 2, seed=3)
    checkpoint.save(tmp_path / "m.ckpt", params, {"k": 1})
    buf = (tmp_path / "m.ckpt").read_bytes()
    crc_ok = int.from_bytes(buf[-4:], "little") == zlib.crc32(buf[:-4])
    loaded, _ = checkpoint.load(tmp_path / "m.ckpt")
    bitwise = loaded.names() == params.names() and all(
        np.array_equal(loaded[n].data, t.data.astype(np.float32).astype(np.float64)) for n, t in params.items()
    )
    checkpoint.save(tmp_path / "again.ckpt", loaded, {"k": 1})
    bitwise = bitwise and (tmp_path / "again.ckpt").read_bytes() == buf
    corrupt = bytearray(buf)
    corrupt[len(buf) // 2] ^= 0x10
    try:
        checkpoint.decode(bytes(corrupt))
        rejects = False
    except checkpoint.CheckpointError:
        rejects = True

    corpus = generate_synthetic_corpus([FamilySpec(f, 4, 2, 16, 0.05) for f in ("sine-mix", "sawtooth")], seed=0)
    cfg = PretrainConfig(encoder=tiny_config(), batch_size=4)
    for name in ("a", "b"):
        run_pretraining(corpus, cfg, 8, seed=11, log_path=tmp_path / f"{name}.jsonl")
    same_logs = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    lrs = [json.loads(x)["lr"] for x in (tmp_path / "a.jsonl").read_text().splitlines()]
    sched = CosineSchedule(1e-4, 2e-7, 30000 - 1)
    endpoints = lrs[0] == 1e-4 and lrs[-1] == 2e-7 and sched(0) == 1e-4 and sched(30000 - 1) == 2e-7
    ok = crc_ok and bitwise and rejects and same_logs and endpoints
    verdict(10, ok, f"bitwise round-trip {bitwise}, CRC {crc_ok and rejects}, identical logs {same_logs}, "
                    f"lr(0)={lrs[0]!r} lr(final)={lrs[-1]!r}")
    assert ok
