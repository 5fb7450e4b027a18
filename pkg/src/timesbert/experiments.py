"""Desk-scale experiment recipes shared by the acceptance suite and scripts/.

Each ``run_*`` function is deterministic given its seed and returns plain
dicts so callers can print, log, or assert on them.
"""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from .data import (
    FAMILIES,
    Corpus,
    FamilySpec,
    generate_anomaly_stream,
    generate_synthetic_corpus,
    split,
)
from .encoder import EncoderConfig, ModelParams, init_params
from .heads import (
    FinetuneConfig,
    TaskHead,
    anomaly_score,
    attach_head,
    choose_missing,
    detect,
    finetune_anomaly,
    finetune_classifier,
    finetune_forecaster,
    finetune_imputer,
    fit_stream_stats,
    forecast,
    impute,
    mean_impute,
    predict_classes,
)
from .metrics import accuracy, f1_point_adjusted, m4_metrics, masked_mse, naive_last, patch_mask, smape
from .pretrain import PretrainConfig, evaluate_pretraining, run_pretraining

# ---------------------------------------------------------------- pre-training overfit

# Integer periods that divide the patch length keep patches repeating, so a
# masked patch is predictable from its neighbours as well as from co-variates.
OVERFIT_PERIODS = (8, 12, 24)
OVERFIT_CORPUS_SEED = 0


def overfit_corpus(seed: int = OVERFIT_CORPUS_SEED) -> Corpus:
    """2 datasets x 32 samples, C=3, T=96."""
    return generate_synthetic_corpus(
        [FamilySpec(f, 32, 3, 96, 0.05, periods=OVERFIT_PERIODS) for f in ("sine-mix", "sawtooth")], seed=seed
    )


def small_encoder(patch_len: int = 24, **kw) -> EncoderConfig:
    """D=64, L=2, A=4 with a wider init than the 768-wide default (see the ledger)."""
    base = dict(d_model=64, n_layers=2, n_heads=4, ffn_mult=4, dropout=0.0, context_len=512,
                patch_len=patch_len, init_std=0.1, pos_init_std=0.2)
    base.update(kw)
    return EncoderConfig(**base)


def overfit_config(use_ftp: bool = True, **kw) -> PretrainConfig:
    return PretrainConfig(encoder=small_encoder(24), lr_init=3e-3, batch_size=8, use_ftp=use_ftp,
                          variate_replacement=use_ftp, **kw)


def run_overfit(seed: int = 7, steps: int = 500, corpus: Corpus | None = None, log_path=None,
                checkpoint_path=None) -> dict:
    """Pre-train on the tiny corpus; L_MPM is measured in eval mode on fixed masks before and after."""
    corpus = corpus or overfit_corpus()
    cfg = overfit_config()
    params = init_params(cfg.encoder, corpus.registry.n_datasets, seed)
    before = evaluate_pretraining(corpus, params, cfg)
    t0 = time.perf_counter()
    res = run_pretraining(corpus, cfg, steps, seed=seed, log_path=log_path, checkpoint_path=checkpoint_path,
                          params=params)
    seconds = time.perf_counter() - t0
    after = evaluate_pretraining(corpus, res.params, cfg)
    return {
        "initial_mpm": before["loss_mpm"],
        "final_mpm": after["loss_mpm"],
        "mpm_ratio": after["loss_mpm"] / before["loss_mpm"],
        "log_mpm_ratio": res.log[-1]["loss_mpm"] / res.log[0]["loss_mpm"],
        "domain_accuracy": after["domain_accuracy"],
        "variate_accuracy": after["variate_accuracy"],
        "seconds": seconds,
        "params": res.params,
        "log": res.log,
    }


# ---------------------------------------------------------------- transfer pre-training

TRANSFER_CORPUS_SEED = 100


def transfer_corpus(n_variates: int, n_per_family: int, seed: int = TRANSFER_CORPUS_SEED) -> Corpus:
    """All five families, T=96; disjoint seeds from every downstream set."""
    return generate_synthetic_corpus([FamilySpec(f, n_per_family, n_variates, 96, 0.05) for f in FAMILIES], seed=seed)


# Per patch length: (variates per sample, samples per family, steps).
TRANSFER_RECIPES = {4: (3, 64, 500), 24: (6, 200, 3000)}


def pretrain_for_transfer(patch_len: int, seed: int = 0, use_ftp: bool = True, steps: int | None = None) -> dict:
    c, n, default_steps = TRANSFER_RECIPES[patch_len]
    corpus = transfer_corpus(c, n)
    cfg = PretrainConfig(encoder=small_encoder(patch_len), lr_init=3e-3, batch_size=8, use_ftp=use_ftp,
                         variate_replacement=use_ftp, pack_width=128 if patch_len == 4 else None)
    t0 = time.perf_counter()
    res = run_pretraining(corpus, cfg, steps or default_steps, seed=seed)
    return {"params": res.params, "seconds": time.perf_counter() - t0, "log": res.log}


FINETUNE_LR = 1e-3


# ---------------------------------------------------------------- classification


def classification_sets(seed: int = 1):
    """Sine vs sawtooth, 48 per class, split 64/16/16 stratified."""
    corpus = generate_synthetic_corpus([FamilySpec(f, 48, 3, 96, 0.05) for f in ("sine-mix", "sawtooth")], seed=seed)
    return split(corpus.samples, (4 / 6, 1 / 6, 1 / 6), seed=seed)


def run_classification(params: ModelParams, seed: int = 0, steps: int = 200, lr: float = FINETUNE_LR,
                       data_seed: int = 1) -> dict:
    train, val, test = classification_sets(data_seed)
    head = TaskHead("classify", 2)
    p = attach_head(params, head, seed)
    t0 = time.perf_counter()
    finetune_classifier(train, p, head, FinetuneConfig(steps=steps, lr=lr), seed=seed)
    acc = {
        name: accuracy(predict_classes(part, p, head), [s.class_label for s in part])
        for name, part in (("train", train), ("val", val), ("test", test))
    }
    return {**{f"{k}_accuracy": v for k, v in acc.items()}, "seconds": time.perf_counter() - t0, "params": p}


# ---------------------------------------------------------------- imputation


def imputation_sets(seed: int = 200, fraction: float = 0.05):
    corpus = generate_synthetic_corpus([FamilySpec(f, 80, 3, 96, 0.05) for f in FAMILIES], seed=seed)
    pool, test, _ = split(corpus.samples, (0.75, 0.25, 0.0), seed=0)
    rng = np.random.default_rng(seed)
    keep = sorted(rng.choice(len(pool), max(1, round(fraction * len(pool))), replace=False))
    return [pool[i] for i in keep], test


def run_imputation(pretrained: ModelParams, seed: int = 0, mask_ratio: float = 0.25, steps: int = 200,
                   lr: float = 1e-4) -> dict:
    """Pretrained init vs random init vs per-variate mean fill, same masks for all three."""
    p = pretrained.config.patch_len
    train, test = imputation_sets()
    rng = np.random.default_rng([seed, 1])
    coords = [choose_missing(s.n_variates, -(-s.length // p), mask_ratio, rng) for s in test]
    mean_fill = float(np.mean([
        masked_mse(mean_impute(s, c, p), s.values, patch_mask(s.values.shape, c, p, s.valid_len))
        for s, c in zip(test, coords)
    ]))
    out = {"mask_ratio": mask_ratio, "n_train": len(train), "n_test": len(test), "mse_mean_fill": mean_fill}
    cfg = FinetuneConfig(steps=steps, lr=lr, mask_ratio=mask_ratio)
    random_init = init_params(pretrained.config, pretrained.n_domains, seed)
    t0 = time.perf_counter()
    for name, base in (("pretrained", pretrained), ("random", random_init)):
        model = attach_head(base, TaskHead("impute"), seed)
        finetune_imputer(train, model, cfg, seed=seed)
        results = [impute(s, c, model) for s, c in zip(test, coords)]
        out[f"mse_{name}"] = float(np.mean([r.mse for r in results]))
        out[f"mse_{name}_normalized"] = float(np.mean([r.mse_normalized for r in results]))
    out["seconds"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------- anomaly detection

QUANTILE_GRID = (0.90, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999)


def run_anomaly(params: ModelParams, seed: int = 0, stream_seed: int = 0, steps: int = 300,
                lr: float = FINETUNE_LR, window_len: int = 40, grid=QUANTILE_GRID) -> dict:
    """Train on the first half of the stream, calibrate on the next quarter, score the last quarter."""
    stream = generate_anomaly_stream(2, 4000, 0.02, seed=stream_seed)
    t = stream.values.shape[1]
    a, b = t // 2, 3 * t // 4
    train, val, test = stream.values[:, :a], stream.values[:, a:b], stream.values[:, b:]
    stats = fit_stream_stats(train)
    model = attach_head(params, TaskHead("anomaly"), seed)
    t0 = time.perf_counter()
    finetune_anomaly(train, model, FinetuneConfig(steps=steps, lr=lr, window_len=window_len), stats, seed=seed)
    s_val = anomaly_score(val, model, window_len, stats)
    s_test = anomaly_score(test, model, window_len, stats)
    sweep = {q: f1_point_adjusted(detect(s_test, s_val, q), stream.labels[b:]).f1 for q in grid}
    best_q = max(sweep, key=lambda q: (sweep[q], -q))
    val_sweep = {q: f1_point_adjusted(detect(s_val, s_val, q), stream.labels[a:b]).f1 for q in grid}
    val_q = max(val_sweep, key=lambda q: (val_sweep[q], -q))
    return {
        "best_f1": sweep[best_q],
        "best_quantile": best_q,
        "val_selected_quantile": val_q,
        "val_selected_test_f1": sweep[val_q],
        "sweep": sweep,
        "anomalous_fraction": float(stream.labels.mean()),
        "seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------- forecasting

FORECAST_PERIOD = 12
FORECAST_LEVEL = 5.0  # keeps series positive so SMAPE stays meaningful


def forecast_sets(horizon: int, seed: int = 300, history: int = 96):
    corpus = generate_synthetic_corpus(
        [FamilySpec("trend-season", 300, 1, history + horizon, 0.05, periods=(FORECAST_PERIOD,))], seed=seed
    )
    series = [s.values + FORECAST_LEVEL for s in corpus.samples]
    return series[:200], series[200:]


def run_forecast(params: ModelParams, seed: int = 0, steps: int = 300, lr: float = FINETUNE_LR) -> dict:
    h = 2 * params.config.patch_len
    train, test = forecast_sets(h)
    model = attach_head(params, TaskHead("forecast"), seed)
    t0 = time.perf_counter()
    finetune_forecaster(train, model, FinetuneConfig(steps=steps, lr=lr, horizon=h), seed=seed)
    preds = [forecast(s[:, :-h], h, model)[0] for s in test]
    actual = [s[0, -h:] for s in test]
    insample = [s[0, :-h] for s in test]
    scores = m4_metrics(preds, actual, insample, FORECAST_PERIOD)
    naive = float(np.mean([smape(y, naive_last(x, h)) for y, x in zip(actual, insample)]))
    return {**dataclasses.asdict(scores), "smape_naive_last": naive, "horizon": h,
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------- ablation


def run_ablation(seeds=(0, 1, 2), pretrain_steps: int | None = None) -> dict:
    """Joint objective vs MPM-only pre-training, each followed by the classification transfer."""
    out = {"joint": [], "mpm_only": []}
    for seed in seeds:
        for name, use_ftp in (("joint", True), ("mpm_only", False)):
            pre = pretrain_for_transfer(4, seed=seed, use_ftp=use_ftp, steps=pretrain_steps)
            out[name].append(run_classification(pre["params"], seed=seed)["test_accuracy"])
    out["joint_mean"] = float(np.mean(out["joint"]))
    out["mpm_only_mean"] = float(np.mean(out["mpm_only"]))
    return out
