"""Command-line entry points: gen-data, pretrain, finetune, eval, export.

Settings resolve as built-in defaults < ``--config`` file (``key = value``
lines, ``#`` comments) < explicit flags. Exit codes: 0 ok, 1 configuration
error, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import numerics as nx
from .data import (
    FAMILIES,
    Corpus,
    DataError,
    FamilySpec,
    NormStats,
    generate_anomaly_stream,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split,
)
from .encoder import TASK_PATCH_LEN, EncoderConfig, init_params
from .experiments import (
    FORECAST_LEVEL,
    FORECAST_PERIOD,
    QUANTILE_GRID,
    overfit_corpus,
    transfer_corpus,
)
from .heads import (
    FinetuneConfig,
    TaskHead,
    TaskKind,
    Which,
    anomaly_score,
    attach_head,
    choose_missing,
    detect,
    export_representations,
    finetune_anomaly,
    finetune_classifier,
    finetune_forecaster,
    finetune_imputer,
    fit_stream_stats,
    forecast,
    impute,
    mean_impute,
    predict_classes,
    write_representations,
)
from .metrics import (
    MetricReport,
    accuracy,
    f1_point_adjusted,
    m4_metrics,
    masked_mse,
    naive_last,
    patch_mask,
    smape,
)
from .pretrain import DivergenceError, PretrainConfig, evaluate_pretraining, run_pretraining

log = logging.getLogger("timesbert")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT = (4 / 6, 1 / 6, 1 / 6)


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ---------------------------------------------------------------- settings

DEFAULTS = {
    "seed": 0,
    "data_seed": None,
    "steps": None,
    "batch_size": 8,
    "patch_len": None,
    "d_model": 64,
    "layers": 2,
    "heads": 4,
    "ffn_mult": 4,
    "dropout": 0.0,
    "context_len": 512,
    "init_std": 0.1,
    "pos_init_std": 0.2,
    "lr": None,
    "mask_ratio": 0.25,
    "alpha": 0.25,
    "pack_width": None,
    "use_ftp": True,
    "channel_independent": False,
    "save_every": 0,
    "freeze_backbone": False,
    "quantile_grid": ",".join(str(q) for q in QUANTILE_GRID),
    "horizon": None,
    "window_len": 40,
    "season": FORECAST_PERIOD,
    "train_fraction": 1.0,
    "synthetic": None,
    "data": None,
    "which": "dom",
}
STEP_DEFAULTS = {"pretrain": 500, "finetune": 200}
LR_DEFAULTS = {"pretrain": 3e-3, "finetune": 1e-3}

_INT_OR_NONE = ("data_seed", "steps", "patch_len", "horizon", "pack_width")
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(key: str, raw):
    if raw is None or not isinstance(raw, str):
        return raw
    ref = DEFAULTS.get(key)
    try:
        if isinstance(ref, bool):
            return _BOOL[raw.strip().lower()]
        if isinstance(ref, int):
            return int(raw)
        if isinstance(ref, float) or key in ("lr",) + _INT_OR_NONE:
            v = float(raw)
            return int(v) if key in _INT_OR_NONE else v
    except (KeyError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip()


def read_config_file(path) -> dict:
    out = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    for n, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in DEFAULTS:
            raise ConfigError(f"{p}:{n}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(k, v) if isinstance(v, str) else v
    cfg["steps"] = cfg["steps"] if cfg["steps"] is not None else STEP_DEFAULTS.get(args.command, 0)
    cfg["lr"] = cfg["lr"] if cfg["lr"] is not None else LR_DEFAULTS.get(args.command, 1e-3)
    if cfg["steps"] < 0:
        raise ConfigError("--steps must be >= 0")
    if cfg["batch_size"] < 1:
        raise ConfigError("--batch-size must be >= 1")
    if not 0.0 < cfg["mask_ratio"] <= 1.0:
        raise ConfigError("--mask-ratio must lie in (0, 1]")
    return cfg


def encoder_from(cfg: dict, patch_len: int) -> EncoderConfig:
    try:
        return EncoderConfig(cfg["d_model"], cfg["layers"], cfg["heads"], cfg["ffn_mult"], cfg["dropout"],
                             cfg["context_len"], patch_len, cfg["init_std"], cfg["pos_init_std"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- data sources

SYNTHETIC = ("default", "transfer", "classify", "impute", "forecast", "anomaly")


def _forecast_corpus(seed: int, horizon: int) -> Corpus:
    c = generate_synthetic_corpus(
        [FamilySpec("trend-season", 300, 1, 96 + horizon, 0.05, periods=(FORECAST_PERIOD,))], seed=seed
    )
    for s in c.samples:
        s.values = s.values + FORECAST_LEVEL
    return c


def synthetic_corpus(name: str, seed: int | None, horizon: int = 8) -> Corpus:
    if name == "default":
        return overfit_corpus() if seed is None else overfit_corpus(seed)
    if name == "transfer":
        return transfer_corpus(3, 64) if seed is None else transfer_corpus(3, 64, seed)
    if name == "classify":
        s = 1 if seed is None else seed
        return generate_synthetic_corpus([FamilySpec(f, 48, 3, 96, 0.05) for f in ("sine-mix", "sawtooth")], seed=s)
    if name == "impute":
        return generate_synthetic_corpus([FamilySpec(f, 80, 3, 96, 0.05) for f in FAMILIES],
                                         seed=200 if seed is None else seed)
    if name == "forecast":
        return _forecast_corpus(300 if seed is None else seed, horizon)
    raise ConfigError(f"unknown synthetic set {name!r}; choose from {', '.join(SYNTHETIC)}")


def load_samples(cfg: dict, default_synthetic: str, horizon: int = 8) -> Corpus:
    if cfg["data"]:
        return load_corpus(cfg["data"])
    return synthetic_corpus(cfg["synthetic"] or default_synthetic, cfg["data_seed"], horizon)


def load_stream(cfg: dict):
    """(values C x T, labels T) from --data CSV (value columns + 'label') or the synthetic generator."""
    if not cfg["data"]:
        seed = 0 if cfg["data_seed"] is None else cfg["data_seed"]
        st = generate_anomaly_stream(2, 4000, 0.02, seed=seed)
        return st.values, st.labels
    path = Path(cfg["data"])
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "label" not in reader.fieldnames:
            raise DataError(f"{path}: expected value columns and a 'label' column")
        cols = [c for c in reader.fieldnames if c != "label"]
        vals, labels = [], []
        for line, r in enumerate(reader, start=2):
            try:
                vals.append([float(r[c]) for c in cols])
                labels.append(bool(int(float(r["label"]))))
            except ValueError:
                raise DataError(f"{path}: line {line}: non-numeric cell") from None
    if not vals:
        raise DataError(f"{path}: no data rows")
    values = np.array(vals).T
    if not np.isfinite(values).all():
        raise DataError(f"{path}: non-finite values")
    return values, np.array(labels)


def parse_grid(raw) -> list[float]:
    try:
        grid = sorted({float(q) for q in str(raw).split(",") if q.strip()})
    except ValueError:
        raise ConfigError(f"--quantile-grid: cannot parse {raw!r}") from None
    if not grid or not all(0.0 <= q < 1.0 for q in grid):
        raise ConfigError("--quantile-grid needs comma-separated quantiles in [0, 1)")
    return grid


def echo(cfg: dict) -> dict:
    """The effective settings, minus bulky fitted statistics."""
    return {k: v for k, v in cfg.items() if k not in ("config", "stream_mean", "stream_std")}


def _stream_splits(values, labels):
    t = values.shape[1]
    a, b = t // 2, 3 * t // 4
    return (values[:, :a], labels[:a]), (values[:, a:b], labels[a:b]), (values[:, b:], labels[b:])


# ---------------------------------------------------------------- commands


def _out_dir(cfg_out) -> Path:
    if not cfg_out:
        raise ConfigError("--out is required")
    d = Path(cfg_out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_gen_data(args, cfg) -> int:
    out = _out_dir(args.out)
    name = cfg["synthetic"] or "default"
    if name == "anomaly":
        values, labels = load_stream({**cfg, "data": None})
        with (out / "stream.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"v{c}" for c in range(values.shape[0])] + ["label"])
            for t in range(values.shape[1]):
                w.writerow([repr(float(v)) for v in values[:, t]] + [int(labels[t])])
        print(out / "stream.csv")
        return EXIT_OK
    save_corpus(synthetic_corpus(name, cfg["data_seed"]), out)
    print(out)
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    out = _out_dir(args.out)
    corpus = load_samples(cfg, "default")
    enc = encoder_from(cfg, cfg["patch_len"] or 24)
    pcfg = PretrainConfig(encoder=enc, alpha=cfg["alpha"], batch_size=cfg["batch_size"], lr_init=cfg["lr"],
                          use_ftp=cfg["use_ftp"], variate_replacement=cfg["use_ftp"],
                          channel_independent=cfg["channel_independent"], save_every=cfg["save_every"],
                          pack_width=cfg["pack_width"])
    seed = cfg["seed"]
    params = init_params(enc, max(corpus.registry.n_datasets, 1), seed)
    before = evaluate_pretraining(corpus, params, pcfg)
    res = run_pretraining(corpus, pcfg, cfg["steps"], seed=seed, log_path=out / "metrics.jsonl",
                          checkpoint_path=out / "model.ckpt", params=params)
    after = evaluate_pretraining(corpus, res.params, pcfg) if cfg["steps"] else before
    metrics = {"initial_mpm": before["loss_mpm"], "final_mpm": after["loss_mpm"]}
    for k in ("domain_accuracy", "variate_accuracy"):
        if np.isfinite(after[k]):
            metrics[k] = after[k]
    report = MetricReport("pretrain", metrics, len(corpus.samples), echo(cfg))
    report.append_to(out / "report.jsonl")
    print(report.to_json())
    return EXIT_OK


def _task_patch_len(task: TaskKind, ckpt_p: int, override: int | None) -> int:
    preset = TASK_PATCH_LEN[task.value]
    if override is None and ckpt_p != preset:
        raise ConfigError(
            f"checkpoint patch length {ckpt_p} differs from the {task.value} preset {preset}; "
            f"pass --patch-len {ckpt_p} to fine-tune at the checkpoint's patch length"
        )
    if override is not None and override != ckpt_p:
        raise ConfigError(f"--patch-len {override} does not match the checkpoint patch length {ckpt_p}")
    return ckpt_p


def _load_base(cfg, task: TaskKind):
    src = cfg.get("from")
    if not src:
        raise ConfigError("--from is required (a checkpoint path or 'random')")
    if src == "random":
        p = cfg["patch_len"] or TASK_PATCH_LEN[task.value]
        return init_params(encoder_from(cfg, p), 1, cfg["seed"])
    params, _ = checkpoint.load(src)
    _task_patch_len(task, params.config.patch_len, cfg["patch_len"])
    return params


def _horizon(cfg, p: int) -> int:
    return cfg["horizon"] or 2 * p


def _impute_masks(samples, p, ratio, seed):
    rng = np.random.default_rng([seed, 1])
    return [choose_missing(s.n_variates, -(-s.length // p), ratio, rng) for s in samples]


def evaluate_task(task: TaskKind, params, head: TaskHead, cfg: dict, part: str) -> MetricReport:
    """Metrics for ``part`` in {'val', 'test'}; anomaly thresholds always come from the validation split."""
    p = params.config.patch_len
    eff = echo(cfg)
    if task is TaskKind.ANOMALY:
        values, labels = load_stream(cfg)
        (tr, _), (va, lva), (te, lte) = _stream_splits(values, labels)
        stats = NormStats(np.array(cfg["stream_mean"]), np.array(cfg["stream_std"]))
        s_val = anomaly_score(va, params, cfg["window_len"], stats)
        scores, truth = (s_val, lva) if part == "val" else (anomaly_score(te, params, cfg["window_len"], stats), lte)
        grid = parse_grid(cfg["quantile_grid"])
        # the operating quantile is chosen on validation and applied once to the evaluated part
        on_val = {q: f1_point_adjusted(detect(s_val, s_val, q), lva).f1 for q in grid}
        chosen = max(grid, key=lambda q: (on_val[q], -q))
        sweep = {q: f1_point_adjusted(detect(scores, s_val, q), truth) for q in grid}
        best = max(grid, key=lambda q: (sweep[q].f1, -q))
        m = {"f1": sweep[chosen].f1, "precision": sweep[chosen].precision, "recall": sweep[chosen].recall,
             "quantile": chosen, "best_f1": sweep[best].f1, "best_quantile": best}
        m.update({f"f1@{q}": sweep[q].f1 for q in grid})
        return MetricReport(task.value, m, int(scores.size), eff)
    horizon = _horizon(cfg, p)
    corpus = load_samples(cfg, task.value, horizon)
    _, val, test = split(corpus.samples, SPLIT, seed=cfg["data_seed"] or 0)
    samples = val if part == "val" else test
    if not samples:
        raise DataError(f"{part} split is empty")
    if task is TaskKind.CLASSIFY:
        acc = accuracy(predict_classes(samples, params, head), [s.class_label for s in samples])
        return MetricReport(task.value, {"accuracy": acc}, len(samples), eff)
    if task is TaskKind.IMPUTE:
        masks = _impute_masks(samples, p, cfg["mask_ratio"], cfg["seed"])
        res = [impute(s, c, params) for s, c in zip(samples, masks)]
        base = [masked_mse(mean_impute(s, c, p), s.values, patch_mask(s.values.shape, c, p, s.valid_len))
                for s, c in zip(samples, masks)]
        m = {"mse": float(np.mean([r.mse for r in res])),
             "mse_normalized": float(np.mean([r.mse_normalized for r in res])),
             "mse_mean_fill": float(np.mean(base))}
        return MetricReport(task.value, m, len(samples), eff)
    # forecast: per dataset (family) and averaged
    m = {}
    groups: dict[int, list] = {}
    for s in samples:
        groups.setdefault(s.dataset_id, []).append(s)
    per = []
    for did, group in sorted(groups.items()):
        preds = [forecast(s.values[:, :-horizon], horizon, params) for s in group]
        act = [s.values[c, -horizon:] for s in group for c in range(s.n_variates)]
        ins = [s.values[c, :-horizon] for s in group for c in range(s.n_variates)]
        fc = [pr[c] for pr in preds for c in range(pr.shape[0])]
        sc = m4_metrics(fc, act, ins, cfg["season"])
        name = corpus.registry.names[did] if did < len(corpus.registry.names) else str(did)
        m.update({f"{name}/smape": sc.smape, f"{name}/mase": sc.mase, f"{name}/owa": sc.owa})
        m[f"{name}/smape_naive_last"] = float(np.mean([smape(y, naive_last(x, horizon)) for y, x in zip(act, ins)]))
        per.append(sc)
    for k in ("smape", "mase", "owa"):
        m[k] = float(np.mean([getattr(sc, k) for sc in per]))
    return MetricReport(task.value, m, len(samples), {**eff, "horizon": horizon})


def cmd_finetune(args, cfg) -> int:
    if not args.task:
        raise ConfigError("--task is required")
    task = TaskKind(args.task)
    cfg["from"] = getattr(args, "from_")
    out = _out_dir(args.out)
    base = _load_base(cfg, task)
    p = base.config.patch_len
    ft = FinetuneConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], mask_ratio=cfg["mask_ratio"],
                        window_len=cfg["window_len"], horizon=_horizon(cfg, p))
    seed = cfg["seed"]
    extra_cfg = {}
    if task is TaskKind.CLASSIFY:
        corpus = load_samples(cfg, "classify")
        train, _, _ = split(corpus.samples, SPLIT, seed=cfg["data_seed"] or 0)
        labels = [s.class_label for s in train]
        if not train or any(lab is None for lab in labels):
            raise DataError("classification needs a non-empty training split with class labels")
        head = TaskHead(task, int(max(labels)) + 1, cfg["freeze_backbone"])
        model = attach_head(base, head, seed)
        finetune_classifier(train, model, head, ft, seed=seed)
    elif task is TaskKind.ANOMALY:
        values, labels = load_stream(cfg)
        (tr, _), _, _ = _stream_splits(values, labels)
        stats = fit_stream_stats(tr)
        extra_cfg = {"stream_mean": stats.mean.tolist(), "stream_std": stats.std.tolist()}
        head = TaskHead(task, 0, cfg["freeze_backbone"])
        model = attach_head(base, head, seed)
        finetune_anomaly(tr, model, ft, stats, seed=seed)
    else:
        corpus = load_samples(cfg, task.value, ft.horizon)
        train, _, _ = split(corpus.samples, SPLIT, seed=cfg["data_seed"] or 0)
        if cfg["train_fraction"] < 1.0:
            rng = np.random.default_rng([seed, 3])
            keep = sorted(rng.choice(len(train), max(1, round(cfg["train_fraction"] * len(train))), replace=False))
            train = [train[i] for i in keep]
        if not train:
            raise DataError("empty training split")
        head = TaskHead(task, 0, cfg["freeze_backbone"])
        model = attach_head(base, head, seed)
        if task is TaskKind.IMPUTE:
            finetune_imputer(train, model, ft, seed=seed)
        else:
            finetune_forecaster([s.values for s in train], model, ft, seed=seed)
    cfg.update(extra_cfg)
    saved = {k: v for k, v in cfg.items() if k != "config"}
    checkpoint.save(out / "task.ckpt", model, {"task": head.to_dict(), "settings": saved})
    report = evaluate_task(task, model, head, cfg, "val")
    report.append_to(out / "report.jsonl")
    print(report.to_json())
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    src = getattr(args, "from_")
    if not src:
        raise ConfigError("--from is required (a task checkpoint)")
    params, ck = checkpoint.load(src)
    if "task" not in ck:
        raise ConfigError(f"{src} is not a task checkpoint")
    head = TaskHead(**ck["task"])
    settings = dict(ck.get("settings", {}))
    for k in ("quantile_grid", "data", "synthetic", "data_seed", "mask_ratio"):
        if getattr(args, k, None) is not None:
            settings[k] = cfg[k]
    merged = {**DEFAULTS, **settings}
    report = evaluate_task(head.kind, params, head, merged, "test")
    if args.out:
        report.append_to(_out_dir(args.out) / "report.jsonl")
    print(report.to_json())
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    src = getattr(args, "from_")
    if not src:
        raise ConfigError("--from is required")
    try:
        which = Which(str(cfg["which"]).lower())
    except ValueError:
        raise ConfigError(f"unknown --which {cfg['which']!r}; choose dom, var or pooled") from None
    params, _ = checkpoint.load(src)
    corpus = load_samples(cfg, "default")
    out = _out_dir(args.out)
    mat, ids = export_representations(corpus.samples, params, which)
    side = write_representations(out / f"{which.value}.tsbe", mat, ids)
    print(json.dumps({"matrix": str(out / f"{which.value}.tsbe"), "sidecar": str(side), "rows": mat.shape[0],
                      "cols": mat.shape[1]}))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-seed", type=int)
    common.add_argument("--out")
    common.add_argument("--data")
    common.add_argument("--synthetic")
    common.add_argument("--steps", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--patch-len", type=int)
    common.add_argument("--d-model", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--context-len", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--mask-ratio", type=float)
    common.add_argument("--task", choices=[t.value for t in TaskKind])
    common.add_argument("--from", dest="from_")
    common.add_argument("--freeze-backbone", type=lambda s: _coerce("freeze_backbone", s), nargs="?", const=True)
    common.add_argument("--quantile-grid")
    common.add_argument("--save-every", type=int)
    common.add_argument("--horizon", type=int)
    common.add_argument("--pack-width", type=int)
    common.add_argument("--train-fraction", type=float)
    common.add_argument("--which")
    parser = _Parser(prog="timesbert", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TIMESBERT_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise ConfigError("a subcommand is required: " + ", ".join(COMMANDS))
        cfg = resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (DataError, FileNotFoundError, checkpoint.CheckpointError) as e:
        log.error("%s", e)
        return EXIT_DATA
    except (DivergenceError, nx.NonFiniteError, FloatingPointError) as e:
        log.error("numeric divergence: %s", e)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError) as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
