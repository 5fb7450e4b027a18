"""Task adaptation: classification, imputation, anomaly scoring, forecasting, export.

Every task reuses the pre-trained backbone. Classification adds a D x K linear
layer over mean-pooled token outputs; the reconstruction tasks reuse the
``recon.W_out`` projection. The functional-token heads are dropped.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import STD_FLOOR, NormStats, normalize_instance
from .embedding import TimeSeriesSample, TokenGrid, build_token_grid, pack
from .encoder import BACKBONE_PREFIXES, ModelParams, encode_packed, truncated_normal
from .pretrain import (
    Action,
    AdamW,
    Example,
    MaskPlan,
    WarmupConstant,
    batch_forward,
    batch_order,
    clip_grad_norm,
)


class TaskKind(str, enum.Enum):
    CLASSIFY = "classify"
    IMPUTE = "impute"
    ANOMALY = "anomaly"
    FORECAST = "forecast"


@dataclass(frozen=True)
class TaskHead:
    kind: TaskKind
    n_classes: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.kind is TaskKind.CLASSIFY and self.n_classes < 2:
            raise ValueError(f"classification needs at least 2 classes, got {self.n_classes}")

    def head_names(self) -> tuple[str, ...]:
        if self.kind is TaskKind.CLASSIFY:
            return ("head.W", "head.b")
        return ("recon.W_out",)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "n_classes": self.n_classes, "freeze_backbone": self.freeze_backbone}


def attach_head(params: ModelParams, head: TaskHead, seed: int = 0) -> ModelParams:
    """Copy of ``params`` adapted for ``head``: FTP heads removed, task head added, backbone optionally frozen."""
    out = params.copy()
    out.remove_prefix("ftp.")
    d = out.config.d_model
    if head.kind is TaskKind.CLASSIFY:
        out.remove_prefix("recon.")
        if "head.W" not in out:
            out.add("head.W", truncated_normal(np.random.default_rng(seed), (d, head.n_classes), out.config.init_std))
            out.add("head.b", np.zeros(head.n_classes))
    elif "recon.W_out" not in out:
        out.add("recon.W_out", truncated_normal(np.random.default_rng(seed), (d, out.config.patch_len), out.config.init_std))
    for name, t in out.items():
        frozen = head.freeze_backbone and name.startswith(BACKBONE_PREFIXES)
        t.requires_grad = not frozen
        t.grad = None if frozen else np.zeros_like(t.data)
    return out


def tight_width(grids) -> int:
    """Narrowest packing rows that still hold every grid."""
    return max(len(g) for g in grids)


def _encode(grids, plans, params: ModelParams, training=False, rng=None):
    if tight_width(grids) > params.config.context_len:
        raise ValueError(f"a sample needs {tight_width(grids)} tokens, context holds {params.config.context_len}")
    batch = pack(grids, tight_width(grids), params, plans)[0]
    h, u = encode_packed(batch, params, training, rng)
    return h, u, batch


def _check_patch_len(params: ModelParams, grid: TokenGrid) -> None:
    if grid.patch_len != params.config.patch_len:
        raise ValueError(f"grid patch length {grid.patch_len} != model patch length {params.config.patch_len}")


# ---------------------------------------------------------------- classification


def _pooling_matrix(batch, width: int) -> np.ndarray:
    a = np.zeros((len(batch.grids), batch.n_rows * width))
    for s, g in enumerate(batch.grids):
        a[s, batch.flat(s, np.arange(len(g)), width)] = 1.0 / len(g)
    return a


def classify_logits(samples, params: ModelParams, head: TaskHead, training=False, rng=None) -> nx.Tensor:
    """(n, K) logits: mean over each sample's tokens, then the linear head."""
    if head.kind is not TaskKind.CLASSIFY:
        raise ValueError(f"head kind is {head.kind.value}, not classify")
    if params["head.W"].shape[1] != head.n_classes:
        raise ValueError(f"head has {head.n_classes} classes but weights hold {params['head.W'].shape[1]}")
    grids = [build_token_grid(normalize_instance(s)[0], params.config.patch_len) for s in samples]
    h, u, batch = _encode(grids, None, params, training, rng)
    pooled = nx.matmul(_pooling_matrix(batch, u), h)
    return nx.linear(pooled, params["head.W"], params["head.b"])


def classify(sample: TimeSeriesSample, params: ModelParams, head: TaskHead) -> np.ndarray:
    with nx.no_grad():
        return classify_logits([sample], params, head).data[0]


def predict_classes(samples, params: ModelParams, head: TaskHead, batch_size: int = 32) -> np.ndarray:
    out = []
    with nx.no_grad():
        for lo in range(0, len(samples), batch_size):
            out.append(classify_logits(samples[lo : lo + batch_size], params, head).data.argmax(1))
    return np.concatenate(out)


# ---------------------------------------------------------------- reconstruction


def reconstruct(grids, plans, params: ModelParams, training=False, rng=None) -> tuple[nx.Tensor, list[np.ndarray]]:
    """W_out projections at every plan coordinate, stacked; returns them and per-grid row ranges."""
    for g in grids:
        _check_patch_len(params, g)
    h, u, batch = _encode(grids, plans, params, training, rng)
    idx, ranges, k = [], [], 0
    for s, (g, plan) in enumerate(zip(grids, plans)):
        idx.append(batch.flat(s, [g.patch_pos(c, i) for c, i in plan.masked], u))
        ranges.append(np.arange(k, k + plan.S))
        k += plan.S
    return nx.matmul(nx.take_rows(h, np.concatenate(idx)), params["recon.W_out"]), ranges


def n_missing(n_patches: int, ratio: float) -> int:
    """Patches masked per variate: ratio * N rounded half-up, at least one."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1], got {ratio}")
    return min(n_patches, max(1, math.floor(ratio * n_patches + 0.5)))


def choose_missing(n_variates: int, n_patches: int, ratio: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    k = n_missing(n_patches, ratio)
    return [(c, int(i)) for c in range(n_variates) for i in np.sort(rng.choice(n_patches, k, replace=False))]


def _observed_stats(sample: TimeSeriesSample, missing, patch_len: int) -> NormStats:
    c_count, t = sample.values.shape
    seen = np.zeros((c_count, t), dtype=bool)
    for c in range(c_count):
        seen[c, : sample.valid_len[c]] = True
    for c, i in missing:
        seen[c, i * patch_len : (i + 1) * patch_len] = False
    mean, std = np.zeros(c_count), np.ones(c_count)
    for c in range(c_count):
        x = sample.values[c, seen[c]]
        if x.size:
            mean[c], std[c] = x.mean(), max(x.std(), STD_FLOOR)
    return NormStats(mean, std)


def impute_example(sample: TimeSeriesSample, missing, patch_len: int) -> tuple[Example, NormStats]:
    """Grid normalized with statistics of observed points only, missing patches set to REPLACE."""
    missing = sorted({(int(c), int(i)) for c, i in missing})
    if not missing:
        raise ValueError(f"sample {sample.sample_id!r}: nothing to impute")
    stats = _observed_stats(sample, missing, patch_len)
    norm = (sample.values - stats.mean[:, None]) / stats.std[:, None]
    for c in range(sample.n_variates):
        norm[c, sample.valid_len[c] :] = 0.0
    grid = build_token_grid(
        TimeSeriesSample(norm, sample.dataset_id, sample.class_label, sample.sample_id, sample.valid_len), patch_len
    )
    for c, i in missing:
        if not (0 <= c < grid.n_variates and 0 <= i < grid.n_patches):
            raise ValueError(f"missing coordinate {(c, i)} outside the {grid.n_variates}x{grid.n_patches} patch grid")
    return Example(grid, MaskPlan.from_coords(grid, missing, Action.REPLACE)), stats


@dataclass
class ImputeResult:
    completed: np.ndarray  # (C, T) observed values with the missing patches filled in
    patch_mse: np.ndarray  # (S,) per masked patch, original units
    mse: float  # over all masked, non-padded points, original units
    mse_normalized: float


def impute(sample: TimeSeriesSample, missing, params: ModelParams) -> ImputeResult:
    """Fill the ``missing`` (variate, patch) coordinates; errors are measured against ``sample.values``."""
    p = params.config.patch_len
    ex, stats = impute_example(sample, missing, p)
    with nx.no_grad():
        recon, _ = reconstruct([ex.grid], [ex.plan], params)
    pred = recon.data
    plan = ex.plan
    completed = sample.values.copy()
    err, err_n = [], []
    for k, (c, i) in enumerate(plan.masked):
        w = plan.weights[k].astype(bool)
        lo = i * p
        vals = pred[k][w] * stats.std[c] + stats.mean[c]
        completed[c, lo : lo + w.sum()] = vals
        err.append((vals - sample.values[c, lo : lo + w.sum()]) ** 2)
        err_n.append((pred[k][w] - plan.targets[k][w]) ** 2)
    patch_mse = np.array([e.mean() for e in err])
    return ImputeResult(completed, patch_mse, float(np.concatenate(err).mean()), float(np.concatenate(err_n).mean()))


def mean_impute(sample: TimeSeriesSample, missing, patch_len: int) -> np.ndarray:
    """Baseline: each missing patch filled with its variate's observed mean."""
    stats = _observed_stats(sample, missing, patch_len)
    out = sample.values.copy()
    for c, i in missing:
        out[c, i * patch_len : (i + 1) * patch_len] = stats.mean[c]
    return out


# ---------------------------------------------------------------- anomaly detection


def _windows(values: np.ndarray, window_len: int) -> list[TimeSeriesSample]:
    c_count, t = values.shape
    out = []
    for k, lo in enumerate(range(0, t, window_len)):
        seg = values[:, lo : lo + window_len]
        n = seg.shape[1]
        full = np.zeros((c_count, window_len))
        full[:, :n] = seg
        out.append(TimeSeriesSample(full, sample_id=f"w{k}", valid_len=np.full(c_count, n)))
    return out


def _full_plan(grid: TokenGrid, action: Action) -> MaskPlan:
    coords = [(c, i) for c in range(grid.n_variates) for i in range(grid.n_patches)]
    return MaskPlan.from_coords(grid, coords, action)


def window_examples(values: np.ndarray, window_len: int, patch_len: int) -> list[Example]:
    """Non-overlapping windows, every patch a KEEP target: plain self-reconstruction."""
    if window_len < patch_len:
        raise ValueError(f"window length {window_len} shorter than patch length {patch_len}")
    if window_len % patch_len:
        raise ValueError(f"window length {window_len} is not a multiple of patch length {patch_len}")
    out = []
    for w in _windows(np.asarray(values, dtype=np.float64), window_len):
        g = build_token_grid(w, patch_len)
        out.append(Example(g, _full_plan(g, Action.KEEP)))
    return out


def fit_stream_stats(values: np.ndarray) -> NormStats:
    values = np.asarray(values, dtype=np.float64)
    return NormStats(values.mean(axis=1), np.maximum(values.std(axis=1), STD_FLOOR))


def _apply_stats(values, stats: NormStats | None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    stats = stats or fit_stream_stats(values)
    return (values - stats.mean[:, None]) / stats.std[:, None]


def anomaly_score(stream: np.ndarray, params: ModelParams, window_len: int, stats: NormStats | None = None,
                  batch_size: int = 64) -> np.ndarray:
    """Per-time-point squared reconstruction error, averaged over variates.

    The stream is standardized with ``stats`` (by default its own per-variate
    statistics), cut into non-overlapping windows and fully reconstructed.
    """
    x = _apply_stats(stream, stats)
    t = x.shape[1]
    examples = window_examples(x, window_len, params.config.patch_len)
    scores = []
    with nx.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            recon, ranges = reconstruct([e.grid for e in chunk], [e.plan for e in chunk], params)
            for e, r in zip(chunk, ranges):
                c, n, p = e.grid.patches.shape
                err = (recon.data[r].reshape(c, n * p) - e.grid.patches.reshape(c, n * p)) ** 2
                scores.append(err.mean(axis=0))
    return np.concatenate(scores)[:t]


def threshold_at(calibration: np.ndarray, quantile: float) -> float:
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.size == 0:
        raise ValueError("empty calibration split")
    if not 0.0 <= quantile < 1.0:
        raise ValueError(f"quantile must lie in [0, 1), got {quantile}")
    return -math.inf if quantile == 0.0 else float(np.quantile(calibration, quantile))


def detect(scores: np.ndarray, calibration: np.ndarray, quantile: float) -> np.ndarray:
    """score > quantile of the calibration scores; quantile 0 flags every point."""
    return np.asarray(scores) > threshold_at(calibration, quantile)


# ---------------------------------------------------------------- forecasting


def forecast_example(history: np.ndarray, horizon: int, patch_len: int,
                     future: np.ndarray | None = None) -> tuple[Example, NormStats, int]:
    """Grid with ceil(H/P) mask patches after each variate's history patches.

    History is left-truncated to a multiple of P and standardized with its
    own statistics. With ``future`` given, the mask targets hold it (training).
    Returns the example, the statistics and the number of history patches.
    """
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    history = np.atleast_2d(np.asarray(history, dtype=np.float64))
    c_count, t = history.shape
    n_hist = t // patch_len
    if n_hist < 1:
        raise ValueError(f"history of {t} points is shorter than one patch ({patch_len})")
    hist = history[:, t - n_hist * patch_len :]
    stats = NormStats(hist.mean(axis=1), np.maximum(hist.std(axis=1), STD_FLOOR))
    n_fut = math.ceil(horizon / patch_len)
    total = (n_hist + n_fut) * patch_len
    values = np.zeros((c_count, total))
    values[:, : hist.shape[1]] = (hist - stats.mean[:, None]) / stats.std[:, None]
    if future is not None:
        future = np.atleast_2d(np.asarray(future, dtype=np.float64))[:, :horizon]
        values[:, hist.shape[1] : hist.shape[1] + future.shape[1]] = (future - stats.mean[:, None]) / stats.std[:, None]
    valid = np.full(c_count, hist.shape[1] + horizon)
    grid = build_token_grid(TimeSeriesSample(values, valid_len=valid), patch_len)
    coords = [(c, n_hist + j) for c in range(c_count) for j in range(n_fut)]
    return Example(grid, MaskPlan.from_coords(grid, coords, Action.REPLACE)), stats, n_hist


def forecast(history: np.ndarray, horizon: int, params: ModelParams) -> np.ndarray:
    """C x H prediction in the history's original units."""
    p = params.config.patch_len
    ex, stats, _ = forecast_example(history, horizon, p)
    if len(ex.grid) > params.config.context_len:
        raise ValueError(f"history plus horizon need {len(ex.grid)} tokens, context holds {params.config.context_len}")
    with nx.no_grad():
        recon, _ = reconstruct([ex.grid], [ex.plan], params)
    c_count = ex.grid.n_variates
    pred = recon.data.reshape(c_count, -1)[:, :horizon]
    return stats.denormalize(pred)


# ---------------------------------------------------------------- representation export


class Which(str, enum.Enum):
    DOM = "dom"
    VAR = "var"
    POOLED = "pooled"


def export_representations(samples, params: ModelParams, which, batch_size: int = 32):
    """Encoder outputs as float32 rows plus (sample_id, label) per row.

    DOM and POOLED give one row per sample, VAR one per variate.
    """
    which = Which(str(which.value if isinstance(which, Which) else which).lower())
    rows, ids = [], []
    with nx.no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            grids = [build_token_grid(normalize_instance(s)[0], params.config.patch_len) for s in chunk]
            h, u, batch = _encode(grids, None, params)
            hd = h.data
            for s, (smp, g) in enumerate(zip(chunk, grids)):
                label = "" if smp.class_label is None else str(smp.class_label)
                if which is Which.DOM:
                    rows.append(hd[batch.flat(s, [0], u)[0]])
                    ids.append((smp.sample_id, label))
                elif which is Which.POOLED:
                    rows.append(hd[batch.flat(s, np.arange(len(g)), u)].mean(axis=0))
                    ids.append((smp.sample_id, label))
                else:
                    for c in range(g.n_variates):
                        rows.append(hd[batch.flat(s, [g.var_pos(c)], u)[0]])
                        ids.append((f"{smp.sample_id}/v{c}", label))
    mat = np.asarray(rows, dtype=np.float32).reshape(len(rows), params.config.d_model)
    return mat, ids


EXPORT_MAGIC = b"TSBE"


def write_representations(path, matrix: np.ndarray, ids) -> Path:
    """Binary matrix at ``path`` and a tab-separated sidecar next to it. Returns the sidecar path."""
    path = Path(path)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = matrix.shape
    path.write_bytes(EXPORT_MAGIC + struct.pack("<II", rows, cols) + matrix.tobytes())
    side = path.with_name(path.name + ".tsv")
    with open(side, "w") as fh:
        fh.write("row\tsample_id\tlabel\n")
        for r, (sid, label) in enumerate(ids):
            fh.write(f"{r}\t{sid}\t{label}\n")
    return side


def read_representations(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != EXPORT_MAGIC:
        raise ValueError(f"{path}: not a representation file")
    rows, cols = struct.unpack_from("<II", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=12).reshape(rows, cols)


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    mask_ratio: float = 0.25  # impute
    window_len: int = 40  # anomaly
    horizon: int = 8  # forecast


@dataclass
class FinetuneResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)


def _train(params: ModelParams, loss_fn, n_items: int, config: FinetuneConfig, seed: int) -> FinetuneResult:
    """Shared loop: seeded minibatches, AdamW, constant lr after a linear warmup."""
    if n_items < 1:
        raise ValueError("no training items")
    trainable = params.trainable()
    opt = AdamW(trainable, weight_decay=config.weight_decay)
    sched = WarmupConstant(config.lr, round(config.warmup_frac * config.steps))
    bs = min(config.batch_size, n_items)
    losses = []
    for step in range(config.steps):
        picks = batch_order(n_items, bs, step, seed)
        params.zero_grad()
        rng = np.random.default_rng([seed, step, 2])
        loss = loss_fn(picks, step, rng)
        loss.backward()
        clip_grad_norm(trainable, config.grad_clip)
        opt.step(sched(step))
        losses.append(loss.item())
    return FinetuneResult(params, losses)


def finetune_classifier(samples, params: ModelParams, head: TaskHead, config: FinetuneConfig,
                        seed: int = 0) -> FinetuneResult:
    labels = np.array([s.class_label for s in samples])
    if (labels < 0).any() or (labels >= head.n_classes).any():
        raise ValueError(f"class labels must lie in [0, {head.n_classes})")

    def loss_fn(picks, step, rng):
        logits = classify_logits([samples[i] for i in picks], params, head, training=True, rng=rng)
        return nx.cross_entropy_from_logits(logits, labels[picks])

    return _train(params, loss_fn, len(samples), config, seed)


def _reconstruction_loss(examples, params, rng) -> nx.Tensor:
    width = tight_width([e.grid for e in examples])
    return batch_forward(examples, params, use_ftp=False, training=True, rng=rng, pack_width=width).mpm


def finetune_imputer(samples, params: ModelParams, config: FinetuneConfig, seed: int = 0) -> FinetuneResult:
    """Random missing patches (mask_ratio per variate) redrawn every step."""
    p = params.config.patch_len

    def loss_fn(picks, step, rng):
        examples = []
        for i in picks:
            s = samples[i]
            n = math.ceil(s.length / p)
            missing = choose_missing(s.n_variates, n, config.mask_ratio, np.random.default_rng([seed, step, i]))
            examples.append(impute_example(s, missing, p)[0])
        return _reconstruction_loss(examples, params, rng)

    return _train(params, loss_fn, len(samples), config, seed)


def finetune_anomaly(values: np.ndarray, params: ModelParams, config: FinetuneConfig, stats: NormStats | None = None,
                     seed: int = 0) -> FinetuneResult:
    """Unmasked self-reconstruction on non-overlapping windows of the training stream."""
    examples = window_examples(_apply_stats(values, stats), config.window_len, params.config.patch_len)

    def loss_fn(picks, step, rng):
        return _reconstruction_loss([examples[i] for i in picks], params, rng)

    return _train(params, loss_fn, len(examples), config, seed)


def finetune_forecaster(series, params: ModelParams, config: FinetuneConfig, seed: int = 0) -> FinetuneResult:
    """Each series is history + horizon; the last ``config.horizon`` points are the targets."""
    h, p = config.horizon, params.config.patch_len
    examples = []
    for s in series:
        v = np.atleast_2d(np.asarray(s.values if isinstance(s, TimeSeriesSample) else s, dtype=np.float64))
        examples.append(forecast_example(v[:, :-h], h, p, future=v[:, -h:])[0])

    def loss_fn(picks, step, rng):
        return _reconstruction_loss([examples[i] for i in picks], params, rng)

    return _train(params, loss_fn, len(examples), config, seed)
