"""Task metrics: accuracy, point-adjusted F1, SMAPE/MASE/OWA, masked MSE."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ in shape")
    if preds.size == 0:
        raise ValueError("accuracy of an empty set")
    return float((preds == labels).mean())


def segments(truth) -> list[tuple[int, int]]:
    """Half-open [start, end) runs of True."""
    t = np.asarray(truth, dtype=bool).astype(np.int8)
    edges = np.diff(np.concatenate([[0], t, [0]]))
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def point_adjust(pred, truth) -> np.ndarray:
    """Mark a whole true segment positive when any of its points is predicted."""
    pred = np.asarray(pred, dtype=bool).copy()
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for lo, hi in segments(truth):
        if pred[lo:hi].any():
            pred[lo:hi] = True
    return pred


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # no true anomalies and no predictions


def f1_point_adjusted(pred, truth) -> PRF:
    adj = point_adjust(pred, truth)
    truth = np.asarray(truth, dtype=bool)
    tp = int((adj & truth).sum())
    fp = int((adj & ~truth).sum())
    fn = int((~adj & truth).sum())
    if tp + fp + fn == 0:
        return PRF(0.0, 0.0, 0.0, degenerate=True)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f1)


# ---------------------------------------------------------------- M4-style forecasting


def smape(y, yhat) -> float:
    """200/H * sum |y - yhat| / (|y| + |yhat|), 0/0 terms counted as 0."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    den = np.abs(y) + np.abs(yhat)
    num = np.abs(y - yhat)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(200.0 * terms.mean())


def mase_scale(insample, m: int) -> float:
    x = np.asarray(insample, dtype=np.float64)
    if x.size <= m:
        raise ValueError(f"in-sample length {x.size} must exceed seasonality {m}")
    return float(np.abs(x[m:] - x[:-m]).mean())


def mase(y, yhat, insample, m: int) -> float:
    scale = mase_scale(insample, m)
    if scale == 0:
        raise ZeroDivisionError("in-sample seasonal differences are all zero")
    return float(np.abs(np.asarray(y) - np.asarray(yhat)).mean() / scale)


def naive2(insample, horizon: int, m: int) -> np.ndarray:
    """Seasonal naive: repeat the last observed season."""
    x = np.asarray(insample, dtype=np.float64)
    h = np.arange(horizon)
    return x[x.size - m + (h % m)]


def naive_last(insample, horizon: int) -> np.ndarray:
    return np.full(horizon, float(np.asarray(insample)[-1]))


@dataclass
class ForecastScores:
    smape: float
    mase: float
    owa: float
    smape_naive2: float
    mase_naive2: float
    n_series: int
    n_excluded: int = 0


def m4_metrics(forecasts, actuals, insamples, m: int) -> ForecastScores:
    """Per-series SMAPE and MASE averaged with equal weight, OWA against Naive2.

    Series whose in-sample seasonal differences are all zero are excluded with
    a warning since MASE is undefined for them.
    """
    s, ms, s2, ms2 = [], [], [], []
    excluded = 0
    for k, (f, y, x) in enumerate(zip(forecasts, actuals, insamples)):
        f, y, x = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (f, y, x))
        if f.shape != y.shape:
            raise ValueError(f"series {k}: forecast length {f.size} != actual length {y.size}")
        scale = mase_scale(x, m)
        if scale == 0:
            log.warning("series %d excluded: in-sample seasonal differences are all zero", k)
            excluded += 1
            continue
        n2 = naive2(x, y.size, m)
        s.append(smape(y, f))
        ms.append(np.abs(y - f).mean() / scale)
        s2.append(smape(y, n2))
        ms2.append(np.abs(y - n2).mean() / scale)
    if not s:
        raise ValueError("no series left to score")
    sm, mm, sm2, mm2 = (float(np.mean(v)) for v in (s, ms, s2, ms2))
    owa = 0.5 * (_ratio(sm, sm2) + _ratio(mm, mm2))
    return ForecastScores(sm, mm, owa, sm2, mm2, len(s), excluded)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 0.0 if a == 0 else math.inf
    return a / b


def masked_mse(pred, truth, mask) -> float:
    """Mean squared error over the True entries of ``mask``."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == truth.shape == mask.shape):
        raise ValueError(f"shapes differ: {pred.shape}, {truth.shape}, {mask.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    d = pred[mask] - truth[mask]
    return float((d * d).mean())


def patch_mask(shape, coords, patch_len: int, valid_len=None) -> np.ndarray:
    """Boolean (C, T) mask covering patches ``coords`` minus any padded tail."""
    c_count, t = shape
    out = np.zeros(shape, dtype=bool)
    for c, i in coords:
        out[c, i * patch_len : (i + 1) * patch_len] = True
    if valid_len is not None:
        for c in range(c_count):
            out[c, int(valid_len[c]) :] = False
    return out


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    n: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a report needs at least one evaluated item")
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {', '.join(bad)}")

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "n": self.n, "config": self.config},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        d = json.loads(line)
        return cls(d["task"], d["metrics"], d["n"], d.get("config", {}))

    def append_to(self, path) -> None:
        with open(path, "a") as fh:
            fh.write(self.to_json() + "\n")
