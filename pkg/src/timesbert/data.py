"""Synthetic corpora, CSV ingestion, instance normalization and splits."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding import TimeSeriesSample

FAMILIES = ("sine-mix", "sawtooth", "ar2", "trend-season", "square-pulse")
STD_FLOOR = 1e-6


class DataError(ValueError):
    pass


@dataclass
class FamilySpec:
    family: str
    n_samples: int = 32
    n_variates: int = 3
    length: int = 96
    noise: float = 0.05
    name: str | None = None
    periods: tuple | None = None  # draw seasonal periods from this set instead of a continuous range

    @property
    def dataset_name(self) -> str:
        return self.name or self.family


@dataclass
class DatasetRegistry:
    names: list[str] = field(default_factory=list)
    stats: dict[str, dict] = field(default_factory=dict)

    @property
    def n_datasets(self) -> int:
        return len(self.names)

    def register(self, name: str, **stats) -> int:
        if name in self.names:
            raise DataError(f"dataset {name!r} registered twice")
        self.names.append(name)
        self.stats[name] = stats
        return len(self.names) - 1

    def id_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class Corpus:
    samples: list[TimeSeriesSample]
    registry: DatasetRegistry
    families: list[FamilySpec] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def by_dataset(self) -> dict[int, list[TimeSeriesSample]]:
        out: dict[int, list[TimeSeriesSample]] = defaultdict(list)
        for s in self.samples:
            out[s.dataset_id].append(s)
        return dict(out)

    def manifest(self) -> dict:
        counts = defaultdict(int)
        for s in self.samples:
            counts[s.dataset_id] += 1
        return {
            "seed": self.seed,
            "families": [asdict(f) for f in self.families],
            "datasets": [
                {"name": n, "id": i, "n_samples": counts[i], **self.registry.stats.get(n, {})}
                for i, n in enumerate(self.registry.names)
            ],
        }


# ---------------------------------------------------------------- generators


def sine_mix(t, period, amps, phases, harmonic_amps, harmonic_phases):
    """Fundamental plus second harmonic, one row per variate."""
    w = 2 * np.pi * t / period
    return (
        amps[:, None] * np.sin(w[None, :] + phases[:, None])
        + harmonic_amps[:, None] * np.sin(2 * w[None, :] + harmonic_phases[:, None])
    )


PHASE_JITTER = 0.05  # per-variate phase spread (radians) around the sample's shared phase


def _shared_phase(rng, c):
    return rng.uniform(0, 2 * np.pi) + PHASE_JITTER * rng.standard_normal(c)


def _period(rng, lo, hi, periods):
    if periods:
        return float(periods[int(rng.integers(len(periods)))])
    return rng.uniform(lo, hi)


def _sine_mix(rng, c, t, periods=None):
    amps = rng.uniform(0.5, 1.5, c)
    p = dict(
        period=_period(rng, 10, 40, periods),
        amps=amps,
        phases=_shared_phase(rng, c),
        harmonic_amps=rng.uniform(0.0, 0.5) * amps,
        harmonic_phases=_shared_phase(rng, c),
    )
    return sine_mix(np.arange(t), **p), p


def _sawtooth(rng, c, t, periods=None):
    period = _period(rng, 12, 40, periods)
    shift = np.mod(_shared_phase(rng, c) / (2 * np.pi) * period, period)
    amps = rng.uniform(0.5, 1.5, c)
    frac = np.mod((np.arange(t)[None, :] + shift[:, None]) / period, 1.0)
    return amps[:, None] * (2 * frac - 1), dict(period=period, shift=shift, amps=amps)


def ar2_coefficients(radius: float, angle: float) -> tuple[float, float]:
    """AR(2) coefficients whose characteristic roots are radius * exp(+-i angle)."""
    return 2 * radius * math.cos(angle), -radius * radius


def ar2_variance(phi1: float, phi2: float, sigma: float = 1.0) -> float:
    """Stationary variance of x_t = phi1 x_{t-1} + phi2 x_{t-2} + e_t."""
    return (1 - phi2) * sigma**2 / ((1 + phi2) * ((1 - phi2) ** 2 - phi1**2))


def ar2_simulate(phi1: float, phi2: float, innovations: np.ndarray) -> np.ndarray:
    x = np.zeros_like(innovations)
    for k in range(2, innovations.shape[-1]):
        x[..., k] = phi1 * x[..., k - 1] + phi2 * x[..., k - 2] + innovations[..., k]
    return x


def _ar2(rng, c, t, periods=None, burn_in=200, shared=0.8):
    """Each variate mixes one common AR(2) path with its own; unit innovation variance."""
    radius, angle = rng.uniform(0.5, 0.9), rng.uniform(0.2, 1.2)
    phi1, phi2 = ar2_coefficients(radius, angle)
    common = rng.standard_normal(t + burn_in)
    own = rng.standard_normal((c, t + burn_in))
    e = np.sqrt(shared) * common[None, :] + np.sqrt(1 - shared) * own
    return ar2_simulate(phi1, phi2, e)[:, burn_in:], dict(phi1=phi1, phi2=phi2)


def _trend_season(rng, c, t, periods=None):
    p = dict(
        level=rng.uniform(-1, 1, c),
        slope=rng.uniform(-0.03, 0.03, c),
        period=_period(rng, 12, 30, periods),
        amps=rng.uniform(0.5, 1.5, c),
        phases=_shared_phase(rng, c),
    )
    tt = np.arange(t)[None, :]
    v = p["level"][:, None] + p["slope"][:, None] * tt + p["amps"][:, None] * np.sin(
        2 * np.pi * tt / p["period"] + p["phases"][:, None]
    )
    return v, p


def _square_pulse(rng, c, t, periods=None):
    period = _period(rng, 12, 40, periods)
    duty = rng.uniform(0.3, 0.7)
    shift = np.mod(_shared_phase(rng, c) / (2 * np.pi) * period, period)
    amps = rng.uniform(0.5, 1.5, c)
    frac = np.mod((np.arange(t)[None, :] + shift[:, None]) / period, 1.0)
    return amps[:, None] * (frac < duty), dict(period=period, duty=duty, shift=shift, amps=amps)


_GENERATORS = {
    "sine-mix": _sine_mix,
    "sawtooth": _sawtooth,
    "ar2": _ar2,
    "trend-season": _trend_season,
    "square-pulse": _square_pulse,
}


def generate_family_sample(family: str, n_variates: int, length: int, noise: float, rng,
                           periods=None) -> tuple[np.ndarray, dict]:
    if family not in _GENERATORS:
        raise DataError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    values, params = _GENERATORS[family](rng, n_variates, length, periods)
    if noise > 0:
        values = values + noise * rng.standard_normal(values.shape)
    return values, params


def generate_synthetic_corpus(families, seed: int = 0) -> Corpus:
    """One registry dataset per family entry; class label == dataset id."""
    families = [f if isinstance(f, FamilySpec) else FamilySpec(**f) for f in families]
    registry = DatasetRegistry()
    samples = []
    for fs in families:
        if fs.family not in _GENERATORS:
            raise DataError(f"unknown family {fs.family!r}; choose from {', '.join(FAMILIES)}")
        did = registry.register(fs.dataset_name, n_variates=fs.n_variates, length=fs.length)
        for k in range(fs.n_samples):
            rng = np.random.default_rng([seed, did, k])
            values, params = generate_family_sample(fs.family, fs.n_variates, fs.length, fs.noise, rng, fs.periods)
            samples.append(
                TimeSeriesSample(values, dataset_id=did, class_label=did, sample_id=f"{fs.dataset_name}-{k}", meta=params)
            )
    return Corpus(samples, registry, families, seed)


@dataclass
class AnomalyStream:
    values: np.ndarray  # (C, T)
    labels: np.ndarray  # (T,) bool


def generate_anomaly_stream(n_variates: int = 2, length: int = 4000, anomaly_ratio: float = 0.02,
                            noise: float = 0.05, seed: int = 0, periods=(20.0, 50.0)) -> AnomalyStream:
    """Seasonal multivariate stream with injected spikes and short level shifts.

    ``anomaly_ratio`` of 0 gives a clean stream. Anomalies hit a random variate;
    spikes are 6-10 signal std, level shifts 3-5 std lasting 3-12 points.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    amps = rng.uniform(0.5, 1.5, (n_variates, len(periods)))
    phases = rng.uniform(0, 2 * np.pi, (n_variates, len(periods)))
    values = np.zeros((n_variates, length))
    for j, per in enumerate(periods):
        values += amps[:, j : j + 1] * np.sin(2 * np.pi * t[None, :] / per + phases[:, j : j + 1])
    values += noise * rng.standard_normal(values.shape)
    sd = values.std(axis=1)
    labels = np.zeros(length, dtype=bool)
    target = int(round(anomaly_ratio * length))
    while labels.sum() < target:
        c = rng.integers(n_variates)
        if rng.random() < 0.5:
            pos = int(rng.integers(length))
            if labels[max(0, pos - 2) : pos + 3].any():
                continue
            values[c, pos] += rng.choice([-1, 1]) * rng.uniform(6, 10) * sd[c]
            labels[pos] = True
        else:
            span = int(rng.integers(3, 13))
            pos = int(rng.integers(0, length - span))
            if labels[max(0, pos - 2) : pos + span + 2].any():
                continue
            values[c, pos : pos + span] += rng.choice([-1, 1]) * rng.uniform(3, 5) * sd[c]
            labels[pos : pos + span] = True
    return AnomalyStream(values, labels)


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.std[:, None] + self.mean[:, None]


def normalize_instance(sample: TimeSeriesSample) -> tuple[TimeSeriesSample, NormStats]:
    """Per-variate z-score over valid points (population std, floored at 1e-6)."""
    c, _ = sample.values.shape
    mean = np.zeros(c)
    std = np.ones(c)
    out = np.zeros_like(sample.values)
    for k in range(c):
        x = sample.values[k, : sample.valid_len[k]]
        mean[k] = x.mean()
        std[k] = max(x.std(), STD_FLOOR)
        out[k, : sample.valid_len[k]] = (x - mean[k]) / std[k]
    norm = TimeSeriesSample(out, sample.dataset_id, sample.class_label, sample.sample_id, sample.valid_len.copy(), sample.meta)
    return norm, NormStats(mean, std)


def zscore(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / max(x.std(), STD_FLOOR)


# ---------------------------------------------------------------- splits


def split(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic split, stratified by class label when labels are present."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if (fractions < 0).any():
        raise DataError("split fractions must be non-negative")
    if not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"split fractions sum to {fractions.sum()}, expected 1")
    groups: dict = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.class_label].append(i)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for key in sorted(groups, key=lambda k: (k is None, k)):
        idx = np.array(groups[key])[rng.permutation(len(groups[key]))]
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        lo = 0
        for j, hi in enumerate(bounds):
            parts[j].extend(idx[lo:hi].tolist())
            lo = hi
    return tuple([samples[i] for i in sorted(p)] for p in parts)


# ---------------------------------------------------------------- CSV


@dataclass
class CsvSchema:
    layout: str = "wide"  # "wide": columns are variates; "long": id,time,variate,value rows
    value_columns: list[str] | None = None  # wide; defaults to all non-label columns
    label_column: str | None = None
    id_column: str = "id"
    time_column: str = "time"
    variate_column: str = "variate"
    value_column: str = "value"
    dataset_id: int = 0


def _parse_float(cell: str, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"line {line}: column {col!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: column {col!r}: non-finite value {cell!r}")
    return v


def load_csv_dataset(path, schema: CsvSchema | None = None) -> list[TimeSeriesSample]:
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise DataError(f"{path}: empty file")
        header = list(reader.fieldnames)
        rows = list(enumerate(reader, start=2))
    if not rows:
        raise DataError(f"{path}: no data rows")
    if schema.layout == "wide":
        return [_wide(path, header, rows, schema)]
    if schema.layout == "long":
        return _long(path, header, rows, schema)
    raise DataError(f"unknown layout {schema.layout!r}")


def _require(path, header, cols):
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")


def _wide(path, header, rows, schema):
    cols = schema.value_columns or [h for h in header if h != schema.label_column]
    _require(path, header, cols + ([schema.label_column] if schema.label_column else []))
    values = np.array([[_parse_float(r[c], line, c) for c in cols] for line, r in rows]).T
    label = None
    if schema.label_column:
        label = int(_parse_float(rows[0][1][schema.label_column], rows[0][0], schema.label_column))
    return TimeSeriesSample(values, schema.dataset_id, label, path.stem)


def _long(path, header, rows, schema):
    cols = [schema.id_column, schema.time_column, schema.variate_column, schema.value_column]
    _require(path, header, cols + ([schema.label_column] if schema.label_column else []))
    by_id: dict[str, dict] = {}
    for line, r in rows:
        sid = r[schema.id_column]
        t = int(_parse_float(r[schema.time_column], line, schema.time_column))
        var = r[schema.variate_column]
        v = _parse_float(r[schema.value_column], line, schema.value_column)
        rec = by_id.setdefault(sid, {"points": {}, "label": None})
        rec["points"].setdefault(var, {})[t] = v
        if schema.label_column:
            rec["label"] = int(_parse_float(r[schema.label_column], line, schema.label_column))
    samples = []
    for sid, rec in by_id.items():
        variates = sorted(rec["points"], key=lambda v: (len(v), v))
        length = max(max(p) + 1 for p in rec["points"].values())
        values = np.zeros((len(variates), length))
        valid = np.zeros(len(variates), dtype=np.int64)
        for k, var in enumerate(variates):
            pts = rec["points"][var]
            for t, v in pts.items():
                values[k, t] = v
            valid[k] = max(pts) + 1
        samples.append(TimeSeriesSample(values, schema.dataset_id, rec["label"], sid, valid))
    return samples


def save_corpus(corpus: Corpus, directory) -> None:
    """Write ``samples.csv`` (long layout with dataset and label) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "dataset", "label", "time", "variate", "value"])
        for s in corpus.samples:
            lab = "" if s.class_label is None else s.class_label
            for c in range(s.n_variates):
                for t in range(int(s.valid_len[c])):
                    w.writerow([s.sample_id, s.dataset_id, lab, t, c, repr(float(s.values[c, t]))])
    (d / "manifest.json").write_text(json.dumps(corpus.manifest(), indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{d}: no manifest.json")
    manifest = json.loads(mpath.read_text())
    registry = DatasetRegistry()
    for ds in sorted(manifest["datasets"], key=lambda x: x["id"]):
        registry.register(ds["name"])
    datasets: dict[str, int] = {}
    labels: dict[str, int | None] = {}
    with (d / "samples.csv").open(newline="") as fh:
        for line, r in enumerate(csv.DictReader(fh), start=2):
            datasets[r["id"]] = int(r["dataset"])
            labels[r["id"]] = int(r["label"]) if r["label"] != "" else None
    samples = load_csv_dataset(d / "samples.csv", CsvSchema(layout="long"))
    for s in samples:
        s.dataset_id = datasets[s.sample_id]
        s.class_label = labels[s.sample_id]
    families = [FamilySpec(**f) for f in manifest.get("families", [])]
    return Corpus(samples, registry, families, manifest.get("seed", 0))
