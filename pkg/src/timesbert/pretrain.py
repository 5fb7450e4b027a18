"""Masked patch modeling + functional token prediction, and the AdamW loop."""
from __future__ import annotations

import enum
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import numerics as nx
from .data import Corpus, normalize_instance, zscore
from .embedding import TimeSeriesSample, TokenGrid, build_token_grid, pack
from .encoder import EncoderConfig, ModelParams, encode_packed, init_params

log = logging.getLogger(__name__)


class Action(str, enum.Enum):
    REPLACE = "REPLACE"
    KEEP = "KEEP"


@dataclass
class MaskPlan:
    masked: list[tuple[int, int]]
    actions: list[Action]
    targets: np.ndarray  # (S, P), captured before corruption
    weights: np.ndarray  # (S, P), 0 on padded positions

    @property
    def S(self) -> int:
        return len(self.masked)

    @classmethod
    def from_coords(cls, grid: TokenGrid, coords, action: Action = Action.REPLACE) -> "MaskPlan":
        coords = [(int(c), int(i)) for c, i in coords]
        p = grid.patch_len
        targets = np.array([grid.patches[c, i] for c, i in coords]).reshape(len(coords), p)
        weights = np.array([grid.valid[c, i] for c, i in coords], dtype=np.float64).reshape(len(coords), p)
        return cls(coords, [action] * len(coords), targets, weights)


@dataclass
class FtpLabels:
    variate_labels: np.ndarray | None = None  # (C,) in {0, 1}
    domain_label: int | None = None


def derive_seed(run_seed: int, step: int, sample_id: str) -> int:
    ss = np.random.SeedSequence([run_seed, step, zlib.crc32(sample_id.encode())])
    return int(ss.generate_state(1)[0])


def sample_mask(grid: TokenGrid, alpha: float, rng_seed, replace_prob: float = 0.9) -> MaskPlan:
    """Select each PATCH slot with probability alpha; REPLACE selected ones w.p. replace_prob."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(rng_seed)
    c, n = grid.n_variates, grid.n_patches
    chosen = np.flatnonzero(rng.random(c * n) < alpha)
    replace = rng.random(chosen.size) < replace_prob
    coords = [(int(k // n), int(k % n)) for k in chosen]
    plan = MaskPlan.from_coords(grid, coords)
    plan.actions = [Action.REPLACE if r else Action.KEEP for r in replace]
    return plan


# ---------------------------------------------------------------- variate replacement


class DonorPoolExhausted(RuntimeError):
    pass


class DonorPool:
    """Corpus accessor returning variates drawn from datasets other than a given one."""

    def __init__(self, samples):
        self._by_ds: dict[int, list[TimeSeriesSample]] = {}
        for s in samples:
            self._by_ds.setdefault(s.dataset_id, []).append(s)
        self.dataset_ids = sorted(self._by_ds)

    def can_serve(self, dataset_id: int) -> bool:
        return any(d != dataset_id for d in self.dataset_ids)

    def draw(self, exclude: int, rng: np.random.Generator) -> np.ndarray:
        others = [d for d in self.dataset_ids if d != exclude]
        if not others:
            raise DonorPoolExhausted(f"no dataset other than {exclude} to draw a donor variate from")
        donors = self._by_ds[others[int(rng.integers(len(others)))]]
        s = donors[int(rng.integers(len(donors)))]
        c = int(rng.integers(s.n_variates))
        return s.values[c, : s.valid_len[c]]


def fit_length(series: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop when longer than ``length``, cyclic tiling when shorter."""
    series = np.asarray(series, dtype=np.float64)
    if series.size >= length:
        start = int(rng.integers(series.size - length + 1))
        return series[start : start + length].copy()
    return np.resize(series, length)


def apply_variate_replacement(sample: TimeSeriesSample, donor_pool: DonorPool, rng_seed):
    """Swap one variate of a C >= 2 sample for a z-scored foreign variate."""
    labels = FtpLabels(None, sample.dataset_id)
    if sample.n_variates < 2:
        return sample, labels
    rng = np.random.default_rng(rng_seed)
    victim = int(rng.integers(sample.n_variates))
    donor = zscore(fit_length(donor_pool.draw(sample.dataset_id, rng), sample.length, rng))
    values = sample.values.copy()
    values[victim] = donor
    valid = sample.valid_len.copy()
    valid[victim] = sample.length
    out = TimeSeriesSample(values, sample.dataset_id, sample.class_label, sample.sample_id, valid, sample.meta)
    vl = np.zeros(sample.n_variates, dtype=np.int64)
    vl[victim] = 1
    labels.variate_labels = vl
    return out, labels


# ---------------------------------------------------------------- losses


def mpm_loss(recon: nx.Tensor, plan: MaskPlan) -> nx.Tensor:
    """Mean squared error over the masked, non-padded scalar positions."""
    count = plan.weights.sum()
    if plan.S == 0 or count == 0:
        return nx.Tensor(0.0)
    d = recon - plan.targets
    return nx.sum(d * d * (plan.weights / count))


def ftp_loss(var_outputs: nx.Tensor | None, dom_output: nx.Tensor | None, labels: FtpLabels,
             params: ModelParams) -> nx.Tensor:
    """Binary cross-entropies over [VAR] outputs plus M-way cross-entropy over [DOM]."""
    terms = []
    if labels.variate_labels is not None and var_outputs is not None:
        logits = nx.matmul(var_outputs, params["ftp.W_VAR"])
        n = len(labels.variate_labels)
        terms.append(nx.cross_entropy_from_logits(logits, labels.variate_labels, np.ones(n)))
    if labels.domain_label is not None and dom_output is not None:
        w_dom = params["ftp.W_DOM"]
        if labels.domain_label >= w_dom.shape[1]:
            raise ValueError(f"domain label {labels.domain_label} but W_DOM has {w_dom.shape[1]} classes")
        logits = nx.matmul(nx.reshape(dom_output, (1, -1)), w_dom)
        terms.append(nx.cross_entropy_from_logits(logits, [labels.domain_label]))
    if not terms:
        return nx.Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass
class Example:
    """One grid ready for the model, with its corruption plan and FTP labels."""

    grid: TokenGrid
    plan: MaskPlan | None
    labels: FtpLabels = field(default_factory=FtpLabels)


@dataclass
class BatchOutput:
    total: nx.Tensor
    mpm: nx.Tensor
    ftp: nx.Tensor
    hidden: nx.Tensor  # (B*U, D) encoder outputs
    width: int
    batch: object
    var_logits: np.ndarray | None = None
    var_labels: np.ndarray | None = None
    dom_logits: np.ndarray | None = None
    dom_labels: np.ndarray | None = None


def batch_forward(examples: list[Example], params: ModelParams, use_ftp: bool = True,
                  training: bool = False, rng: np.random.Generator | None = None,
                  pack_width: int | None = None) -> BatchOutput:
    """Joint loss: mean over examples of (L_MPM + L_FTP) computed per example.

    ``pack_width`` narrows the packed rows below the context length; the loss
    does not depend on it, only the cost of attention does.
    """
    grids = [e.grid for e in examples]
    plans = [e.plan for e in examples]
    batch = pack(grids, pack_width or params.config.context_len, params, plans)[0]
    h, u = encode_packed(batch, params, training, rng)
    n = len(examples)

    idx, tgt, wts = [], [], []
    for s, e in enumerate(examples):
        if e.plan is None or e.plan.S == 0 or e.plan.weights.sum() == 0:
            continue
        idx.append(batch.flat(s, [e.grid.patch_pos(c, i) for c, i in e.plan.masked], u))
        tgt.append(e.plan.targets)
        wts.append(e.plan.weights / (e.plan.weights.sum() * n))
    if idx:
        recon = nx.matmul(nx.take_rows(h, np.concatenate(idx)), params["recon.W_out"])
        d = recon - np.concatenate(tgt)
        mpm = nx.sum(d * d * np.concatenate(wts))
    else:
        mpm = nx.Tensor(0.0)

    out = BatchOutput(mpm, mpm, nx.Tensor(0.0), h, u, batch)
    if not use_ftp:
        return out
    ftp_terms = []
    v_idx, v_lab, d_idx, d_lab = [], [], [], []
    for s, e in enumerate(examples):
        if e.labels.variate_labels is not None:
            v_idx.append(batch.flat(s, [e.grid.var_pos(c) for c in range(e.grid.n_variates)], u))
            v_lab.append(e.labels.variate_labels)
        if e.labels.domain_label is not None:
            d_idx.append(batch.flat(s, [0], u))
            d_lab.append(e.labels.domain_label)
    if v_idx:
        labels = np.concatenate(v_lab)
        logits = nx.matmul(nx.take_rows(h, np.concatenate(v_idx)), params["ftp.W_VAR"])
        ftp_terms.append(nx.cross_entropy_from_logits(logits, labels, np.full(labels.size, 1.0 / n)))
        out.var_logits, out.var_labels = logits.data, labels
    if d_idx:
        labels = np.array(d_lab)
        w_dom = params["ftp.W_DOM"]
        if labels.max() >= w_dom.shape[1]:
            raise ValueError(f"domain label {labels.max()} but W_DOM has {w_dom.shape[1]} classes")
        logits = nx.matmul(nx.take_rows(h, np.concatenate(d_idx)), w_dom)
        ftp_terms.append(nx.cross_entropy_from_logits(logits, labels, np.full(labels.size, 1.0 / n)))
        out.dom_logits, out.dom_labels = logits.data, labels
    if ftp_terms:
        ftp = ftp_terms[0] if len(ftp_terms) == 1 else ftp_terms[0] + ftp_terms[1]
        out.ftp = ftp
        out.total = mpm + ftp
    return out


def total_loss(examples, params: ModelParams, use_ftp: bool = True) -> nx.Tensor:
    return batch_forward(examples, params, use_ftp).total


# ---------------------------------------------------------------- optimization


class CosineSchedule:
    """Cosine annealing from lr_init at step 0 to lr_final at ``total_steps``."""

    def __init__(self, lr_init: float, lr_final: float, total_steps: int):
        self.lr_init, self.lr_final, self.total_steps = lr_init, lr_final, max(int(total_steps), 1)

    def __call__(self, step: int) -> float:
        if step <= 0:
            return self.lr_init
        if step >= self.total_steps:
            return self.lr_final
        cos = 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))
        return min(self.lr_init, self.lr_final + (self.lr_init - self.lr_final) * cos)


class WarmupConstant:
    """Linear warmup to ``lr`` over ``warmup_steps``, then constant."""

    def __init__(self, lr: float, warmup_steps: int):
        self.lr, self.warmup_steps = lr, max(int(warmup_steps), 0)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / (self.warmup_steps + 1)
        return self.lr


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only."""

    def __init__(self, params: dict[str, nx.Tensor], betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def step(self, lr: float) -> None:
        st = self.state
        st.step += 1
        c1 = 1 - self.b1**st.step
        c2 = 1 - self.b2**st.step
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1 - lr * self.weight_decay
            m = st.m[k]
            v = st.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: dict[str, nx.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.requires_grad))
    if max_norm and total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params.values():
            if p.requires_grad:
                p.grad *= f
    return total


# ---------------------------------------------------------------- training loop


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alpha: float = 0.25
    replace_prob: float = 0.9
    batch_size: int = 8
    lr_init: float = 1e-4
    lr_final: float = 2e-7
    betas: tuple = (0.9, 0.99)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    use_ftp: bool = True
    variate_replacement: bool = True
    channel_independent: bool = False
    save_every: int = 0
    log_wallclock: bool = False
    pack_width: int | None = None  # row width for packing; None uses the context length


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + msg if msg else ''}")
        self.step = step


def prepare_examples(sample: TimeSeriesSample, config: PretrainConfig, pool: DonorPool | None,
                     seed: int) -> list[Example]:
    """Normalize, optionally replace a variate, build grid(s), and sample masks."""
    ss = np.random.SeedSequence(seed)
    rep_seed, mask_seed = ss.spawn(2)
    labels = FtpLabels(None, sample.dataset_id)
    if pool is not None and config.variate_replacement and not config.channel_independent:
        sample, labels = apply_variate_replacement(sample, pool, rep_seed)
    norm, _ = normalize_instance(sample)
    p = config.encoder.patch_len
    if config.channel_independent:
        grids = build_token_grid(norm, p, channel_independent=True)
        seeds = mask_seed.spawn(len(grids))
        return [Example(g, sample_mask(g, config.alpha, sd, config.replace_prob), FtpLabels(None, sample.dataset_id))
                for g, sd in zip(grids, seeds)]
    grid = build_token_grid(norm, p)
    return [Example(grid, sample_mask(grid, config.alpha, mask_seed, config.replace_prob), labels)]


def batch_order(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Indices for ``step``: consecutive slices of a stream of seeded epoch permutations."""
    out = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - off)
        out.extend(perm[off : off + take].tolist())
        pos += take
    return out


@dataclass
class PretrainResult:
    params: ModelParams
    log: list[dict]


def _config_echo(config: PretrainConfig, corpus: Corpus, seed: int, total_steps: int) -> dict:
    return {
        "pretrain": {k: (v.to_dict() if isinstance(v, EncoderConfig) else v) for k, v in vars(config).items()},
        "registry": list(corpus.registry.names),
        "seed": seed,
        "total_steps": total_steps,
    }


def run_pretraining(corpus: Corpus, config: PretrainConfig, total_steps: int, seed: int = 0,
                    log_path=None, checkpoint_path=None, params: ModelParams | None = None) -> PretrainResult:
    """AdamW on L_MPM + L_FTP with cosine decay; the last step runs at lr_final."""
    m = max(corpus.registry.n_datasets, 1)
    params = params or init_params(config.encoder, m, seed)
    pool = DonorPool(corpus.samples)
    if config.variate_replacement and len(pool.dataset_ids) < 2:
        log.warning("single-dataset corpus: variate discrimination disabled for this run")
        pool = None
    sched = CosineSchedule(config.lr_init, config.lr_final, max(total_steps - 1, 1))
    trainable = params.trainable()
    opt = AdamW(trainable, config.betas, weight_decay=config.weight_decay)
    extra = _config_echo(config, corpus, seed, total_steps)
    records: list[dict] = []
    fh = open(log_path, "w") if log_path else None
    t0 = time.perf_counter()
    try:
        if checkpoint_path and total_steps == 0:
            checkpoint.save(checkpoint_path, params, extra)
        for step in range(total_steps):
            picks = batch_order(len(corpus.samples), config.batch_size, step, seed)
            examples = []
            for i in picks:
                s = corpus.samples[i]
                examples.extend(prepare_examples(s, config, pool, derive_seed(seed, step, s.sample_id)))
            params.zero_grad()
            rng = np.random.default_rng([seed, step, 1])
            try:
                out = batch_forward(examples, params, config.use_ftp, training=True, rng=rng, pack_width=config.pack_width)
                out.total.backward()
            except nx.NonFiniteError as e:
                raise DivergenceError(step, str(e)) from e
            clip_grad_norm(trainable, config.grad_clip)
            lr = sched(step)
            opt.step(lr)
            rec = {"step": step, "loss_mpm": out.mpm.item(), "loss_ftp": out.ftp.item(), "lr": lr}
            if config.log_wallclock:
                rec["wallclock_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
            records.append(rec)
            log.debug("step %d mpm %.6f ftp %.6f lr %.3g", step, rec["loss_mpm"], rec["loss_ftp"], lr)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if checkpoint_path and config.save_every and (step + 1) % config.save_every == 0:
                checkpoint.save(checkpoint_path, params, extra)
        if checkpoint_path and total_steps > 0:
            checkpoint.save(checkpoint_path, params, extra)
    finally:
        if fh:
            fh.close()
    return PretrainResult(params, records)


def evaluate_pretraining(corpus: Corpus, params: ModelParams, config: PretrainConfig, seed: int = 0,
                         batch_size: int = 16) -> dict:
    """Eval-mode MPM loss plus domain and variate-discrimination accuracy on ``corpus``."""
    pool = DonorPool(corpus.samples) if len(DonorPool(corpus.samples).dataset_ids) > 1 else None
    mpm, n = 0.0, 0
    dom_hit = dom_n = var_hit = var_n = 0
    with nx.no_grad():
        for lo in range(0, len(corpus.samples), batch_size):
            examples = []
            for s in corpus.samples[lo : lo + batch_size]:
                examples.extend(prepare_examples(s, config, pool, derive_seed(seed, -1 & 0xFFFF, s.sample_id)))
            out = batch_forward(examples, params, use_ftp=True)
            mpm += out.mpm.item() * len(examples)
            n += len(examples)
            if out.dom_logits is not None:
                dom_hit += int((out.dom_logits.argmax(1) == out.dom_labels).sum())
                dom_n += out.dom_labels.size
            if out.var_logits is not None:
                var_hit += int((out.var_logits.argmax(1) == out.var_labels).sum())
                var_n += out.var_labels.size
    return {
        "loss_mpm": mpm / max(n, 1),
        "domain_accuracy": dom_hit / dom_n if dom_n else float("nan"),
        "variate_accuracy": var_hit / var_n if var_n else float("nan"),
    }
