"""Encoder-only transformer backbone and the named parameter store."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    context_len: int = 512
    patch_len: int = 24
    init_std: float = 0.02
    pos_init_std: float | None = None  # None: same as init_std

    def __post_init__(self):
        for k in ("d_model", "n_heads", "ffn_mult", "context_len", "patch_len"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.init_std <= 0 or (self.pos_init_std is not None and self.pos_init_std <= 0):
            raise ValueError("init std must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# BERT-base sized backbone; handy for parameter accounting.
BERT_BASE = dict(d_model=768, n_layers=12, n_heads=12, ffn_mult=4, context_len=512)

TASK_PATCH_LEN = {"classify": 36, "impute": 24, "forecast": 4, "anomaly": 4}


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class ModelParams:
    """Named learnable tensors. Insertion order is the checkpoint order."""

    def __init__(self, config: EncoderConfig, n_domains: int, tensors: dict[str, nx.Tensor] | None = None):
        self.config = config
        self.n_domains = n_domains
        self.tensors: dict[str, nx.Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> nx.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def add(self, name: str, data) -> nx.Tensor:
        if name in self.tensors:
            raise KeyError(f"parameter {name!r} already exists")
        t = nx.Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def remove_prefix(self, prefix: str) -> None:
        for k in [k for k in self.tensors if k.startswith(prefix)]:
            del self.tensors[k]

    def trainable(self) -> dict[str, nx.Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_values(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            self.n_domains,
            {k: nx.Tensor(t.data, requires_grad=t.requires_grad, name=k) for k, t in self.tensors.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


BACKBONE_PREFIXES = ("embed.", "layers.", "final_ln.")


def init_params(config: EncoderConfig, n_domains: int, seed: int = 0) -> ModelParams:
    """Truncated-normal weights (std ``config.init_std``), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, p = config.d_model, config.patch_len
    f = config.ffn_mult * d
    std = config.init_std
    pos_std = std if config.pos_init_std is None else config.pos_init_std
    mp = ModelParams(config, n_domains)

    def tn(shape):
        return truncated_normal(rng, shape, std)

    mp.add("embed.W_in", tn((d, p)))
    mp.add("embed.pos", truncated_normal(rng, (config.context_len, d), pos_std))
    mp.add("embed.mask", tn((d,)))
    mp.add("embed.var", tn((d,)))
    mp.add("embed.dom", tn((d,)))
    for layer in range(config.n_layers):
        pre = f"layers.{layer}."
        mp.add(pre + "ln1.gamma", np.ones(d))
        mp.add(pre + "ln1.beta", np.zeros(d))
        for w in ("q", "k", "v", "o"):
            mp.add(pre + f"attn.W{w}", tn((d, d)))
            mp.add(pre + f"attn.b{w}", np.zeros(d))
        mp.add(pre + "ln2.gamma", np.ones(d))
        mp.add(pre + "ln2.beta", np.zeros(d))
        mp.add(pre + "ffn.W1", tn((d, f)))
        mp.add(pre + "ffn.b1", np.zeros(f))
        mp.add(pre + "ffn.W2", tn((f, d)))
        mp.add(pre + "ffn.b2", np.zeros(d))
    mp.add("final_ln.gamma", np.ones(d))
    mp.add("final_ln.beta", np.zeros(d))
    mp.add("recon.W_out", tn((d, p)))
    mp.add("ftp.W_VAR", tn((d, 2)))
    mp.add("ftp.W_DOM", tn((d, n_domains)))
    return mp


def param_count(config: EncoderConfig, n_domains: int) -> int:
    """Closed-form size of ``init_params``.

    embeddings: D*P + ctx*D + 3D; per layer: 4(D^2+D) + 2*D*F + F + D + 4D;
    final norm 2D; heads: D*P + 2D + D*M.
    """
    d, p, m = config.d_model, config.patch_len, n_domains
    f = config.ffn_mult * d
    per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d
    return d * p + config.context_len * d + 3 * d + config.n_layers * per_layer + 2 * d + d * p + 2 * d + d * m


# ---------------------------------------------------------------- forward


def _split_heads(x: nx.Tensor, n_heads: int) -> nx.Tensor:
    b, l, d = x.shape
    return nx.transpose(nx.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def transformer_block(z: nx.Tensor, allowed: np.ndarray, params: ModelParams, layer: int,
                      config: EncoderConfig, rng: np.random.Generator | None = None) -> nx.Tensor:
    """Pre-LN block: z + MHSA(LN(z)), then + FFN(LN(.)) with GELU."""
    pre = f"layers.{layer}."
    P = lambda name: params[pre + name]  # noqa: E731
    b, l, d = z.shape
    if allowed.shape != (b, l, l):
        raise nx.ShapeError(f"attention mask {allowed.shape} does not match activations {z.shape}")
    a = config.n_heads
    drop = config.dropout if rng is not None else 0.0
    try:
        h = nx.layer_norm(z, P("ln1.gamma"), P("ln1.beta"))
        q = _split_heads(nx.linear(h, P("attn.Wq"), P("attn.bq")), a)
        k = _split_heads(nx.linear(h, P("attn.Wk"), P("attn.bk")), a)
        v = _split_heads(nx.linear(h, P("attn.Wv"), P("attn.bv")), a)
        scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // a))
        attn = nx.dropout(nx.softmax(scores, mask=allowed[:, None, :, :]), drop, rng)
        ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, l, d))
        z = z + nx.dropout(nx.linear(ctx, P("attn.Wo"), P("attn.bo")), drop, rng)
        h = nx.layer_norm(z, P("ln2.gamma"), P("ln2.beta"))
        f = nx.gelu(nx.linear(h, P("ffn.W1"), P("ffn.b1")))
        z = z + nx.dropout(nx.linear(f, P("ffn.W2"), P("ffn.b2")), drop, rng)
    except nx.NonFiniteError as e:
        raise nx.NonFiniteError(f"encoder layer {layer}: {e}") from e
    return z


def encoder_forward(z0: nx.Tensor, allowed: np.ndarray, params: ModelParams, config: EncoderConfig,
                    training: bool = False, rng: np.random.Generator | None = None) -> nx.Tensor:
    """L blocks then a final layer norm. Dropout only when ``training`` and an rng is supplied."""
    rng = rng if training else None
    z = z0
    for layer in range(config.n_layers):
        z = transformer_block(z, allowed, params, layer, config, rng)
    return nx.layer_norm(z, params["final_ln.gamma"], params["final_ln.beta"])


def encode_packed(batch, params: ModelParams, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[nx.Tensor, int]:
    """Run the encoder over a PackedBatch's occupied prefix.

    Positions past the last sample are PAD and cannot influence anything, so
    they are cut before attention. Returns the (B*U, D) outputs and U.
    """
    if batch.token_embeddings is None:
        raise ValueError("batch was packed without embeddings")
    u = batch.used_len
    z0 = batch.token_embeddings[:, :u, :]
    allowed = batch.attention_allowed[:, :u, :u]
    h = encoder_forward(z0, allowed, params, params.config, training, rng)
    return nx.reshape(h, (h.shape[0] * u, h.shape[2])), u
