"""Patching, the structured token grid, and packing into fixed-length contexts.

Grid layout for a C-variate sample with N patches per variate::

    [DOM] p(1,1) .. p(1,N) [VAR] p(2,1) .. p(2,N) [VAR] ... p(C,N) [VAR]

so a grid holds (N+1)*C+1 tokens. The absolute position of a token is its
flat index inside its own sample, which restarts at every packed sample.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics as nx

PAD = -1


@dataclass
class TimeSeriesSample:
    values: np.ndarray  # (C, T)
    dataset_id: int = 0
    class_label: int | None = None
    sample_id: str = ""
    valid_len: np.ndarray | None = None  # per variate, defaults to T
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"sample {self.sample_id!r}: values must be C x T with C, T >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"sample {self.sample_id!r}: non-finite values")
        self.values = v
        if self.valid_len is None:
            self.valid_len = np.full(v.shape[0], v.shape[1], dtype=np.int64)
        self.valid_len = np.asarray(self.valid_len, dtype=np.int64).reshape(-1)
        if self.valid_len.shape != (v.shape[0],):
            raise ValueError(f"sample {self.sample_id!r}: valid_len needs one entry per variate")
        if (self.valid_len < 1).any() or (self.valid_len > v.shape[1]).any():
            raise ValueError(f"sample {self.sample_id!r}: valid_len must lie in [1, T]")

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


class Role(enum.Enum):
    DOM = "DOM"
    VAR = "VAR"
    PATCH = "PATCH"


@dataclass(frozen=True)
class TokenSlot:
    role: Role
    variate: int | None = None
    patch_index: int | None = None
    raw_patch: np.ndarray | None = None
    pad_count: int = 0


def segment_patches(series, patch_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a series into ceil(T/P) patches, zero-padding the last one on the right.

    Returns the (N, P) patch matrix and the per-patch pad counts.
    """
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot patch an empty series")
    if patch_len < 1:
        raise ValueError(f"patch length must be >= 1, got {patch_len}")
    n = math.ceil(x.size / patch_len)
    padded = np.zeros(n * patch_len)
    padded[: x.size] = x
    pads = np.zeros(n, dtype=np.int64)
    pads[-1] = n * patch_len - x.size
    return padded.reshape(n, patch_len), pads


@dataclass
class TokenGrid:
    tokens: list[TokenSlot]
    n_patches: int
    n_variates: int
    patch_len: int
    patches: np.ndarray  # (C, N, P)
    valid: np.ndarray  # (C, N, P) bool, False on padded positions
    sample_id: str = ""
    source_variates: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)

    def patch_pos(self, c: int, i: int) -> int:
        return 1 + c * (self.n_patches + 1) + i

    def var_pos(self, c: int) -> int:
        return 1 + c * (self.n_patches + 1) + self.n_patches

    dom_pos = 0


def grid_size(n_variates: int, length: int, patch_len: int) -> int:
    return (math.ceil(length / patch_len) + 1) * n_variates + 1


def _grid(values: np.ndarray, valid_len: np.ndarray, patch_len: int, sample_id: str, source) -> TokenGrid:
    c_count, t = values.shape
    n = math.ceil(t / patch_len)
    patches = np.zeros((c_count, n, patch_len))
    valid = np.zeros((c_count, n, patch_len), dtype=bool)
    for c in range(c_count):
        vl = int(valid_len[c])
        p, _ = segment_patches(values[c, :vl], patch_len)
        patches[c, : p.shape[0]] = p
        valid[c].reshape(-1)[:vl] = True
    tokens = [TokenSlot(Role.DOM)]
    for c in range(c_count):
        for i in range(n):
            pad = int(patch_len - valid[c, i].sum())
            tokens.append(TokenSlot(Role.PATCH, c, i, patches[c, i], pad))
        tokens.append(TokenSlot(Role.VAR, c))
    return TokenGrid(tokens, n, c_count, patch_len, patches, valid, sample_id, tuple(source))


def build_token_grid(sample: TimeSeriesSample, patch_len: int, channel_independent: bool = False):
    """One grid for the sample, or one single-variate grid per variate in CI mode."""
    if channel_independent:
        return [
            _grid(sample.values[c : c + 1], sample.valid_len[c : c + 1], patch_len, f"{sample.sample_id}/v{c}", (c,))
            for c in range(sample.n_variates)
        ]
    return _grid(sample.values, sample.valid_len, patch_len, sample.sample_id, range(sample.n_variates))


# ---------------------------------------------------------------- embedding


def _embed_layout(grids, plans, params, placement, n_rows: int, width: int) -> nx.Tensor:
    """Build the (n_rows, width, D) embedding tensor for grids placed at (row, start)."""
    pe = params["embed.pos"]
    d = pe.shape[1]
    capacity = pe.shape[0]
    all_patches = []
    patch_base = []
    k = 0
    for g in grids:
        if len(g) > capacity:
            raise IndexError(f"grid {g.sample_id!r} has {len(g)} tokens but only {capacity} positions exist")
        if g.patch_len != params["embed.W_in"].shape[1]:
            raise ValueError(f"grid patch length {g.patch_len} does not match W_in {params['embed.W_in'].shape}")
        flat = g.patches.reshape(-1, g.patch_len)
        all_patches.append(flat)
        patch_base.append(k)
        k += flat.shape[0]
    mask_row, var_row, dom_row, zero_row = k, k + 1, k + 2, k + 3

    src = np.full(n_rows * width, zero_row, dtype=np.int64)
    pos = np.full(n_rows * width, capacity, dtype=np.int64)  # capacity -> zero PE row
    for s, g in enumerate(grids):
        row, start = placement[s]
        base = row * width + start
        n = g.n_patches
        local = np.empty(len(g), dtype=np.int64)
        local[0] = dom_row
        for c in range(g.n_variates):
            o = 1 + c * (n + 1)
            local[o : o + n] = patch_base[s] + c * n + np.arange(n)
            local[o + n] = var_row
        plan = plans[s] if plans is not None else None
        if plan is not None:
            for (c, i), act in zip(plan.masked, plan.actions):
                if act == "REPLACE":
                    local[g.patch_pos(c, i)] = mask_row
        src[base : base + len(g)] = local
        pos[base : base + len(g)] = np.arange(len(g))

    w_in = params["embed.W_in"]
    patch_emb = nx.matmul(np.concatenate(all_patches, axis=0), nx.transpose(w_in))
    table = nx.concat(
        [
            patch_emb,
            nx.reshape(params["embed.mask"], (1, d)),
            nx.reshape(params["embed.var"], (1, d)),
            nx.reshape(params["embed.dom"], (1, d)),
            np.zeros((1, d)),
        ]
    )
    pe_table = nx.concat([pe, np.zeros((1, d))])
    z = nx.take_rows(table, src) + nx.take_rows(pe_table, pos)
    return nx.reshape(z, (n_rows, width, d))


def embed_grid(grid: TokenGrid, params, mask_plan=None) -> nx.Tensor:
    """Z0 for a single grid: (len(grid), D)."""
    z = _embed_layout([grid], [mask_plan], params, [(0, 0)], 1, len(grid))
    return nx.reshape(z, (len(grid), z.shape[2]))


# ---------------------------------------------------------------- packing


@dataclass(frozen=True)
class PackedBatch:
    grids: tuple
    context_len: int
    placement: tuple  # per grid: (row, start)
    block_map: np.ndarray  # (B, L), grid index or PAD
    position_ids: np.ndarray  # (B, L)
    token_embeddings: nx.Tensor | None = None

    @property
    def n_rows(self) -> int:
        return self.block_map.shape[0]

    @cached_property
    def attention_allowed(self) -> np.ndarray:
        bm = self.block_map
        return (bm[:, :, None] == bm[:, None, :]) & (bm[:, :, None] != PAD)

    @cached_property
    def used_len(self) -> int:
        return max(start + len(g) for g, (_, start) in zip(self.grids, self.placement))

    @cached_property
    def slot_index(self) -> dict:
        """(s, c, i) -> (row, col) for patches; (s, c, 'VAR') and (s, 'DOM') for functional tokens."""
        out = {}
        for s, (g, (row, start)) in enumerate(zip(self.grids, self.placement)):
            out[(s, "DOM")] = (row, start)
            for c in range(g.n_variates):
                for i in range(g.n_patches):
                    out[(s, c, i)] = (row, start + g.patch_pos(c, i))
                out[(s, c, "VAR")] = (row, start + g.var_pos(c))
        return out

    def flat(self, s: int, local_pos, width: int | None = None) -> np.ndarray:
        """Flat index into a (B*width, D) view for positions local to grid s."""
        width = self.context_len if width is None else width
        row, start = self.placement[s]
        return row * width + start + np.asarray(local_pos, dtype=np.int64)


def _first_fit_decreasing(lengths, context_len: int):
    order = sorted(range(len(lengths)), key=lambda s: -lengths[s])
    fill: list[int] = []
    placement = [None] * len(lengths)
    for s in order:
        for r, used in enumerate(fill):
            if used + lengths[s] <= context_len:
                placement[s] = (r, used)
                fill[r] += lengths[s]
                break
        else:
            placement[s] = (len(fill), 0)
            fill.append(lengths[s])
    return placement, len(fill)


def pack(grids, context_len: int = 512, params=None, plans=None) -> list[PackedBatch]:
    """First-fit-decreasing packing of whole grids into rows of ``context_len``.

    When ``params`` is given the token embeddings are built as well, with
    ``plans`` (one MaskPlan or None per grid) deciding which patches are masked.
    """
    grids = tuple(grids)
    if not grids:
        raise ValueError("nothing to pack")
    for g in grids:
        if len(g) > context_len:
            raise ValueError(f"sample {g.sample_id!r} needs {len(g)} tokens, context holds {context_len}")
    placement, n_rows = _first_fit_decreasing([len(g) for g in grids], context_len)
    block_map = np.full((n_rows, context_len), PAD, dtype=np.int64)
    position_ids = np.zeros((n_rows, context_len), dtype=np.int64)
    for s, (g, (row, start)) in enumerate(zip(grids, placement)):
        block_map[row, start : start + len(g)] = s
        position_ids[row, start : start + len(g)] = np.arange(len(g))
    emb = None
    if params is not None:
        emb = _embed_layout(grids, plans, params, placement, n_rows, context_len)
    return [PackedBatch(grids, context_len, tuple(placement), block_map, position_ids, emb)]
