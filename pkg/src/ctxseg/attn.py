"""Masked multi-head attention of a centre patch over its neighbourhood.

The centre embedding (live, gradient-carrying) queries the neighbourhood
embeddings retrieved from the memory bank (gradient-free constants). Keys
optionally receive a positional bias shared over heads: either learnable
relative 2-D offsets (row/column halves concatenated), a fixed sinusoid
over the flattened window index, or nothing.

Masked logits are excluded by writing -1e30 before the softmax; masked
weights are therefore exactly zero, and a fully masked window yields a
zero context vector per head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .grid import NeighborhoodView

MASK_FILL = -1e30


@dataclass
class PositionEncoding:
    """Key-bias tables for the (2k+1)^2 neighbourhood window."""

    kind: str  # none | sin1d | rel2d
    k: int
    d: int
    b_row: nd.Tensor | None = None  # (2k+1, d/2), learnable (rel2d)
    b_col: nd.Tensor | None = None
    table: np.ndarray | None = None  # fixed (n, d) sinusoid (sin1d)

    @classmethod
    def create(cls, kind: str, k: int, d: int, rng=None, dtype=np.float32):
        if kind not in ("none", "sin1d", "rel2d"):
            raise ValueError(f"unknown positional encoding kind {kind!r}")
        if kind == "rel2d":
            if d % 2:
                raise ValueError(f"rel2d positional encoding needs even head dim, got d={d}")
            rng = rng or np.random.default_rng(0)
            lim = 1.0 / np.sqrt(d)
            shape = (2 * k + 1, d // 2)
            return cls(
                kind, k, d,
                b_row=nd.param(rng.uniform(-lim, lim, shape), dtype=dtype, name="pos.b_row"),
                b_col=nd.param(rng.uniform(-lim, lim, shape), dtype=dtype, name="pos.b_col"),
            )
        if kind == "sin1d":
            return cls(kind, k, d, table=_sinusoid_table((2 * k + 1) ** 2, d))
        return cls(kind, k, d)

    def parameters(self):
        return [self.b_row, self.b_col] if self.kind == "rel2d" else []


def _sinusoid_table(n: int, d: int) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = t / np.power(10000.0, 2.0 * (i // 2) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _offset_selectors(k: int):
    """Constant 0/1 matrices picking the row/col table entry per window slot.

    Slot t enumerates offsets row-major: column offset x outer, row offset
    y inner, both in [-k, k].
    """
    n = (2 * k + 1) ** 2
    s_row = np.zeros((n, 2 * k + 1), dtype=np.float64)
    s_col = np.zeros((n, 2 * k + 1), dtype=np.float64)
    t = np.arange(n)
    s_row[t, t // (2 * k + 1)] = 1.0
    s_col[t, t % (2 * k + 1)] = 1.0
    return s_row, s_col


def position_bias(enc: PositionEncoding, k: int, d: int, dtype=np.float64) -> nd.Tensor:
    """(2k+1)^2 x d key-bias table as a graph tensor (learnable for rel2d)."""
    n = (2 * k + 1) ** 2
    if enc.k != k or enc.d != d:
        raise ValueError(f"position encoding built for k={enc.k}, d={enc.d}; asked k={k}, d={d}")
    if enc.kind == "none":
        return nd.constant(np.zeros((n, d)), dtype=dtype)
    if enc.kind == "sin1d":
        return nd.constant(enc.table, dtype=dtype)
    s_row, s_col = _offset_selectors(k)
    dt = enc.b_row.dtype
    left = nd.matmul(nd.constant(s_row, dtype=dt), enc.b_row)
    right = nd.matmul(nd.constant(s_col, dtype=dt), enc.b_col)
    return nd.concat([left, right], axis=1)


@dataclass
class MHAParams:
    """Per-head query/key/value projections plus the output projection."""

    w_q: list  # h tensors (D, d)
    w_k: list
    w_v: list
    w_o: nd.Tensor  # (h*d, D)
    b_o: nd.Tensor  # (D,)
    h: int
    d: int
    D: int

    @classmethod
    def create(cls, D: int, d: int, h: int, rng=None, dtype=np.float32):
        if h < 1 or d < 1 or D < 1:
            raise ValueError(f"attention dims D={D}, d={d}, h={h}")
        rng = rng or np.random.default_rng(0)

        def u(fan_in, shape, name):
            lim = 1.0 / np.sqrt(fan_in)
            return nd.param(rng.uniform(-lim, lim, shape), dtype=dtype, name=name)

        return cls(
            w_q=[u(D, (D, d), f"attn.h{i}.w_q") for i in range(h)],
            w_k=[u(D, (D, d), f"attn.h{i}.w_k") for i in range(h)],
            w_v=[u(D, (D, d), f"attn.h{i}.w_v") for i in range(h)],
            w_o=u(h * d, (h * d, D), "attn.w_o"),
            b_o=nd.param(np.zeros(D), dtype=dtype, name="attn.b_o"),
            h=h, d=d, D=D,
        )

    def parameters(self):
        return [*self.w_q, *self.w_k, *self.w_v, self.w_o, self.b_o]


@dataclass
class AttentionOutput:
    a: nd.Tensor  # (1, D) context embedding
    scores: np.ndarray  # (h, n) attention weights, detached


def masked_attention(q: nd.Tensor, k_mat: nd.Tensor, v_mat: nd.Tensor, mask: np.ndarray):
    """Single-head attention of one query row over n masked key/value rows.

    Returns (weights (1, n), out (1, d)); a fully masked window gives exact
    zeros for both.
    """
    n, d = k_mat.shape
    if q.shape != (1, d) or v_mat.shape != (n, d) or np.asarray(mask).shape != (n,):
        raise nd.ShapeError(
            f"masked_attention: q {q.shape}, K {k_mat.shape}, V {v_mat.shape}, mask {np.asarray(mask).shape}"
        )
    if not np.any(mask):
        zeros_w = nd.constant(np.zeros((1, n)), dtype=q.dtype)
        zeros_o = nd.constant(np.zeros((1, d)), dtype=q.dtype)
        return zeros_w, zeros_o
    logits = nd.scale(nd.matmul(q, nd.transpose(k_mat)), 1.0 / np.sqrt(d))
    logits = nd.masked_fill(logits, np.asarray(mask)[None, :], MASK_FILL)
    weights = nd.softmax_lastdim(logits)
    # belt and braces: structural zero at masked slots
    weights = nd.mul(weights, nd.constant(np.asarray(mask)[None, :], dtype=weights.dtype))
    return weights, nd.matmul(weights, v_mat)


def mha_context(
    e_c: nd.Tensor,
    view: NeighborhoodView,
    params: MHAParams,
    enc: PositionEncoding,
) -> AttentionOutput:
    """Context embedding of one centre patch from its neighbourhood view.

    Gradients reach ``e_c`` and all attention parameters; the retrieved
    neighbourhood embeddings are constants.
    """
    if e_c.shape != (1, params.D):
        raise nd.ShapeError(f"mha_context: centre embedding {e_c.shape}, expected (1, {params.D})")
    n = (2 * view.k + 1) ** 2
    if view.embeddings.shape != (n, params.D):
        raise nd.ShapeError(f"mha_context: view {view.embeddings.shape} vs n={n}, D={params.D}")
    neigh = nd.constant(view.embeddings, dtype=e_c.dtype)
    bias = position_bias(enc, view.k, params.d, dtype=e_c.dtype) if enc.kind != "none" else None
    heads, score_rows = [], []
    for h in range(params.h):
        q = nd.matmul(e_c, params.w_q[h])
        k_mat = nd.matmul(neigh, params.w_k[h])
        if bias is not None:
            k_mat = nd.add(k_mat, bias)
        v_mat = nd.matmul(neigh, params.w_v[h])
        weights, out = masked_attention(q, k_mat, v_mat, view.mask)
        heads.append(out)
        score_rows.append(weights.data[0])
    stacked = nd.concat(heads, axis=1)  # (1, h*d)
    a = nd.linear(stacked, params.w_o, params.b_o)
    return AttentionOutput(a=a, scores=np.stack(score_rows))
