"""Bottleneck compression, context fusion and the helper class-ratio head.

The deepest encoder map is pooled to a single vector and projected into
the memory embedding space. Coming back, the attended context vector is
copied over the bottleneck's spatial extent, channel-concatenated and
mixed in by a 1x1 convolution whose feature half starts as the identity,
so a zero context leaves the bottleneck untouched at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff as nd


@dataclass
class EmbedParams:
    """Global-average-pool then linear projection D_hid -> D."""

    w: nd.Tensor
    b: nd.Tensor

    @classmethod
    def create(cls, d_hid: int, D: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        lim = 1.0 / np.sqrt(d_hid)
        return cls(
            w=nd.param(rng.uniform(-lim, lim, (d_hid, D)), dtype=dtype, name="emb.w"),
            b=nd.param(np.zeros(D), dtype=dtype, name="emb.b"),
        )

    def parameters(self):
        return [self.w, self.b]


@dataclass
class FuseParams:
    """1x1 fusion convolution over (D_hid + D) -> D_hid channels."""

    w: nd.Tensor  # (D_hid, D_hid + D, 1, 1)
    b: nd.Tensor  # (D_hid,)

    @classmethod
    def create(cls, d_hid: int, D: int, dtype=np.float32):
        w = np.zeros((d_hid, d_hid + D, 1, 1))
        w[:, :d_hid, 0, 0] = np.eye(d_hid)  # identity on features, zero on context
        return cls(
            w=nd.param(w, dtype=dtype, name="fuse.w"),
            b=nd.param(np.zeros(d_hid), dtype=dtype, name="fuse.b"),
        )

    def parameters(self):
        return [self.w, self.b]


@dataclass
class HelperParams:
    """Linear D -> C head predicting the centre patch class ratios."""

    w: nd.Tensor
    b: nd.Tensor

    @classmethod
    def create(cls, D: int, C: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        lim = 1.0 / np.sqrt(D)
        return cls(
            w=nd.param(rng.uniform(-lim, lim, (D, C)), dtype=dtype, name="helper.w"),
            b=nd.param(np.zeros(C), dtype=dtype, name="helper.b"),
        )

    def parameters(self):
        return [self.w, self.b]


def embed_patch(feat_l: nd.Tensor, proj: EmbedParams) -> nd.Tensor:
    """Compress bottleneck maps (N, D_hid, m, m) to embeddings (N, D)."""
    n, c = feat_l.shape[0], feat_l.shape[1]
    pooled = nd.adaptive_avgpool(feat_l, 1, 1)
    return nd.linear(nd.reshape(pooled, (n, c)), proj.w, proj.b)


def fuse_context(feat_l: nd.Tensor, a: nd.Tensor, conv1x1: FuseParams) -> nd.Tensor:
    """Broadcast the context row (N, D) over m x m, concat, 1x1-convolve."""
    n, c, mh, mw = feat_l.shape
    d = a.shape[-1]
    if a.shape != (n, d):
        raise nd.ShapeError(f"fuse_context: context {a.shape}, expected ({n}, {d})")
    if conv1x1.w.shape[1] != c + d:
        raise nd.ShapeError(
            f"fuse_context: fusion conv expects {conv1x1.w.shape[1]} channels, got {c}+{d}"
        )
    tiles = nd.broadcast_expand(nd.reshape(a, (n, d, 1, 1)), (n, d, mh, mw))
    cat = nd.concat([feat_l, tiles], axis=1)
    return nd.conv2d(cat, conv1x1.w, conv1x1.b, stride=1, pad=0)


def helper_head(a: nd.Tensor, proj: HelperParams) -> nd.Tensor:
    """Predicted class-ratio distribution of the centre patch, rows sum to 1."""
    return nd.softmax_lastdim(nd.linear(a, proj.w, proj.b))


def combined_loss(l_seg: nd.Tensor, l_cls: nd.Tensor, lam: float) -> nd.Tensor:
    """Weighted total loss (1 - lam) * l_seg + lam * l_cls."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {lam}")
    for name, t in (("segmentation", l_seg), ("helper", l_cls)):
        if not np.isfinite(t.data):
            raise FloatingPointError(f"{name} loss is {float(t.data)}; aborting")
    # scale by 1.0 and adding +0.0 are exact, so lam=0 / lam=1 reduce bitwise
    return nd.add(nd.scale(l_seg, 1.0 - lam), nd.scale(l_cls, lam))
