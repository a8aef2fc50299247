"""Compact encoder-decoder segmentation net exposing the bottleneck hook.

A small U-Net stand-in: a conv stem, ``levels`` conv+maxpool stages down
to the bottleneck, then nearest-upsample + skip-concat + conv stages back
up to a per-pixel class head. The memory-attention path taps the deepest
map, fuses the attended context there, and decodes the modified map; with
radius k=0 the model carries no attention machinery at all and is exactly
the plain net.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .attn import AttentionOutput, MHAParams, PositionEncoding, mha_context
from .fuse import EmbedParams, FuseParams, HelperParams, embed_patch, fuse_context, helper_head
from .grid import MemoryBank


@dataclass(frozen=True)
class DeskNetConfig:
    S: int = 32
    C: int = 4
    levels: int = 3
    channels: tuple = (16, 32, 64)  # width of feat_0..feat_{levels-1}; bottleneck keeps the last
    # memory-attention head
    k: int = 2
    D: int = 64
    heads: int = 2
    d: int = 16
    pos_kind: str = "rel2d"
    dtype: str = "f32"

    def __post_init__(self):
        if self.S % (2 ** self.levels):
            raise ValueError(f"patch edge {self.S} not divisible by 2^{self.levels}")
        if len(self.channels) != self.levels:
            raise ValueError(f"need {self.levels} channel sizes, got {self.channels}")

    @property
    def m(self) -> int:
        return self.S // (2 ** self.levels)

    @property
    def d_hid(self) -> int:
        return self.channels[-1]

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def paper_config(**overrides) -> DeskNetConfig:
    """Attention geometry as run at GPU scale: k=8, D=1024, 8 heads of 128."""
    base = dict(S=256, C=10, levels=5, channels=(32, 64, 128, 256, 512),
                k=8, D=1024, heads=8, d=128, pos_kind="sin1d")
    base.update(overrides)
    return DeskNetConfig(**base)


class DeskNet:
    """Encoder-decoder with optional neighbourhood-memory attention."""

    def __init__(self, cfg: DeskNetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        self._params = []

        def conv_param(cin, cout, ksize, name):
            # Kaiming-uniform: keeps activation scale through the ReLU stack
            lim = np.sqrt(6.0 / (cin * ksize * ksize))
            w = nd.param(rng.uniform(-lim, lim, (cout, cin, ksize, ksize)), dtype=dt, name=f"{name}.w")
            b = nd.param(np.zeros(cout), dtype=dt, name=f"{name}.b")
            self._params += [w, b]
            return w, b

        ch = cfg.channels
        # feat_i width: ch[i] for i < levels, bottleneck keeps ch[-1]
        widths = list(ch) + [ch[-1]]
        self.stem = conv_param(3, widths[0], 3, "enc0")
        self.enc = [
            conv_param(widths[i], widths[i + 1], 3, f"enc{i + 1}") for i in range(cfg.levels)
        ]
        self.dec = []
        x_w = widths[-1]
        for s in range(cfg.levels):
            skip_w = widths[cfg.levels - 1 - s]
            self.dec.append(conv_param(x_w + skip_w, skip_w, 3, f"dec{cfg.levels - 1 - s}"))
            x_w = skip_w
        self.head = conv_param(widths[0], cfg.C, 1, "head")

        self.maf_enabled = cfg.k > 0
        if self.maf_enabled:
            self.embed = EmbedParams.create(cfg.d_hid, cfg.D, rng, dtype=dt)
            self.mha = MHAParams.create(cfg.D, cfg.d, cfg.heads, rng, dtype=dt)
            self.pos = PositionEncoding.create(cfg.pos_kind, cfg.k, cfg.d, rng, dtype=dt)
            self.fusion = FuseParams.create(cfg.d_hid, cfg.D, dtype=dt)
            self.helper = HelperParams.create(cfg.D, cfg.C, rng, dtype=dt)
            self._params += (
                self.embed.parameters() + self.mha.parameters() + self.pos.parameters()
                + self.fusion.parameters() + self.helper.parameters()
            )
        else:
            self.embed = self.mha = self.pos = self.fusion = self.helper = None

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        return list(self._params)

    def backbone_parameter_count(self) -> int:
        maf = set()
        if self.maf_enabled:
            maf = {
                id(p)
                for p in (
                    self.embed.parameters() + self.mha.parameters() + self.pos.parameters()
                    + self.fusion.parameters() + self.helper.parameters()
                )
            }
        return sum(p.data.size for p in self._params if id(p) not in maf)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self._params)

    def named_parameters(self):
        return [(p.name, p.data) for p in self._params]

    def load_state(self, named: dict):
        for p in self._params:
            if p.name not in named:
                raise KeyError(f"snapshot missing parameter {p.name!r}")
            arr = named[p.name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(f"{p.name}: snapshot shape {arr.shape} vs model {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    # -- forward ------------------------------------------------------------

    def _check_patch(self, x: np.ndarray):
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (3, cfg.S, cfg.S):
            raise nd.ShapeError(f"patch batch {x.shape}, expected (N, 3, {cfg.S}, {cfg.S})")

    def encode(self, patches) -> list:
        """Feature maps [feat_0 .. feat_levels]; the last is the bottleneck."""
        x = patches if isinstance(patches, nd.Tensor) else nd.constant(patches, dtype=self.cfg.np_dtype)
        self._check_patch(x.data)
        feats = [nd.relu(nd.conv2d(x, *self.stem, stride=1, pad=1))]
        for w, b in self.enc:
            down = nd.maxpool2d(feats[-1])
            feats.append(nd.relu(nd.conv2d(down, w, b, stride=1, pad=1)))
        return feats

    def decode(self, feats: list) -> nd.Tensor:
        """Per-pixel class logits (N, C, S, S) from a full feature set."""
        x = feats[-1]
        for stage, (w, b) in enumerate(self.dec):
            skip = feats[self.cfg.levels - 1 - stage]
            up = nd.upsample_nearest(x, 2)
            x = nd.relu(nd.conv2d(nd.concat([up, skip], axis=1), w, b, stride=1, pad=1))
        return nd.conv2d(x, *self.head, stride=1, pad=0)

    def forward(self, patches) -> nd.Tensor:
        """Plain encoder-decoder prediction, no context."""
        return self.decode(self.encode(patches))

    def forward_maf_batch(self, patches, views):
        """Context-fused forward over a batch with per-sample memory views.

        Returns (seg logits (N,C,S,S), class-ratio predictions (N,C),
        attention scores (N, h, (2k+1)^2)).
        """
        cfg = self.cfg
        feats = self.encode(patches)
        n = feats[-1].shape[0]
        if not self.maf_enabled:
            logits = self.decode(feats)
            uniform = nd.constant(np.full((n, cfg.C), 1.0 / cfg.C), dtype=cfg.np_dtype)
            return logits, uniform, np.zeros((n, cfg.heads, 1), dtype=cfg.np_dtype)
        if len(views) != n:
            raise ValueError(f"{n} patches but {len(views)} memory views")
        e_all = embed_patch(feats[-1], self.embed)
        a_rows, scores = [], []
        for b, view in enumerate(views):
            out: AttentionOutput = mha_context(
                nd.slice_rows(e_all, b, b + 1), view, self.mha, self.pos
            )
            a_rows.append(out.a)
            scores.append(out.scores)
        a = nd.concat(a_rows, axis=0) if n > 1 else a_rows[0]
        fused = fuse_context(feats[-1], a, self.fusion)
        logits = self.decode(feats[:-1] + [fused])
        y_cls = helper_head(a, self.helper)
        return logits, y_cls, np.stack(scores)

    def forward_maf(self, patch, bank: MemoryBank, slide_id, i: int, j: int):
        """Two-step forward of one patch: retrieve its view, attend, decode."""
        x = np.asarray(patch)[None] if np.asarray(patch).ndim == 3 else np.asarray(patch)
        views = [bank.retrieve(slide_id, i, j)] if self.maf_enabled else [None]
        return self.forward_maf_batch(x, views)

    def embed_patches(self, patches) -> np.ndarray:
        """Gradient-free embeddings for the memory fill."""
        with nd.no_grad():
            feats = self.encode(patches)
            e = embed_patch(feats[-1], self.embed)
        return e.data
