"""Two-phase epoch protocol: gradient-free memory fill, then training.

Each epoch first refreshes every slide's embeddings in the bank with the
current weights (recording off), then iterates shuffled mini-batches that
only *read* the bank. Backward updates the network weights, never the
stored embeddings; those catch up at the next epoch's fill. Validation
runs the same two-phase forward on its own bank without updates, drives
the exponential learning-rate decay bookkeeping and early stopping, and
the best-validation parameters are what the fit returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndiff as nd
from .fuse import combined_loss
from .grid import MemoryBank, build_memory
from .metrics import evaluate_predictions
from .segnet import DeskNet, DeskNetConfig
from .synth import sample_patches

FILL_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    beta: float = 0.95  # exponential lr decay per epoch
    batch_size: int = 16
    max_epochs: int = 40
    patience: int = 10
    lam: float = 0.2
    cap_per_class: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError(f"patience {self.patience} > max_epochs {self.max_epochs}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.beta ** epoch


def paper_train_config(**overrides) -> TrainConfig:
    """Optimization constants as run at GPU scale (pretrained encoders)."""
    base = dict(lr0=1e-4, momentum=0.9, beta=0.95, batch_size=32,
                max_epochs=100, patience=10, lam=0.2, cap_per_class=100)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# phase 1: memory fill
# ---------------------------------------------------------------------------

def epoch_memory_fill(model: DeskNet, slides, bank: MemoryBank):
    """Embed every patch of every slide with frozen weights and insert."""
    if not model.maf_enabled:
        return
    D = model.cfg.D
    for slide in sorted(slides, key=lambda s: s.slide_id):
        coords = [(i, j) for i in range(slide.n_x) for j in range(slide.n_y)]
        grid_emb = np.empty((slide.n_x, slide.n_y, D), dtype=np.float32)
        for lo in range(0, len(coords), FILL_BATCH):
            chunk = coords[lo : lo + FILL_BATCH]
            x = np.stack([slide.patch_image(i, j) for i, j in chunk])
            emb = model.embed_patches(x.astype(model.cfg.np_dtype))
            for (i, j), e in zip(chunk, emb):
                grid_emb[i, j] = e
        bank.insert_all(slide.slide_id, grid_emb)


# ---------------------------------------------------------------------------
# phase 2: batched two-step forward
# ---------------------------------------------------------------------------

def _batch_arrays(records, slides_by_id, dtype):
    x = np.stack([slides_by_id[r.slide_id].patch_image(r.i, r.j) for r in records])
    t = np.stack([r.label_patch for r in records])
    y_cls = np.stack([r.y_cls for r in records])
    return x.astype(dtype), t, y_cls.astype(dtype)


def _batch_loss(model, bank, records, slides_by_id, lam):
    x, t, y_cls = _batch_arrays(records, slides_by_id, model.cfg.np_dtype)
    views = None
    if model.maf_enabled:
        views = [bank.retrieve(r.slide_id, r.i, r.j) for r in records]
    logits, y_cls_pred, _ = model.forward_maf_batch(x, views)
    l_seg = nd.cross_entropy_pixels(logits, t)
    l_cls = nd.cross_entropy_dist(y_cls_pred, nd.constant(y_cls, dtype=model.cfg.np_dtype))
    return combined_loss(l_seg, l_cls, lam)


def train_epoch(model: DeskNet, bank: MemoryBank, samples, slides_by_id,
                cfg: TrainConfig, opt: nd.SGD, lr: float, shuffle_rng) -> float:
    """One pass of shuffled mini-batches; returns the mean combined loss."""
    order = shuffle_rng.permutation(len(samples))
    total, nb = 0.0, 0
    for lo in range(0, len(order), cfg.batch_size):
        batch = [samples[t] for t in order[lo : lo + cfg.batch_size]]
        loss = _batch_loss(model, bank, batch, slides_by_id, cfg.lam)
        nd.backward(loss, model.parameters())
        opt.step(lr=lr)
        total += float(loss.data)
        nb += 1
    return total / max(nb, 1)


def _mean_loss(model, bank, samples, slides_by_id, cfg) -> float:
    total, nb = 0.0, 0
    for lo in range(0, len(samples), cfg.batch_size):
        batch = samples[lo : lo + cfg.batch_size]
        with nd.no_grad():
            loss = _batch_loss(model, bank, batch, slides_by_id, cfg.lam)
        total += float(loss.data)
        nb += 1
    return total / max(nb, 1)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def fit(train_slides, val_slides, net_cfg: DeskNetConfig, cfg: TrainConfig,
        model: DeskNet | None = None, log=None):
    """Train with per-epoch memory refresh and early stopping.

    Returns (model restored to its best-validation parameters, history),
    history being one record per epoch run.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = model or DeskNet(net_cfg, seed=int(seeds[0].generate_state(1)[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    sample_seed = int(seeds[2].generate_state(1)[0])

    slides_by_id = {s.slide_id: s for s in list(train_slides) + list(val_slides)}
    train_samples = sample_patches(train_slides, cfg.cap_per_class, seed=sample_seed)
    val_samples = sample_patches(val_slides, cfg.cap_per_class, seed=sample_seed + 1)

    train_bank = build_memory([s.grid() for s in train_slides], net_cfg.k, net_cfg.D)
    val_bank = build_memory([s.grid() for s in val_slides], net_cfg.k, net_cfg.D)
    opt = nd.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum)

    history = []
    best_val = math.inf
    best_epoch = -1
    best_state = None
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        epoch_memory_fill(model, train_slides, train_bank)
        train_loss = train_epoch(
            model, train_bank, train_samples, slides_by_id, cfg, opt, lr, shuffle_rng
        )
        epoch_memory_fill(model, val_slides, val_bank)
        val_loss = _mean_loss(model, val_bank, val_samples, slides_by_id, cfg)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if log:
            log(history[-1])
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = [p.data.copy() for p in model.parameters()]
        if epoch - best_epoch > cfg.patience:
            break
    if best_state is not None:
        for p, data in zip(model.parameters(), best_state):
            p.data = data
    return model, history


def evaluate_full(model: DeskNet, slides, batch: int = FILL_BATCH):
    """Predict every patch of every slide with the two-phase protocol.

    Returns (DiceReport, {slide_id: predicted label map}).
    """
    bank = build_memory([s.grid() for s in slides], model.cfg.k, model.cfg.D)
    epoch_memory_fill(model, slides, bank)
    preds = {}
    for slide in sorted(slides, key=lambda s: s.slide_id):
        S = slide.S
        out = np.zeros((slide.n_y * S, slide.n_x * S), dtype=np.uint8)
        coords = [(i, j) for i in range(slide.n_x) for j in range(slide.n_y)]
        for lo in range(0, len(coords), batch):
            chunk = coords[lo : lo + batch]
            x = np.stack([slide.patch_image(i, j) for i, j in chunk]).astype(model.cfg.np_dtype)
            views = None
            if model.maf_enabled:
                views = [bank.retrieve(slide.slide_id, i, j) for i, j in chunk]
            with nd.no_grad():
                logits, _, _ = model.forward_maf_batch(x, views)
            labels = logits.data.argmax(axis=1).astype(np.uint8)
            for (i, j), lab in zip(chunk, labels):
                out[j * S : (j + 1) * S, i * S : (i + 1) * S] = lab
        preds[slide.slide_id] = out
    gts = {s.slide_id: s.labels for s in slides}
    report = evaluate_predictions(preds, gts, model.cfg.C)
    return report, preds
