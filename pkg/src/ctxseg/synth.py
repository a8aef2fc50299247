"""Procedural tiled slides whose ground truth is context-dependent.

Each slide is a patch grid partitioned into Voronoi macro-regions of
identity A or B. Classes:

* 0 stroma: bands along every region boundary, distinct fibrous texture
* 1 A-tissue and 2 B-tissue: rendered by the *same* code path with the
  same statistics, so they are locally indistinguishable by construction
* 3 marker: small dark blobs placed only inside A-region patches

A patch of bare tissue therefore cannot be classified alone; the marker
blobs (and their absence) in the surrounding patches carry the identity.
``texture_ambiguity`` certifies the A/B indistinguishability and
``context_cue_rate`` measures how often a disambiguating cue exists
within a given Chebyshev patch radius.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grid import SlideGrid

CLASS_NAMES = ("stroma", "tissue_a", "tissue_b", "marker")
N_CLASSES = 4


@dataclass(frozen=True)
class SynthParams:
    n_regions: int = 7
    marker_rate: float = 0.45  # per interior A-region patch
    stroma_halfwidth: int = 3  # px on each side of a region boundary
    noise_amp: float = 0.10
    pixel_noise: float = 0.02
    blob_radius: tuple = (3, 5)

    def validate(self):
        if self.n_regions < 1:
            raise ValueError(f"n_regions must be >= 1, got {self.n_regions}")
        if not 0.0 <= self.marker_rate <= 1.0:
            raise ValueError(f"marker_rate must be in [0, 1], got {self.marker_rate}")


@dataclass
class SynthSlide:
    slide_id: str
    S: int
    image: np.ndarray  # (n_y*S, n_x*S, 3) float32 in [0, 1]
    labels: np.ndarray  # (n_y*S, n_x*S) uint8 class ids
    regions: np.ndarray  # (n_x, n_y) int region id per patch

    @property
    def n_x(self) -> int:
        return self.regions.shape[0]

    @property
    def n_y(self) -> int:
        return self.regions.shape[1]

    def grid(self, ds: int = 1) -> SlideGrid:
        return SlideGrid(self.slide_id, self.n_x, self.n_y, self.S, N_CLASSES, ds)

    def patch_image(self, i: int, j: int) -> np.ndarray:
        """(3, S, S) float32 pixels of patch (i, j)."""
        s = self.S
        block = self.image[j * s : (j + 1) * s, i * s : (i + 1) * s]
        return np.ascontiguousarray(block.transpose(2, 0, 1))

    def patch_labels(self, i: int, j: int) -> np.ndarray:
        s = self.S
        return self.labels[j * s : (j + 1) * s, i * s : (i + 1) * s]


@dataclass
class PatchRecord:
    slide_id: str
    i: int
    j: int
    label_patch: np.ndarray  # (S, S) uint8
    C: int = N_CLASSES

    @property
    def y_seg(self) -> np.ndarray:
        """One-hot (S, S, C) segmentation target."""
        return np.eye(self.C, dtype=np.float32)[self.label_patch]

    @property
    def y_cls(self) -> np.ndarray:
        return class_ratio(self.label_patch, self.C)

    @property
    def predominant(self) -> int:
        return int(np.argmax(self.y_cls))  # argmax ties resolve to lowest id


def class_ratio(label_patch: np.ndarray, C: int = N_CLASSES) -> np.ndarray:
    """Normalized per-class pixel counts of one label patch."""
    counts = np.bincount(np.asarray(label_patch).reshape(-1), minlength=C).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _value_noise(rng, h, w, cell, octaves=3, persistence=0.5):
    """Smooth multi-octave lattice noise, zero-mean, unit-ish scale."""
    out = np.zeros((h, w))
    amp, c = 1.0, cell
    for _ in range(octaves):
        gh, gw = h // c + 2, w // c + 2
        lattice = rng.standard_normal((gh, gw))
        ys, xs = np.arange(h) / c, np.arange(w) / c
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
        g = (
            lattice[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + lattice[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
            + lattice[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
            + lattice[np.ix_(y0 + 1, x0 + 1)] * fy * fx
        )
        out += amp * g
        amp *= persistence
        c = max(2, c // 2)
    return out


_BASE_COLOR = np.array(
    [
        [0.93, 0.78, 0.86],  # stroma
        [0.56, 0.40, 0.66],  # tissue (A and B share this on purpose)
        [0.56, 0.40, 0.66],
        [0.32, 0.20, 0.10],  # marker
    ]
)


def generate_slide(seed: int, n_x: int, n_y: int, S: int, params: SynthParams, slide_id=None) -> SynthSlide:
    """Deterministically build one slide from a seed."""
    params.validate()
    rng = np.random.default_rng(seed)
    slide_id = slide_id or f"slide_{seed:04d}"
    H, W = n_y * S, n_x * S

    # Voronoi macro-regions on the patch grid
    n_regions = min(params.n_regions, n_x * n_y)
    seeds_xy = np.column_stack(
        [rng.uniform(0, n_x, n_regions), rng.uniform(0, n_y, n_regions)]
    )
    ii, jj = np.meshgrid(np.arange(n_x) + 0.5, np.arange(n_y) + 0.5, indexing="ij")
    d2 = (ii[..., None] - seeds_xy[:, 0]) ** 2 + (jj[..., None] - seeds_xy[:, 1]) ** 2
    regions = d2.argmin(axis=-1)  # (n_x, n_y)

    identity = rng.integers(0, 2, n_regions)  # 0 -> A, 1 -> B
    present = np.unique(regions)
    if n_regions >= 2 and len(np.unique(identity[present])) < 2:
        identity[present[0]] = 1 - identity[present[0]]

    # per-pixel labels: region tissue class, stroma bands, marker blobs
    labels = np.where(identity[regions] == 0, 1, 2).astype(np.uint8)
    labels = np.repeat(np.repeat(labels.T, S, axis=0), S, axis=1)  # (H, W)

    hw = params.stroma_halfwidth
    if hw > 0:
        for i in range(n_x - 1):  # vertical boundaries between (i, j) and (i+1, j)
            edge_x = (i + 1) * S
            diff = regions[i, :] != regions[i + 1, :]
            for j in np.nonzero(diff)[0]:
                labels[j * S : (j + 1) * S, edge_x - hw : edge_x + hw] = 0
        for j in range(n_y - 1):  # horizontal boundaries
            edge_y = (j + 1) * S
            diff = regions[:, j] != regions[:, j + 1]
            for i in np.nonzero(diff)[0]:
                labels[edge_y - hw : edge_y + hw, i * S : (i + 1) * S] = 0

    # markers go only to *interior* A patches (all existing neighbours share
    # the region), so a marker seen in a window almost always means the
    # window's own region is A
    interior = np.zeros((n_x, n_y), dtype=bool)
    for i in range(n_x):
        for j in range(n_y):
            r0 = regions[i, j]
            interior[i, j] = all(
                regions[i + di, j + dj] == r0
                for di in (-1, 0, 1)
                for dj in (-1, 0, 1)
                if 0 <= i + di < n_x and 0 <= j + dj < n_y
            )

    r_lo, r_hi = params.blob_radius
    yy_px, xx_px = np.mgrid[0:S, 0:S]
    for i in range(n_x):
        for j in range(n_y):
            if identity[regions[i, j]] != 0 or not interior[i, j]:
                continue
            if rng.random() >= params.marker_rate:
                continue
            block = labels[j * S : (j + 1) * S, i * S : (i + 1) * S]
            for _ in range(rng.integers(2, 4)):
                r = rng.integers(r_lo, r_hi + 1)
                cy = rng.integers(r + 1, S - r - 1)
                cx = rng.integers(r + 1, S - r - 1)
                disc = (yy_px - cy) ** 2 + (xx_px - cx) ** 2 <= r * r
                block[disc & (block == 1)] = 3  # only over own A tissue

    # render: one shared texture path; the tissue classes never branch
    img = _BASE_COLOR[labels].copy()
    lum = _value_noise(rng, H, W, cell=12, octaves=3) * params.noise_amp
    img += lum[..., None]
    stroma = labels == 0
    if stroma.any():
        yy_img, xx_img = np.nonzero(stroma)
        fibers = 0.06 * np.sin(0.9 * xx_img + 0.35 * yy_img + rng.uniform(0, 2 * np.pi))
        img[yy_img, xx_img, :] += fibers[:, None]
    marker = labels == 3
    if marker.any():
        img[marker] += rng.normal(0.0, 0.05, (int(marker.sum()), 1))
    img += rng.normal(0.0, params.pixel_noise, (H, W, 3))
    np.clip(img, 0.0, 1.0, out=img)

    return SynthSlide(slide_id, S, img.astype(np.float32), labels, regions)


def generate_dataset(seed: int, n_slides: int = 12, n_x: int = 16, n_y: int = 16,
                     S: int = 32, params: SynthParams | None = None):
    """Generate ``n_slides`` slides with per-slide RNG streams split from ``seed``."""
    params = params or SynthParams()
    children = np.random.SeedSequence(seed).spawn(n_slides)
    return [
        generate_slide(
            int(child.generate_state(1)[0]), n_x, n_y, S, params, slide_id=f"slide_{idx:03d}"
        )
        for idx, child in enumerate(children)
    ]


def default_splits(n_slides: int):
    """Deterministic train/val/test split by slide index (8/2/2 shape)."""
    n_val = max(1, n_slides // 6)
    n_test = max(1, n_slides // 6)
    n_train = n_slides - n_val - n_test
    ids = [f"slide_{i:03d}" for i in range(n_slides)]
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

def sample_patches(slides, cap_per_class: int, seed: int = 0):
    """At most ``cap_per_class`` patches per slide and class, keyed by the
    patch's predominant class; deterministic under the seed."""
    if cap_per_class < 1:
        raise ValueError(f"cap_per_class must be >= 1, got {cap_per_class}")
    rng = np.random.default_rng(seed)
    out = []
    for slide in slides:
        per_class = {c: [] for c in range(N_CLASSES)}
        for i in range(slide.n_x):
            for j in range(slide.n_y):
                rec = PatchRecord(slide.slide_id, i, j, slide.patch_labels(i, j))
                per_class[rec.predominant].append(rec)
        for c in range(N_CLASSES):
            cands = per_class[c]
            if len(cands) > cap_per_class:
                keep = rng.choice(len(cands), size=cap_per_class, replace=False)
                cands = [cands[t] for t in sorted(keep)]
            out.extend(cands)
    return out


# ---------------------------------------------------------------------------
# ambiguity / identifiability certificates
# ---------------------------------------------------------------------------

def texture_ambiguity(slides, n_samples: int = 10000, crop: int = 8, bins: int = 8,
                      seed: int = 0) -> float:
    """Accuracy of a histogram nearest-centroid classifier on pure A vs pure
    B texture crops; ~0.5 when the tissues are locally indistinguishable."""
    rng = np.random.default_rng(seed)
    per_class = n_samples // 2
    feats = {1: [], 2: []}
    max_tries = n_samples * 80
    tries = 0
    while (len(feats[1]) < per_class or len(feats[2]) < per_class) and tries < max_tries:
        tries += 1
        slide = slides[rng.integers(0, len(slides))]
        H, W = slide.labels.shape
        y = rng.integers(0, H - crop)
        x = rng.integers(0, W - crop)
        lab = slide.labels[y : y + crop, x : x + crop]
        c = lab[0, 0]
        if c not in (1, 2) or not (lab == c).all() or len(feats[int(c)]) >= per_class:
            continue
        patch = slide.image[y : y + crop, x : x + crop]
        hist = [np.histogram(patch[..., ch], bins=bins, range=(0, 1))[0] for ch in range(3)]
        feats[int(c)].append(np.concatenate(hist).astype(np.float64))
    if min(len(feats[1]), len(feats[2])) < 10:
        raise RuntimeError("could not sample enough pure-tissue crops")
    xa, xb = np.array(feats[1]), np.array(feats[2])
    half_a, half_b = len(xa) // 2, len(xb) // 2
    ca, cb = xa[:half_a].mean(axis=0), xb[:half_b].mean(axis=0)
    test = np.concatenate([xa[half_a:], xb[half_b:]])
    truth = np.concatenate([np.zeros(len(xa) - half_a), np.ones(len(xb) - half_b)])
    pred = (
        ((test - cb) ** 2).sum(axis=1) < ((test - ca) ** 2).sum(axis=1)
    ).astype(float)
    return float((pred == truth).mean())


def context_cue_rate(slides, radius: int = 2) -> float:
    """Fraction of pure-tissue patches with a marker or stroma cue within
    the given Chebyshev patch radius."""
    ambiguous = 0
    cued = 0
    for slide in slides:
        has_cue = np.zeros((slide.n_x, slide.n_y), dtype=bool)
        pure = np.zeros((slide.n_x, slide.n_y), dtype=bool)
        for i in range(slide.n_x):
            for j in range(slide.n_y):
                lab = slide.patch_labels(i, j)
                has_cue[i, j] = bool(((lab == 0) | (lab == 3)).any())
                pure[i, j] = bool(np.isin(lab, (1, 2)).all())
        for i in range(slide.n_x):
            for j in range(slide.n_y):
                if not pure[i, j]:
                    continue
                ambiguous += 1
                win = has_cue[
                    max(0, i - radius) : i + radius + 1, max(0, j - radius) : j + radius + 1
                ]
                cued += bool(win.any())
    return cued / ambiguous if ambiguous else 1.0


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

_MAGIC_IMAGE = b"VVIM"
_MAGIC_LABELS = b"VVLB"


def _write_image(path, image: np.ndarray):
    h, w, _ = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(_MAGIC_IMAGE)
        f.write(struct.pack("<II", h, w))
        f.write(data.tobytes())


def _read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC_IMAGE:
            raise ValueError(f"{path}: not an image file")
        h, w = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(h * w * 3), dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float32) / 255.0


def _write_labels(path, labels: np.ndarray):
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(_MAGIC_LABELS)
        f.write(struct.pack("<II", h, w))
        f.write(labels.astype(np.uint8).tobytes())


def _read_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC_LABELS:
            raise ValueError(f"{path}: not a label file")
        h, w = struct.unpack("<II", f.read(8))
        return np.frombuffer(f.read(h * w), dtype=np.uint8).reshape(h, w).copy()


def save_dataset(out_dir, slides, seed: int, params: SynthParams, splits=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": seed,
        "S": slides[0].S,
        "n_x": slides[0].n_x,
        "n_y": slides[0].n_y,
        "C": N_CLASSES,
        "class_names": list(CLASS_NAMES),
        "params": asdict(params),
        "slides": [s.slide_id for s in slides],
        "splits": splits or default_splits(len(slides)),
        "regions": {s.slide_id: s.regions.tolist() for s in slides},
    }
    for s in slides:
        d = out / s.slide_id
        d.mkdir(exist_ok=True)
        _write_image(d / "image.vvi", s.image)
        _write_labels(d / "labels.vvl", s.labels)
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return meta


def load_dataset(data_dir):
    """Read a dataset directory back into (slides, meta)."""
    root = Path(data_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{data_dir}: no meta.json (not a dataset directory)")
    meta = json.loads(meta_path.read_text())
    slides = []
    for sid in meta["slides"]:
        image = _read_image(root / sid / "image.vvi")
        labels = _read_labels(root / sid / "labels.vvl")
        regions = np.array(meta["regions"][sid])
        slides.append(SynthSlide(sid, meta["S"], image, labels, regions))
    return slides, meta
