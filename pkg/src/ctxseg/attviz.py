"""Attention-map characterization: moment fits, confidence ellipses, views.

Per centre patch the head-averaged attention weights over the offset grid
are treated as an empirical bivariate distribution. Its mean is the
attention focus (centre shift), its covariance the reach; the 90%
confidence ellipse has half-axes sqrt(eigenvalue * chi2_0.9(2)) along the
eigenvectors. The aggregated slide view draws one miniature ellipse per
patch, red where its area exceeds the slide mean (long reach), blue below
(close reach), with an arrow for the centre shift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AttentionMap:
    """Head-averaged scores on the (2k+1)x(2k+1) offset grid, centre (0,0)."""

    grid: np.ndarray

    @property
    def k(self) -> int:
        return (self.grid.shape[0] - 1) // 2

    def offsets(self):
        k = self.k
        x, y = np.meshgrid(np.arange(-k, k + 1), np.arange(-k, k + 1), indexing="ij")
        return x, y


@dataclass
class EllipseFit:
    mu: np.ndarray  # (2,) mean offset
    sigma: np.ndarray  # (2, 2) covariance (regularized)
    axes: np.ndarray  # (2, 2) unit eigenvectors as columns
    half_lengths: np.ndarray  # (2,)
    area: float


def head_average(scores: np.ndarray) -> AttentionMap:
    """Mean over heads of (h, (2k+1)^2) weights, reshaped to the offset grid."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"head_average: scores shape {scores.shape}, want (h, n)")
    n = scores.shape[1]
    side = int(round(math.sqrt(n)))
    if side * side != n or side % 2 == 0:
        raise ValueError(f"head_average: {n} slots is not an odd square window")
    return AttentionMap(scores.mean(axis=0).reshape(side, side))


def chi2_quantile_2dof(alpha: float) -> float:
    """Chi-square quantile with 2 dof: -2 ln(1 - alpha)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return -2.0 * math.log(1.0 - alpha)


SIGMA_REG = 1e-6
CHI2_90 = chi2_quantile_2dof(0.9)


def fit_gaussian(att_map: AttentionMap, alpha: float = 0.9) -> EllipseFit:
    """Moment fit of the score distribution plus its confidence ellipse."""
    w = np.asarray(att_map.grid, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("fit_gaussian: all-zero attention map (no attended neighbours)")
    w = w / total
    x, y = att_map.offsets()
    mu = np.array([(w * x).sum(), (w * y).sum()])
    dx, dy = x - mu[0], y - mu[1]
    sigma = np.array(
        [
            [(w * dx * dx).sum(), (w * dx * dy).sum()],
            [(w * dx * dy).sum(), (w * dy * dy).sum()],
        ]
    ) + SIGMA_REG * np.eye(2)
    evals, evecs = np.linalg.eigh(sigma)
    c = chi2_quantile_2dof(alpha)
    half = np.sqrt(np.maximum(evals, 0.0) * c)
    area = math.pi * math.sqrt(max(np.linalg.det(sigma), 0.0)) * c
    return EllipseFit(mu=mu, sigma=sigma, axes=evecs, half_lengths=half, area=area)


def write_fits_csv(path, fits):
    """fits: iterable of (slide_id, i, j, EllipseFit)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["slide", "i", "j", "mu_x", "mu_y", "sigma_xx", "sigma_xy", "sigma_yy", "area"])
        for sid, i, j, fit in fits:
            w.writerow(
                [sid, i, j, f"{fit.mu[0]:.6f}", f"{fit.mu[1]:.6f}",
                 f"{fit.sigma[0, 0]:.6f}", f"{fit.sigma[0, 1]:.6f}",
                 f"{fit.sigma[1, 1]:.6f}", f"{fit.area:.6f}"]
            )


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

_CLASS_FILL = ("#f2c9dd", "#9b6fb8", "#6fb89b", "#4a3018", "#b8b8b8", "#d0d0d0")


def _dev_color(area: float, mean_area: float) -> str:
    """Blue below the mean area, red above, neutral grey at the mean;
    the ramp saturates at a deviation of twice the mean."""
    if mean_area <= 0:
        t = 0.0
    else:
        t = max(-1.0, min(1.0, (area - mean_area) / (2.0 * mean_area)))
    if t >= 0:
        r, g, b = 230, int(220 * (1 - t)), int(220 * (1 - t))
    else:
        r, g, b = int(220 * (1 + t)), int(220 * (1 + t)), 230
    return f"rgb({r},{g},{b})"


def render_attention_view(pred_labels: np.ndarray, fits, S: int, out_path,
                          cell_px: float = 24.0):
    """Aggregated slide view: per-patch class tint, ellipse and shift arrow.

    ``pred_labels`` is the slide's predicted per-pixel label map, drawn at
    patch granularity (majority class per patch) under the ellipses.
    ``fits`` maps (i, j) -> EllipseFit.
    """
    H, W = pred_labels.shape
    n_y, n_x = H // S, W // S
    mean_area = float(np.mean([f.area for f in fits.values()])) if fits else 0.0
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{n_x * cell_px:.0f}" '
        f'height="{n_y * cell_px:.0f}" viewBox="0 0 {n_x * cell_px} {n_y * cell_px}">'
    ]
    for j in range(n_y):
        for i in range(n_x):
            block = pred_labels[j * S : (j + 1) * S, i * S : (i + 1) * S]
            major = int(np.bincount(block.reshape(-1)).argmax())
            fill = _CLASS_FILL[major % len(_CLASS_FILL)]
            out.append(
                f'<rect x="{i * cell_px:.1f}" y="{j * cell_px:.1f}" '
                f'width="{cell_px:.1f}" height="{cell_px:.1f}" fill="{fill}" fill-opacity="0.45"/>'
            )
    scale = cell_px / 6.0  # one grid offset -> cell_px/6 px, keeps miniatures local
    for (i, j), fit in sorted(fits.items()):
        cx = (i + 0.5) * cell_px
        cy = (j + 0.5) * cell_px
        angle = math.degrees(math.atan2(fit.axes[1, 0], fit.axes[0, 0]))
        rx = max(fit.half_lengths[0] * scale, 0.5)
        ry = max(fit.half_lengths[1] * scale, 0.5)
        color = _dev_color(fit.area, mean_area)
        out.append(
            f'<ellipse cx="{cx:.1f}" cy="{cy:.1f}" rx="{rx:.2f}" ry="{ry:.2f}" '
            f'transform="rotate({angle:.1f} {cx:.1f} {cy:.1f})" '
            f'fill="{color}" fill-opacity="0.85" stroke="#333" stroke-width="0.4"/>'
        )
        tip_x = cx + fit.mu[0] * scale
        tip_y = cy + fit.mu[1] * scale
        out.append(
            f'<line x1="{cx:.1f}" y1="{cy:.1f}" x2="{tip_x:.2f}" y2="{tip_y:.2f}" '
            f'stroke="#000" stroke-width="0.6"/>'
        )
    out.append("</svg>")
    with open(out_path, "w") as f:
        f.write("\n".join(out))


def render_patch_heatmap(att_map: AttentionMap, out_path, cell_px: float = 28.0):
    """Single-patch view: neighbourhood cells shaded by relative attention."""
    side = att_map.grid.shape[0]
    k = att_map.k
    peak = float(att_map.grid.max())
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{side * cell_px:.0f}" '
        f'height="{side * cell_px:.0f}" viewBox="0 0 {side * cell_px} {side * cell_px}">'
    ]
    for xi in range(side):
        for yi in range(side):
            rel = float(att_map.grid[xi, yi]) / peak if peak > 0 else 0.0
            shade = int(255 * (1.0 - 0.85 * rel))
            out.append(
                f'<rect x="{xi * cell_px:.1f}" y="{yi * cell_px:.1f}" width="{cell_px:.1f}" '
                f'height="{cell_px:.1f}" fill="rgb(255,{shade},{shade})" stroke="#999" stroke-width="0.5"/>'
            )
    cx = (k + 0.5) * cell_px
    out.append(
        f'<rect x="{k * cell_px:.1f}" y="{k * cell_px:.1f}" width="{cell_px:.1f}" '
        f'height="{cell_px:.1f}" fill="none" stroke="#c9a227" stroke-width="2"/>'
    )
    out.append(f'<circle cx="{cx:.1f}" cy="{cx:.1f}" r="2" fill="#c9a227"/>')
    out.append("</svg>")
    with open(out_path, "w") as f:
        f.write("\n".join(out))
