"""Losses: batch-hard triplet, keypoint heatmaps and the localization term."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BatchError, DataError, ParamError, ShapeError
from .tensor import Value

REGIONS = ("neck", "hip", "ankle")
DEFAULT_HEATMAP_DIMS = (8, 4)
DEFAULT_SIGMA_H = 1.5
DEFAULT_MARGIN = 0.2
DEFAULT_LAMBDA = 0.2

# Which keypoints define each region; two-sided regions are fused by max.
REGION_KEYPOINTS = {
    "neck": ("neck",),
    "hip": ("right_hip", "left_hip"),
    "ankle": ("right_ankle", "left_ankle"),
}


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # [h_k, w_k], row = y, column = x
    region: str
    sigma_h: float

    @property
    def dims(self):
        return self.grid.shape

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.grid:
            w.writerow([f"{v:.6f}" for v in row])
        return buf.getvalue()


def make_heatmap(keypoint, sigma_h: float = DEFAULT_SIGMA_H, dims=DEFAULT_HEATMAP_DIMS, region: str = "neck") -> Heatmap:
    """``H(x, y) = 1 - exp(-((x - kx)^2 + (y - ky)^2) / sigma_h^2)``.

    ``keypoint`` is ``(x, y)`` in grid-cell coordinates (cell centres are
    integers).  A keypoint slightly outside the grid is clamped onto it.
    """
    if not sigma_h > 0:
        raise ParamError(f"sigma_h must be positive, got {sigma_h}")
    h, w = int(dims[0]), int(dims[1])
    if h < 1 or w < 1:
        raise ShapeError(f"bad heatmap dims {dims}")
    kx = min(max(float(keypoint[0]), 0.0), w - 1.0)
    ky = min(max(float(keypoint[1]), 0.0), h - 1.0)
    ys, xs = np.mgrid[0:h, 0:w]
    d2 = (xs - kx) ** 2 + (ys - ky) ** 2
    return Heatmap(1.0 - np.exp(-d2 / sigma_h**2), region, float(sigma_h))


def fuse_bilateral(left: Heatmap, right: Heatmap) -> Heatmap:
    if left.dims != right.dims:
        raise ShapeError(f"heatmap dims differ: {left.dims} vs {right.dims}")
    if left.region != right.region:
        raise ParamError(f"cannot fuse {left.region} with {right.region}")
    return Heatmap(np.maximum(left.grid, right.grid), left.region, left.sigma_h)


def image_to_grid(point, image_hw, dims=DEFAULT_HEATMAP_DIMS):
    """Map an image-pixel ``(x, y)`` to grid-cell coordinates (half-pixel centres)."""
    ih, iw = image_hw
    h, w = dims
    return ((point[0] + 0.5) * w / iw - 0.5, (point[1] + 0.5) * h / ih - 0.5)


def region_heatmap(points: dict, region: str, image_hw, sigma_h=DEFAULT_SIGMA_H, dims=DEFAULT_HEATMAP_DIMS) -> Heatmap:
    """Heatmap for ``region`` from named image-space points ``{name: (x, y)}``."""
    names = REGION_KEYPOINTS[region]
    missing = [n for n in names if n not in points]
    if missing:
        raise DataError(f"region {region} needs keypoints {missing}")
    maps = [make_heatmap(image_to_grid(points[n], image_hw, dims), sigma_h, dims, region) for n in names]
    out = maps[0]
    for m in maps[1:]:
        out = fuse_bilateral(out, m)
    return out


# ------------------------------------------------------------- localization

def normalize_activation(alpha, dims=None) -> Value:
    """Channel-average then min-max normalise each map to [0, 1].

    ``alpha`` is ``[h, w, c]`` or batched ``[N, h, w, c]``.  With ``dims`` the
    channel mean is bilinearly resized first.  A constant map has nothing to
    normalise and comes back as zeros.
    """
    alpha = T.as_value(alpha)
    single = alpha.ndim == 3
    if single:
        alpha = T.reshape(alpha, (1,) + alpha.shape)
    if alpha.ndim != 4 or alpha.shape[-1] < 1:
        raise ShapeError(f"expected [N, h, w, c] activations, got {alpha.shape}")
    avg = T.mean(alpha, axis=3)
    if dims is not None:
        avg = T.bilinear_resize(avg, dims)
    n, h, w = avg.shape
    flat = T.reshape(avg, (n, h * w))
    beta = T.sub(flat, T.amin(flat, axis=1, keepdims=True))
    top = T.amax(beta, axis=1, keepdims=True)
    flat_guard = (top.data < 1e-12).astype(np.float64)
    # degenerate rows: divide by 1 and multiply by 0, so value and grad are 0
    norm = T.mul(T.div(beta, T.add(top, flat_guard)), 1.0 - flat_guard)
    out = T.reshape(norm, (n, h, w))
    return T.reshape(out, (h, w)) if single else out


def localization_loss(alpha, heatmaps) -> Value:
    """Sum over images and cells of normalised activation times heatmap.

    ``alpha`` is ``[N, h, w, c]``; ``heatmaps`` holds one :class:`Heatmap`
    (or grid array) per image.  Activations are resized to the heatmap grid
    when the dims differ.
    """
    alpha = T.as_value(alpha)
    n = alpha.shape[0]
    heatmaps = list(heatmaps)
    if len(heatmaps) != n or any(hm is None for hm in heatmaps):
        raise DataError(f"need a heatmap for each of the {n} images")
    grids = np.stack([hm.grid if isinstance(hm, Heatmap) else np.asarray(hm, dtype=np.float64) for hm in heatmaps])
    norm = normalize_activation(alpha, dims=grids.shape[1:])
    return T.vsum(T.mul(norm, grids))


# ------------------------------------------------------------------ triplet

def _check_batch(labels):
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise BatchError("batch-hard triplet loss needs at least 2 identities")
    if counts.min() < 2:
        raise BatchError(f"identity {ids[counts.argmin()]} has fewer than 2 samples in the batch")
    return labels


def batch_hard_terms(embeddings, labels, margin: float = DEFAULT_MARGIN) -> Value:
    """Per-anchor hinge terms ``max(margin + hardest_pos - hardest_neg, 0)``."""
    labels = _check_batch(labels)
    e = T.as_value(embeddings)
    if e.ndim != 2 or e.shape[0] != len(labels):
        raise ShapeError(f"embeddings {e.shape} vs {len(labels)} labels")
    dist = T.pairwise_l1(e)
    same = labels[:, None] == labels[None, :]
    rho = T.masked_max(dist, same, axis=1)
    nu = T.masked_min(dist, ~same, axis=1)
    return T.relu(T.sub(T.add(margin, rho), nu))


def triplet_loss_batch_hard(embeddings, labels, margin: float = DEFAULT_MARGIN) -> Value:
    """Batch-hard triplet loss with L1 distance, summed over anchors."""
    return T.vsum(batch_hard_terms(embeddings, labels, margin))


@dataclass
class LossBreakdown:
    triplet: float
    localization: dict = field(default_factory=dict)  # region -> value
    total: float = 0.0


def combined_loss(triplet, localization_terms, lam: float = DEFAULT_LAMBDA):
    """Return ``(total Value, LossBreakdown)`` with ``total = L_T + lam * sum(L_k)``.

    ``localization_terms`` maps region name to a scalar Value (or float).
    """
    if lam < 0:
        raise ParamError(f"lambda must be >= 0, got {lam}")
    triplet = T.as_value(triplet)
    total = triplet
    if localization_terms:
        loc_sum = None
        for v in localization_terms.values():
            v = T.as_value(v)
            loc_sum = v if loc_sum is None else T.add(loc_sum, v)
        total = T.add(triplet, T.mul(loc_sum, lam))
    breakdown = LossBreakdown(
        triplet=float(triplet.data),
        localization={k: float(T.as_value(v).data) for k, v in (localization_terms or {}).items()},
        total=float(total.data),
    )
    return total, breakdown


def low_region_mass(norm_maps: np.ndarray, grids: np.ndarray, threshold: float = 0.5) -> float:
    """Mean fraction of normalised activation mass on cells with ``H < threshold``."""
    inside = grids < threshold
    total = norm_maps.sum(axis=(1, 2))
    hit = (norm_maps * inside).sum(axis=(1, 2))
    ok = total > 0
    if not ok.any():
        return 0.0
    return float(np.mean(hit[ok] / total[ok]))
