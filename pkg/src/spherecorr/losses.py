"""Training objectives: feature reconstruction through the prototype,
viewpoint alignment, triplet relative-distance, and triplet orientation,
plus the weighted combination and foreground triplet sampling.

All loss functions return scalar graph tensors built from autodiff ops, so
one reverse pass yields the exact analytic gradient of the weighted total.
Sphere maps are passed flattened as (H*W, 3) tensors with unit rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .geometry import DEGENERATE_EPS, image_determinant_batch

Array = np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """Weights and thresholds of the combined objective."""

    lambda_rd: float = 0.3
    lambda_o: float = 0.3
    lambda_vp: float = 0.1
    margin: float = 0.5
    det_threshold: float = 0.7

    def __post_init__(self):
        vals = (self.lambda_rd, self.lambda_o, self.lambda_vp,
                self.margin, self.det_threshold)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights and thresholds must be >= 0")


class Triplet(NamedTuple):
    """Three distinct foreground pixels, roles fixed by distance to anchor.

    Pixels are (column, row) integer pairs; the positive is the non-anchor
    point closer to the anchor in the image.
    """

    anchor: tuple[int, int]
    positive: tuple[int, int]
    negative: tuple[int, int]


class OrientationResult(NamedTuple):
    loss: Tensor
    contributing: int
    degenerate: int


def sample_triplets(mask: Array, count: int, rng: np.random.Generator) -> list[Triplet]:
    """Sample triplets of distinct foreground pixels with assigned roles."""
    fg = np.argwhere(np.asarray(mask).astype(bool))  # rows of (row, col)
    if fg.shape[0] < 3:
        raise ValueError(f"need >= 3 foreground pixels, found {fg.shape[0]}")
    triplets = []
    for _ in range(count):
        ia, ib, ic = rng.choice(fg.shape[0], size=3, replace=False)
        a, b, c = fg[ia], fg[ib], fg[ic]
        d_ab = np.hypot(*(b - a))
        d_ac = np.hypot(*(c - a))
        pos, neg = (b, c) if d_ab <= d_ac else (c, b)
        triplets.append(Triplet(
            anchor=(int(a[1]), int(a[0])),
            positive=(int(pos[1]), int(pos[0])),
            negative=(int(neg[1]), int(neg[0])),
        ))
    return triplets


def _flat_indices(points: list[tuple[int, int]], width: int) -> Array:
    return np.array([row * width + col for col, row in points], dtype=np.intp)


def reconstruction_loss(
    features: Array,
    sphere_map: Tensor,
    cfg: models.ModelConfig,
    proto: models.PrototypeParams,
    mask: Array,
    category: str,
) -> Tensor:
    """Mean masked cosine distance between features and prototype lookups.

    The sum runs over foreground pixels but is normalized by the full pixel
    count of the grid.
    """
    feats = np.asarray(features, dtype=np.float64)
    h, w, c = feats.shape
    flat = feats.reshape(-1, c)
    sel = np.asarray(mask).astype(bool).reshape(-1)
    if not sel.any():
        raise ValueError("reconstruction_loss: empty mask")
    if sphere_map.value.shape[0] != h * w:
        raise ValueError("sphere map and feature grid sizes disagree")
    fg_idx = np.flatnonzero(sel)
    phi = flat[fg_idx]
    norms = np.linalg.norm(phi, axis=1, keepdims=True)
    if np.any(norms < 1e-15):
        raise ValueError("reconstruction_loss: zero-norm feature vector")
    phi_unit = phi / norms
    points = ad.gather_rows(sphere_map, fg_idx)
    recon = models.prototype_query(cfg, proto, points, category)
    cos = ad.row_dot(ad.l2_normalize_rows(recon), phi_unit)
    gamma = ad.sub(1.0, cos)
    return ad.scale(ad.tsum(gamma), 1.0 / (h * w))


def masked_mean_direction(sphere_map: Tensor, mask: Array) -> Tensor:
    """Differentiable mean direction over foreground pixels -> (3,)."""
    sel = np.flatnonzero(np.asarray(mask).astype(bool).reshape(-1))
    if sel.size == 0:
        raise ValueError("masked_mean_direction: empty mask")
    return ad.tmean(ad.gather_rows(sphere_map, sel), axis=0)


def viewpoint_loss(entries: list[tuple[Tensor, Array, Array]]) -> Tensor:
    """Match pairwise viewpoint dot products with mean-direction dot products.

    ``entries`` holds (sphere_map, mask, viewpoint_vector) per image; the sum
    over distinct unordered pairs is normalized by the pair count.
    """
    if len(entries) < 2:
        raise ValueError("viewpoint_loss needs at least 2 images")
    mus = [masked_mean_direction(m, mask) for m, mask, _ in entries]
    views = [np.asarray(v, dtype=np.float64) for _, _, v in entries]
    total: Tensor | None = None
    n_pairs = 0
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            target = float(views[i] @ views[j])
            diff = ad.sub(ad.dot(mus[i], mus[j]), target)
            term = ad.mul(diff, diff)
            total = term if total is None else ad.add(total, term)
            n_pairs += 1
    return ad.scale(total, 1.0 / n_pairs)


def relative_distance_loss(triplets: list[Triplet], sphere_map: Tensor,
                           width: int, margin: float) -> Tensor:
    """Triplet margin loss on sphere cosine distances, meaned over triplets."""
    if not triplets:
        raise ValueError("relative_distance_loss: no triplets")
    a = ad.gather_rows(sphere_map, _flat_indices([t.anchor for t in triplets], width))
    p = ad.gather_rows(sphere_map, _flat_indices([t.positive for t in triplets], width))
    n = ad.gather_rows(sphere_map, _flat_indices([t.negative for t in triplets], width))
    # rows are unit vectors, so the cosine distance is 1 - <.,.>; the two
    # constant 1s cancel in the difference
    gap = ad.sub(ad.row_dot(a, n), ad.row_dot(a, p))
    return ad.tmean(ad.relu(ad.add(gap, margin)))


def orientation_loss(triplets: list[Triplet], sphere_map: Tensor,
                     width: int, det_threshold: float) -> OrientationResult:
    """Hinge on the sphere-triplet orientation determinant.

    Triplets are screened on the image side first: b and c are swapped when
    the image determinant is negative, and only triplets with determinant at
    least the threshold contribute. Degenerate sphere triplets (no usable
    tangent frame at the anchor) are skipped and counted. The value is the
    mean over contributing triplets, or 0 when none contribute.
    """
    if not triplets:
        raise ValueError("orientation_loss: no triplets")
    a_px = np.array([t.anchor for t in triplets], dtype=np.float64)
    b_px = np.array([t.positive for t in triplets], dtype=np.float64)
    c_px = np.array([t.negative for t in triplets], dtype=np.float64)
    d_img = image_determinant_batch(a_px, b_px, c_px)
    swap = d_img < 0
    b_px[swap], c_px[swap] = c_px[swap], b_px[swap].copy()
    gated = np.abs(d_img) >= det_threshold
    if not gated.any():
        return OrientationResult(Tensor(0.0), 0, 0)

    a_idx = _flat_indices([(int(c), int(r)) for c, r in a_px[gated]], width)
    b_idx = _flat_indices([(int(c), int(r)) for c, r in b_px[gated]], width)
    c_idx = _flat_indices([(int(c), int(r)) for c, r in c_px[gated]], width)
    s_a = ad.gather_rows(sphere_map, a_idx)
    s_b = ad.gather_rows(sphere_map, b_idx)
    s_c = ad.gather_rows(sphere_map, c_idx)

    def tangent(s_x):
        coef = ad.reshape(ad.row_dot(s_a, s_x), (-1, 1))
        return ad.sub(s_x, ad.mul(coef, s_a))

    u_b = tangent(s_b)
    u_c = tangent(s_c)
    ok = (np.linalg.norm(u_b.value, axis=1) >= DEGENERATE_EPS) & (
        np.linalg.norm(u_c.value, axis=1) >= DEGENERATE_EPS
    )
    degenerate = int((~ok).sum())
    if not ok.any():
        return OrientationResult(Tensor(0.0), 0, degenerate)
    keep = np.flatnonzero(ok)
    d_s = ad.row_dot(
        ad.cross_rows(
            ad.l2_normalize_rows(ad.gather_rows(u_b, keep)),
            ad.l2_normalize_rows(ad.gather_rows(u_c, keep)),
        ),
        ad.gather_rows(s_a, keep),
    )
    value = ad.tmean(ad.relu(ad.sub(det_threshold, d_s)))
    return OrientationResult(value, int(keep.size), degenerate)


def total_loss(rec: Tensor, rd: Tensor, orient: Tensor, vp: Tensor,
               weights: LossWeights) -> Tensor:
    """Weighted sum of the four components."""
    for name, t in (("rec", rec), ("rd", rd), ("o", orient), ("vp", vp)):
        if not np.all(np.isfinite(t.value)):
            raise FloatingPointError(f"non-finite loss component {name}")
    out = rec
    out = ad.add(out, ad.scale(rd, weights.lambda_rd))
    out = ad.add(out, ad.scale(orient, weights.lambda_o))
    out = ad.add(out, ad.scale(vp, weights.lambda_vp))
    return out
