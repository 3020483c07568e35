"""Correspondence inference on top of feature maps and sphere maps.

A query pixel in the source image is matched to the target pixel minimizing
a convex blend of feature cosine distance and sphere cosine distance; the
blend weight alpha = 0 reduces to pure feature nearest neighbor and
alpha = 1 to sphere-only matching. Internally everything is scored as
similarities (1 - distance) so a dense volume's argmax is the match, with
argmax ties resolved to the first pixel in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class MatchQuery:
    source_id: str
    pixel: tuple[int, int]  # (col, row)
    target_id: str


@dataclass
class SimilarityVolume:
    """Dense target-grid scores for one query, plus its two ingredients."""

    scores: Array  # (H, W) combined similarity
    feature_term: Array  # (H, W) feature cosine similarity
    sphere_term: Array  # (H, W) sphere cosine similarity
    alpha: float
    query: tuple[int, int]

    def argmax_pixel(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.scores)), self.scores.shape)
        return (int(c), int(r))


def _unit_rows(x: Array, label: str) -> Array:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-15):
        raise ValueError(f"{label}: zero-norm vector")
    return x / norms


def resample_sphere_map(sphere_map: Array, height: int, width: int) -> Array:
    """Bilinearly resample a sphere map to a new grid and renormalize."""
    src = np.asarray(sphere_map, dtype=np.float64)
    h0, w0, _ = src.shape
    if (h0, w0) == (height, width):
        return src
    rows = (np.arange(height) + 0.5) * h0 / height - 0.5
    cols = (np.arange(width) + 0.5) * w0 / width - 0.5
    r0 = np.clip(np.floor(rows), 0, h0 - 1).astype(int)
    c0 = np.clip(np.floor(cols), 0, w0 - 1).astype(int)
    r1 = np.clip(r0 + 1, 0, h0 - 1)
    c1 = np.clip(c0 + 1, 0, w0 - 1)
    fr = np.clip(rows - r0, 0.0, 1.0)[:, None, None]
    fc = np.clip(cols - c0, 0.0, 1.0)[None, :, None]
    out = (
        src[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + src[np.ix_(r1, c0)] * fr * (1 - fc)
        + src[np.ix_(r0, c1)] * (1 - fr) * fc
        + src[np.ix_(r1, c1)] * fr * fc
    )
    return _unit_rows(out, "resampled sphere map")


def _aligned_sphere(sphere_map: Array, feats: Array) -> Array:
    h, w, _ = feats.shape
    return resample_sphere_map(np.asarray(sphere_map, dtype=np.float64), h, w)


def similarity_volume(query_pixel, feats_src: Array, feats_tgt: Array,
                      map_src: Array, map_tgt: Array,
                      alpha: float) -> SimilarityVolume:
    """Score every target pixel against one source query pixel.

    Per pixel: (1 - alpha) * cos(features) + alpha * cos(sphere points);
    both terms lie in [-1, 1]. The volume's argmax is the combined match.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    col, row = query_pixel
    feats_src = np.asarray(feats_src, dtype=np.float64)
    feats_tgt = np.asarray(feats_tgt, dtype=np.float64)
    h, w, _ = feats_tgt.shape
    if not (0 <= col < feats_src.shape[1] and 0 <= row < feats_src.shape[0]):
        raise ValueError(f"query pixel {query_pixel} outside source extent")
    map_src = _aligned_sphere(map_src, feats_src)
    map_tgt = _aligned_sphere(map_tgt, feats_tgt)

    qf = _unit_rows(feats_src[row, col][None, :], "query features")[0]
    feature_term = (_unit_rows(feats_tgt.reshape(-1, feats_tgt.shape[-1]),
                               "target features") @ qf).reshape(h, w)
    qs = map_src[row, col]
    sphere_term = (map_tgt.reshape(-1, 3) @ qs).reshape(h, w)
    scores = (1.0 - alpha) * feature_term + alpha * sphere_term
    return SimilarityVolume(scores=scores, feature_term=feature_term,
                            sphere_term=sphere_term, alpha=alpha,
                            query=(int(col), int(row)))


def match_combined(query_pixel, feats_src, feats_tgt, map_src, map_tgt,
                   alpha: float) -> tuple[int, int]:
    """Blended argmin match; returns the (col, row) target pixel."""
    vol = similarity_volume(query_pixel, feats_src, feats_tgt, map_src, map_tgt, alpha)
    return vol.argmax_pixel()


def match_sphere_only(query_pixel, map_src: Array, map_tgt: Array,
                      target_mask: Array | None = None) -> tuple[int, int]:
    """Nearest sphere point in the target, optionally masked to foreground."""
    map_src = np.asarray(map_src, dtype=np.float64)
    map_tgt = np.asarray(map_tgt, dtype=np.float64)
    col, row = query_pixel
    qs = map_src[row, col]
    sim = map_tgt.reshape(-1, 3) @ qs
    if target_mask is not None:
        sel = np.asarray(target_mask).astype(bool).reshape(-1)
        if not sel.any():
            raise ValueError("match_sphere_only: empty target mask")
        sim = np.where(sel, sim, -np.inf)
    flat = int(np.argmax(sim))
    r, c = divmod(flat, map_tgt.shape[1])
    return (int(c), int(r))
