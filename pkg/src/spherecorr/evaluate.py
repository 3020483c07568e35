"""Dataset-level evaluation: dense score volumes for every image pair and
source keypoint, folded into PCK/KAP reports per matcher.

Matchers share one pass per image pair (the feature and sphere similarity
grids are computed once and blended per matcher). Pair-level work can fan
out over threads; the SPHERECORR_THREADS environment variable caps the pool
and results are folded back in deterministic pair order either way.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import models
from .dataio import ImageRecord
from .matcher import resample_sphere_map
from .metrics import (KeypointCandidate, MetricReport, MirrorStats, kap,
                      mirror_confusion_stats, pck)

Array = np.ndarray


@dataclass(frozen=True)
class MatcherSpec:
    """One way of scoring target pixels against a query.

    alpha blends feature and sphere similarity; ``masked`` restricts scores
    to the target foreground (meaningful for sphere-only matching, which has
    no feature term to suppress the background).
    """

    name: str
    alpha: float
    masked: bool = False


DEFAULT_MATCHERS = (
    MatcherSpec("feature", alpha=0.0),
    MatcherSpec("sphere", alpha=1.0),
    MatcherSpec("sphere-masked", alpha=1.0, masked=True),
    MatcherSpec("mix", alpha=0.2),
)


def worker_count() -> int:
    """Thread cap from SPHERECORR_THREADS (default 1, i.e. serial)."""
    raw = os.environ.get("SPHERECORR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def compute_sphere_maps(model_cfg: models.ModelConfig,
                        mapper: models.SphereMapperParams,
                        records: list[ImageRecord]) -> dict[str, Array]:
    """Run the mapper over every image; returns (H, W, 3) grids by id."""
    out = {}
    for rec in records:
        h, w, _ = rec.features.shape
        smap = models.sphere_mapper_forward(model_cfg, mapper, rec.features)
        out[rec.image_id] = smap.value.reshape(h, w, 3)
    return out


def _unit_flat(feats: Array) -> Array:
    flat = feats.reshape(-1, feats.shape[-1])
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms < 1e-15):
        raise ValueError("zero-norm feature vector in image")
    return flat / norms


def ordered_pairs(records: list[ImageRecord],
                  max_pairs: int | None = None,
                  rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """All ordered same-category index pairs, optionally subsampled."""
    pairs = [
        (i, j)
        for i in range(len(records))
        for j in range(len(records))
        if i != j and records[i].category == records[j].category
    ]
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = rng or np.random.default_rng(0)
        keep = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[k] for k in sorted(keep)]
    return pairs


def _query_pixel(loc, width, height) -> tuple[int, int]:
    col = int(np.clip(np.rint(loc[0]), 0, width - 1))
    row = int(np.clip(np.rint(loc[1]), 0, height - 1))
    return col, row


def build_candidates(
    records: list[ImageRecord],
    sphere_maps: dict[str, Array],
    matchers: tuple[MatcherSpec, ...] = DEFAULT_MATCHERS,
    max_pairs: int | None = None,
) -> dict[str, list[KeypointCandidate]]:
    """Score volumes for every (pair, source-visible keypoint, matcher)."""
    pairs = ordered_pairs(records, max_pairs=max_pairs)
    units = [_unit_flat(r.features) for r in records]
    maps_flat = {}
    for r in records:
        h, w, _ = r.features.shape
        maps_flat[r.image_id] = resample_sphere_map(
            sphere_maps[r.image_id], h, w).reshape(-1, 3)

    def eval_pair(pair):
        i, j = pair
        src, tgt = records[i], records[j]
        h, w, _ = tgt.features.shape
        pair_id = f"{src.image_id}->{tgt.image_id}"
        visible = [k for k, loc in sorted(src.keypoints.items()) if loc is not None]
        if not visible:
            return []
        q_pixels = [_query_pixel(src.keypoints[k], src.features.shape[1],
                                 src.features.shape[0]) for k in visible]
        q_flat = [r * src.features.shape[1] + c for c, r in q_pixels]
        feat_sims = units[i][q_flat] @ units[j].T  # (n_kp, H*W)
        sphere_sims = maps_flat[src.image_id][q_flat] @ maps_flat[tgt.image_id].T
        tgt_fg = None if tgt.mask is None else tgt.mask.reshape(-1)
        out = []
        for m in matchers:
            scores_all = (1.0 - m.alpha) * feat_sims + m.alpha * sphere_sims
            if m.masked:
                if tgt_fg is None:
                    raise ValueError(f"{m.name}: target {tgt.image_id} has no mask")
                scores_all = np.where(tgt_fg[None, :], scores_all, -np.inf)
            for kp_i, kp in enumerate(visible):
                mirror = tgt.mirror_keypoints.get(kp) if tgt.mirror_keypoints else None
                out.append((m.name, KeypointCandidate(
                    category=src.category,
                    pair_id=pair_id,
                    keypoint_id=kp,
                    scores=scores_all[kp_i].reshape(h, w),
                    target_location=tgt.keypoints.get(kp),
                    target_bbox=tgt.bbox,
                    mirror_location=mirror,
                )))
        return out

    n_threads = worker_count()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            chunks = list(pool.map(eval_pair, pairs))
    else:
        chunks = [eval_pair(p) for p in pairs]
    result: dict[str, list[KeypointCandidate]] = {m.name: [] for m in matchers}
    for chunk in chunks:
        for name, cand in chunk:
            result[name].append(cand)
    return result


@dataclass
class EvaluationResult:
    reports: dict[str, MetricReport]
    mirror: dict[str, MirrorStats]


def evaluate_dataset(
    records: list[ImageRecord],
    model_cfg: models.ModelConfig,
    mapper: models.SphereMapperParams,
    kappa: float = 0.1,
    alpha: float = 0.2,
    matchers: tuple[MatcherSpec, ...] | None = None,
    max_pairs: int | None = None,
) -> EvaluationResult:
    """PCK/KAP for the standard matcher set on one dataset."""
    if matchers is None:
        matchers = (
            MatcherSpec("feature", alpha=0.0),
            MatcherSpec("sphere", alpha=1.0),
            MatcherSpec("sphere-masked", alpha=1.0, masked=True),
            MatcherSpec("mix", alpha=alpha),
        )
    sphere_maps = compute_sphere_maps(model_cfg, mapper, records)
    by_matcher = build_candidates(records, sphere_maps, matchers,
                                  max_pairs=max_pairs)
    reports = {}
    mirror = {}
    spec_by_name = {m.name: m for m in matchers}
    for name, cands in by_matcher.items():
        scores = pck(cands, kappa)
        scores = kap(cands, kappa, existing=scores)
        reports[name] = MetricReport(kappa=kappa, matcher=name,
                                     alpha=spec_by_name[name].alpha,
                                     per_category=scores)
        mirror[name] = mirror_confusion_stats(cands, kappa)
    return EvaluationResult(reports=reports, mirror=mirror)
