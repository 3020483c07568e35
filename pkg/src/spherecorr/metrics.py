"""Keypoint-transfer metrics: PCK and Keypoint Average Precision.

PCK only grades keypoints visible in both images, so a matcher that
confidently fires on a symmetric counterpart of an occluded keypoint is
never penalized. KAP closes that hole: every source-visible keypoint yields
ranked samples — the best score near the true target location is a
positive, the best score away from it is a negative, and when the keypoint
is missing from the target the image-wide best score becomes a negative.
Average precision over the pooled samples then punishes confident wrong
matches that PCK cannot see.

The distance threshold everywhere is kappa times the longer side of the
target object's bounding box, and the comparison is closed (<=).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


@dataclass
class KeypointCandidate:
    """One (image pair, source keypoint) evaluation unit.

    ``scores`` is the dense similarity volume over the target image;
    ``target_location`` is the ground-truth (col, row) in the target or None
    when the keypoint is not visible there. ``mirror_location`` optionally
    carries the projection of the keypoint's reflection-symmetric
    counterpart, enabling the mirror-confusion oracle on synthetic data.
    """

    category: str
    pair_id: str
    keypoint_id: str
    scores: Array  # (H, W)
    target_location: tuple[float, float] | None
    target_bbox: tuple[float, float, float, float]
    mirror_location: tuple[float, float] | None = None


@dataclass(frozen=True)
class KapSample:
    score: float
    positive: bool
    pair_id: str
    keypoint_id: str
    case: str  # in_radius | out_radius | invisible_target


@dataclass
class CategoryScores:
    pck: float | None = None
    kap: float | None = None
    pairs: int = 0
    skipped_pairs: int = 0
    kap_samples: int = 0


@dataclass
class MetricReport:
    """Per-category and macro-averaged scores for one matcher setting."""

    kappa: float
    matcher: str
    alpha: float | None
    per_category: dict[str, CategoryScores] = field(default_factory=dict)

    def _macro(self, attr: str) -> float | None:
        vals = [getattr(s, attr) for s in self.per_category.values()
                if getattr(s, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def macro_pck(self) -> float | None:
        return self._macro("pck")

    @property
    def macro_kap(self) -> float | None:
        return self._macro("kap")

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "matcher": self.matcher,
            "alpha": self.alpha,
            "per_category": {
                c: {"pck": s.pck, "kap": s.kap, "pairs": s.pairs,
                    "skipped_pairs": s.skipped_pairs, "kap_samples": s.kap_samples}
                for c, s in sorted(self.per_category.items())
            },
            "macro": {"pck": self.macro_pck, "kap": self.macro_kap},
        }

    def format_table(self) -> str:
        """Aligned text table, scores scaled by 100 with one decimal."""

        def cell(v):
            return "   n/a" if v is None else f"{100.0 * v:6.1f}"

        alpha = "" if self.alpha is None else f", alpha={self.alpha:g}"
        lines = [f"matcher: {self.matcher}{alpha}   kappa={self.kappa:g}",
                 f"{'category':<16}{'pck':>8}{'kap':>8}{'pairs':>8}"]
        for cat, s in sorted(self.per_category.items()):
            lines.append(f"{cat:<16}{cell(s.pck):>8}{cell(s.kap):>8}{s.pairs:>8}")
        total_pairs = sum(s.pairs for s in self.per_category.values())
        lines.append(f"{'macro':<16}{cell(self.macro_pck):>8}"
                     f"{cell(self.macro_kap):>8}{total_pairs:>8}")
        return "\n".join(lines)


def pck_threshold(bbox, kappa: float) -> float:
    """Pixel radius: kappa times the longer bounding-box side."""
    x0, y0, x1, y1 = bbox
    return kappa * max(x1 - x0, y1 - y0)


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def pck(candidates: list[KeypointCandidate], kappa: float) -> dict[str, CategoryScores]:
    """Fraction of co-visible keypoints matched within the kappa radius.

    The prediction for each keypoint is the argmax of its score volume (ties
    to the first pixel in row-major order). Scores are averaged per pair,
    then over pairs of a category; pairs without a single co-visible
    keypoint are skipped and counted.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    by_pair: dict[tuple[str, str], list[KeypointCandidate]] = {}
    for cand in candidates:
        by_pair.setdefault((cand.category, cand.pair_id), []).append(cand)
    per_cat_fractions: dict[str, list[float]] = {}
    skipped: dict[str, int] = {}
    for (cat, _pair), cands in sorted(by_pair.items()):
        covisible = [c for c in cands if c.target_location is not None]
        if not covisible:
            skipped[cat] = skipped.get(cat, 0) + 1
            continue
        hits = 0
        for c in covisible:
            r, col = np.unravel_index(int(np.argmax(c.scores)), c.scores.shape)
            thr = pck_threshold(c.target_bbox, kappa)
            if _dist((col, r), c.target_location) <= thr:
                hits += 1
        per_cat_fractions.setdefault(cat, []).append(hits / len(covisible))
    out: dict[str, CategoryScores] = {}
    for cat in sorted(set(per_cat_fractions) | set(skipped)):
        fr = per_cat_fractions.get(cat, [])
        out[cat] = CategoryScores(
            pck=float(np.mean(fr)) if fr else None,
            pairs=len(fr),
            skipped_pairs=skipped.get(cat, 0),
        )
    return out


def build_kap_samples(candidates: list[KeypointCandidate],
                      kappa: float) -> list[KapSample]:
    """Label the score volumes per the three KAP cases."""
    samples: list[KapSample] = []
    for c in candidates:
        h, w = c.scores.shape
        if c.target_location is None:
            samples.append(KapSample(float(c.scores.max()), False, c.pair_id,
                                     c.keypoint_id, "invisible_target"))
            continue
        thr = pck_threshold(c.target_bbox, kappa)
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        inside = np.hypot(cols - c.target_location[0],
                          rows - c.target_location[1]) <= thr
        if inside.any():
            samples.append(KapSample(float(c.scores[inside].max()), True,
                                     c.pair_id, c.keypoint_id, "in_radius"))
        if (~inside).any():
            samples.append(KapSample(float(c.scores[~inside].max()), False,
                                     c.pair_id, c.keypoint_id, "out_radius"))
    return samples


def average_precision(samples: list[KapSample]) -> float:
    """All-points average precision with pessimistic tie handling.

    Samples are ranked by descending score; on ties, negatives precede
    positives, so the value is a lower bound over tie orderings. AP is the
    mean of precision-at-rank over the ranks holding positives.
    """
    n_pos = sum(1 for s in samples if s.positive)
    if n_pos == 0:
        raise ValueError("average precision undefined without positive samples")
    ranked = sorted(samples, key=lambda s: (-s.score, s.positive))
    ap = 0.0
    seen_pos = 0
    for rank, s in enumerate(ranked, start=1):
        if s.positive:
            seen_pos += 1
            ap += seen_pos / rank
    return ap / n_pos


def average_precision_bruteforce(samples: list[KapSample]) -> float:
    """Independent O(n^2) oracle: rescan every rank prefix from scratch."""
    n_pos = len([s for s in samples if s.positive])
    if n_pos == 0:
        raise ValueError("average precision undefined without positive samples")
    order = sorted(range(len(samples)),
                   key=lambda i: (-samples[i].score, samples[i].positive))
    total = 0.0
    for k in range(1, len(order) + 1):
        if not samples[order[k - 1]].positive:
            continue
        prefix_hits = 0
        for i in order[:k]:
            if samples[i].positive:
                prefix_hits += 1
        total += prefix_hits / k
    return total / n_pos


def kap(candidates: list[KeypointCandidate], kappa: float,
        existing: dict[str, CategoryScores] | None = None) -> dict[str, CategoryScores]:
    """Per-category average precision over pooled KAP samples.

    Categories without a single positive sample have no defined AP; they are
    reported with ``kap=None`` and excluded from the macro average. When
    ``existing`` (e.g. pck output) is given, scores are merged into it.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    by_cat: dict[str, list[KeypointCandidate]] = {}
    for c in candidates:
        by_cat.setdefault(c.category, []).append(c)
    out = existing if existing is not None else {}
    for cat in sorted(by_cat):
        samples = build_kap_samples(by_cat[cat], kappa)
        scores = out.setdefault(cat, CategoryScores())
        scores.kap_samples = len(samples)
        if any(s.positive for s in samples):
            scores.kap = average_precision(samples)
        else:
            scores.kap = None
    return out


@dataclass
class MirrorStats:
    """Oracle-checked mirror confusions among resolvable cases.

    A case is resolvable when the keypoint and its mirrored counterpart are
    both visible in the target and farther apart than the match radius; a
    confusion is a prediction within the radius of the mirror but not of the
    truth.
    """

    cases: int = 0
    confusions: int = 0

    @property
    def rate(self) -> float:
        return self.confusions / self.cases if self.cases else 0.0


def mirror_confusion_stats(candidates: list[KeypointCandidate],
                           kappa: float) -> MirrorStats:
    stats = MirrorStats()
    for c in candidates:
        if c.target_location is None or c.mirror_location is None:
            continue
        thr = pck_threshold(c.target_bbox, kappa)
        if _dist(c.target_location, c.mirror_location) <= thr:
            continue  # truth and mirror are not distinguishable at this radius
        stats.cases += 1
        r, col = np.unravel_index(int(np.argmax(c.scores)), c.scores.shape)
        pred = (col, r)
        if (_dist(pred, c.mirror_location) <= thr
                and _dist(pred, c.target_location) > thr):
            stats.confusions += 1
    return stats
