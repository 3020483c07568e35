"""Matching semantics: limit cases, tie-breaks, and blending behavior."""

import numpy as np
import pytest

from spherecorr import dataio
from spherecorr.geometry import cosine_distance
from spherecorr.matcher import (SimilarityVolume, match_combined,
                                match_sphere_only, resample_sphere_map,
                                similarity_volume)


def random_instance(seed, h=5, w=6, c=4):
    rng = np.random.default_rng(seed)
    feats_src = rng.normal(size=(h, w, c))
    feats_tgt = rng.normal(size=(h, w, c))

    def rand_map():
        m = rng.normal(size=(h, w, 3))
        return m / np.linalg.norm(m, axis=-1, keepdims=True)

    return feats_src, feats_tgt, rand_map(), rand_map(), rng


def test_self_match_is_identity():
    feats, _, smap, _, _ = random_instance(0)
    h, w, _ = feats.shape
    for row in range(h):
        for col in range(w):
            assert match_combined((col, row), feats, feats, smap, smap, 0.2) \
                == (col, row)


def test_constant_target_breaks_ties_row_major():
    _, _, smap_src, _, _ = random_instance(1)
    const = np.tile([0.0, 0.0, 1.0], (5, 6, 1))
    assert match_sphere_only((3, 2), smap_src, const) == (0, 0)


def test_alpha_limits_match_brute_force():
    feats_src, feats_tgt, map_src, map_tgt, rng = random_instance(2)
    h, w, _ = feats_tgt.shape
    for _ in range(50):
        q = (int(rng.integers(w)), int(rng.integers(h)))
        # alpha = 0: pure feature nearest neighbor by cosine distance
        best = min(
            ((cosine_distance(feats_src[q[1], q[0]], feats_tgt[r, c]), (c, r))
             for r in range(h) for c in range(w)),
            key=lambda t: t[0],
        )[1]
        assert match_combined(q, feats_src, feats_tgt, map_src, map_tgt, 0.0) == best
        # alpha = 1: sphere-only, unmasked
        assert (match_combined(q, feats_src, feats_tgt, map_src, map_tgt, 1.0)
                == match_sphere_only(q, map_src, map_tgt))


def test_three_by_three_exhaustive():
    feats_src, feats_tgt, map_src, map_tgt, _ = random_instance(3, h=3, w=3)
    alpha = 0.3
    q = (1, 2)
    scores = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            scores[r, c] = (
                (1 - alpha) * (1 - cosine_distance(feats_src[q[1], q[0]],
                                                   feats_tgt[r, c]))
                + alpha * (1 - cosine_distance(map_src[q[1], q[0]], map_tgt[r, c]))
            )
    r, c = np.unravel_index(np.argmax(scores), scores.shape)
    assert match_combined(q, feats_src, feats_tgt, map_src, map_tgt, alpha) == (c, r)


def test_volume_argmax_agrees_with_match_100_instances():
    for seed in range(100):
        feats_src, feats_tgt, map_src, map_tgt, rng = random_instance(seed, 4, 4)
        q = (int(rng.integers(4)), int(rng.integers(4)))
        alpha = float(rng.uniform(0, 1))
        vol = similarity_volume(q, feats_src, feats_tgt, map_src, map_tgt, alpha)
        assert vol.argmax_pixel() == match_combined(
            q, feats_src, feats_tgt, map_src, map_tgt, alpha)
        assert np.all(vol.scores <= 1.0 + 1e-12)
        assert np.all(vol.scores >= -1.0 - 1e-12)
        assert np.all(np.abs(vol.feature_term) <= 1.0 + 1e-12)
        assert np.all(np.abs(vol.sphere_term) <= 1.0 + 1e-12)


def test_alpha_zero_volume_is_feature_cosine():
    feats_src, feats_tgt, map_src, map_tgt, _ = random_instance(7)
    vol = similarity_volume((2, 1), feats_src, feats_tgt, map_src, map_tgt, 0.0)
    assert np.array_equal(vol.scores, vol.feature_term)


def test_alpha_out_of_range_rejected():
    feats_src, feats_tgt, map_src, map_tgt, _ = random_instance(8)
    with pytest.raises(ValueError, match="alpha"):
        similarity_volume((0, 0), feats_src, feats_tgt, map_src, map_tgt, 1.2)


def test_blending_is_piecewise_constant_in_alpha():
    feats_src, feats_tgt, map_src, map_tgt, _ = random_instance(9)
    q = (4, 3)
    picks = [match_combined(q, feats_src, feats_tgt, map_src, map_tgt, a)
             for a in np.linspace(0.0, 1.0, 101)]
    # each winning pixel occupies one contiguous run of alphas
    seen = set()
    prev = None
    for p in picks:
        if p != prev:
            assert p not in seen, f"pixel {p} won two disjoint alpha ranges"
            seen.add(p)
            prev = p


def test_masked_sphere_matching_stays_in_foreground():
    _, _, map_src, map_tgt, rng = random_instance(10)
    mask = rng.random((5, 6)) > 0.5
    mask[0, 0] = False
    for _ in range(30):
        q = (int(rng.integers(6)), int(rng.integers(5)))
        col, row = match_sphere_only(q, map_src, map_tgt, target_mask=mask)
        assert mask[row, col]
    with pytest.raises(ValueError, match="empty"):
        match_sphere_only(q, map_src, map_tgt, target_mask=np.zeros((5, 6), bool))


def test_resampling_aligns_resolutions():
    rng = np.random.default_rng(11)
    small = rng.normal(size=(4, 4, 3))
    small /= np.linalg.norm(small, axis=-1, keepdims=True)
    up = resample_sphere_map(small, 8, 8)
    assert up.shape == (8, 8, 3)
    assert np.abs(np.linalg.norm(up, axis=-1) - 1.0).max() < 1e-12
    assert resample_sphere_map(small, 4, 4) is not None
    # matching across resolutions goes through the resampler
    feats_tgt = rng.normal(size=(8, 8, 5))
    feats_src = rng.normal(size=(8, 8, 5))
    big_src = rng.normal(size=(8, 8, 3))
    big_src /= np.linalg.norm(big_src, axis=-1, keepdims=True)
    p = match_combined((2, 2), feats_src, feats_tgt, big_src, small, 0.5)
    assert 0 <= p[0] < 8 and 0 <= p[1] < 8


def test_sphere_only_resolves_mirror_ambiguity_with_oracle_maps():
    """With ground-truth surface maps, sphere-only matching picks the correct
    side while raw symmetric features scores tie between the two sides."""
    world = dataio.generate_world(8, seed=21, symmetric=True)
    src_az, tgt_az = 0.9, np.pi / 2
    f_src, ann_src = dataio.render_view(world, src_az, 32, 32)
    f_tgt, ann_tgt = dataio.render_view(world, tgt_az, 32, 32)
    map_src, _ = dataio.surface_grid(src_az, 32, 32)
    map_tgt, _ = dataio.surface_grid(tgt_az, 32, 32)
    checked = 0
    for name, k in world.keypoints.items():
        loc_s = ann_src.keypoints[name]
        loc_t = ann_tgt.keypoints[name]
        mir_t = ann_tgt.mirror_keypoints[name]
        if loc_s is None or loc_t is None or mir_t is None:
            continue
        if np.hypot(loc_t[0] - mir_t[0], loc_t[1] - mir_t[1]) < 6.0:
            continue
        q = (int(round(loc_s[0])), int(round(loc_s[1])))
        vol = similarity_volume(q, f_src.data.astype(float),
                                f_tgt.data.astype(float), map_src, map_tgt, 0.0)

        def at(loc):
            return vol.feature_term[int(round(loc[1])), int(round(loc[0]))]

        assert abs(at(loc_t) - at(mir_t)) < 1e-5  # features cannot tell
        pred = match_sphere_only(q, map_src, map_tgt, target_mask=f_tgt.mask)
        d_true = np.hypot(pred[0] - loc_t[0], pred[1] - loc_t[1])
        d_mirror = np.hypot(pred[0] - mir_t[0], pred[1] - mir_t[1])
        assert d_true < d_mirror  # the sphere picks the correct side
        assert d_true <= 2.0
        checked += 1
    assert checked >= 2
