"""Mapper and prototype behavior, init determinism, checkpoint round trips."""

import numpy as np
import pytest

from spherecorr import autodiff as ad
from spherecorr import models
from spherecorr.autodiff import Tensor, finite_diff_grad, grad


@pytest.fixture(scope="module")
def small():
    cfg, mapper, proto = models.init_params(8, categories=("cat", "dog"), seed=3)
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(4, 5, 8))
    return cfg, mapper, proto, feats


def test_init_is_seed_deterministic():
    _, m1, p1 = models.init_params(8, categories=("a",), seed=9)
    _, m2, p2 = models.init_params(8, categories=("a",), seed=9)
    for (_, t1), (_, t2) in zip(models.param_items(m1), models.param_items(m2)):
        assert np.array_equal(t1.value, t2.value)
    _, m3, _ = models.init_params(8, categories=("a",), seed=10)
    assert not np.array_equal(m1.reduce_w.value, m3.reduce_w.value)
    for (_, t1), (_, t2) in zip(models.param_items(p1), models.param_items(p2)):
        assert np.array_equal(t1.value, t2.value)


def test_odd_channel_count_rejected():
    with pytest.raises(ValueError, match="even"):
        models.init_params(7)


def test_mapper_outputs_unit_norm_and_determinism(small):
    cfg, mapper, _, feats = small
    out1 = models.sphere_mapper_forward(cfg, mapper, feats)
    out2 = models.sphere_mapper_forward(cfg, mapper, feats)
    assert np.abs(np.linalg.norm(out1.value, axis=1) - 1.0).max() < 1e-6
    assert np.array_equal(out1.value, out2.value)


def test_mapper_rejects_channel_mismatch(small):
    cfg, mapper, _, _ = small
    with pytest.raises(ValueError, match="channels"):
        models.sphere_mapper_forward(cfg, mapper, np.zeros((4, 4, 6)))


def test_mapper_permutation_equivariance(small):
    cfg, mapper, _, feats = small
    flat = feats.reshape(-1, 8)
    rng = np.random.default_rng(0)
    perm = rng.permutation(flat.shape[0])
    base = models.sphere_mapper_forward(cfg, mapper, flat).value
    permuted = models.sphere_mapper_forward(cfg, mapper, flat[perm]).value
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    assert np.abs(base - permuted[inverse]).max() < 1e-12


def test_prototype_per_point_independence_100_batches(small):
    cfg, _, proto, _ = small
    rng = np.random.default_rng(13)
    for _ in range(100):
        pts = rng.normal(size=(rng.integers(2, 7), 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        batched = models.prototype_query(cfg, proto, pts, "cat").value
        i = int(rng.integers(0, pts.shape[0]))
        single = models.prototype_query(cfg, proto, pts[i], "cat").value
        assert np.array_equal(batched[i], single[0])


def test_prototype_repeated_points_identical_rows(small):
    cfg, _, proto, _ = small
    p = np.array([0.6, 0.0, 0.8])
    out = models.prototype_query(cfg, proto, np.tile(p, (3, 1)), "cat").value
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_prototype_category_conditioning(small):
    cfg, _, proto, _ = small
    pts = np.array([[0.0, 0.6, 0.8], [1.0, 0.0, 0.0]])
    a = models.prototype_query(cfg, proto, pts, "cat").value
    b = models.prototype_query(cfg, proto, pts, "dog").value
    assert not np.allclose(a, b)


def test_prototype_input_validation(small):
    cfg, _, proto, _ = small
    with pytest.raises(ValueError, match="unit"):
        models.prototype_query(cfg, proto, np.array([1.0, 1.0, 0.0]), "cat")
    with pytest.raises(KeyError, match="unknown category"):
        models.prototype_query(cfg, proto, np.array([1.0, 0, 0]), "bird")


def test_end_to_end_gradient_matches_finite_differences():
    cfg, mapper, proto = models.init_params(6, hidden=4, heads=2,
                                            categories=("c",), seed=1)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(2, 3, 6))
    phi = feats.reshape(-1, 6)
    phi_unit = phi / np.linalg.norm(phi, axis=1, keepdims=True)
    params = models.param_list(mapper, proto)
    values = [p.value.copy() for p in params]

    def loss_value():
        smap = models.sphere_mapper_forward(cfg, mapper, feats)
        recon = models.prototype_query(cfg, proto, smap, "c")
        cos = ad.row_dot(ad.l2_normalize_rows(recon), phi_unit)
        return ad.tmean(ad.sub(1.0, cos))

    analytic = grad(loss_value(), params)

    def f(vals):
        for p, v in zip(params, vals):
            p.value = np.array(v)
        out = float(loss_value().value)
        return out

    coord_rng = np.random.default_rng(3)
    coords = [coord_rng.choice(p.size, size=min(4, p.size), replace=False)
              for p in values]
    numeric = finite_diff_grad(f, values, h=1e-5, coords=coords)
    for p, v in zip(params, values):
        p.value = v
    num = den = 0.0
    for g_a, g_n, cs in zip(analytic, numeric, coords):
        num += float(((g_a.ravel()[cs] - g_n.ravel()[cs]) ** 2).sum())
        den += float((g_n.ravel()[cs] ** 2).sum())
    assert np.sqrt(num) / max(np.sqrt(den), 1e-12) < 1e-5


def test_checkpoint_roundtrip_bitexact(tmp_path, small):
    cfg, mapper, proto, feats = small
    p1 = tmp_path / "a.sck"
    p2 = tmp_path / "b.sck"
    models.save_checkpoint(p1, cfg, mapper, proto, epoch=7)
    cfg2, mapper2, proto2, epoch = models.load_checkpoint(p1)
    assert epoch == 7
    assert cfg2.categories == cfg.categories
    models.save_checkpoint(p2, cfg2, mapper2, proto2, epoch=epoch)
    assert p1.read_bytes() == p2.read_bytes()
    out_a = models.sphere_mapper_forward(cfg, mapper, feats).value
    out_b = models.sphere_mapper_forward(cfg2, mapper2, feats).value
    assert np.array_equal(out_a, out_b)


def test_checkpoint_corruption_detected(tmp_path, small):
    cfg, mapper, proto, _ = small
    path = tmp_path / "c.sck"
    models.save_checkpoint(path, cfg, mapper, proto)
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.sck"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(models.CheckpointError, match="not a checkpoint"):
        models.load_checkpoint(bad)
    truncated = tmp_path / "trunc.sck"
    truncated.write_bytes(raw[: len(raw) - 40])
    with pytest.raises(models.CheckpointError, match="truncated"):
        models.load_checkpoint(truncated)
    garbled = bytearray(raw)
    garbled[14] = 0xFF  # inside the JSON header
    gpath = tmp_path / "garbled.sck"
    gpath.write_bytes(garbled)
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(gpath)
