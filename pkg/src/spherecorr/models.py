"""The two learnable networks and their checkpoint format.

The sphere mapper is a small head on top of ingested dense features: a
linear reduction to half the channels, one pre-norm transformer block with
self-attention over all pixels of the image, and a linear layer down to
three channels followed by pixel-wise l2 normalization.

The prototype maps unit sphere points to feature vectors, conditioned on a
category embedding through cross-attention against a single category token.
It deliberately has no self-attention, so each point's output depends on
that point alone; the forward path only uses row-stable ops to keep that
exact, not just approximate.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Array = np.ndarray

CHECKPOINT_MAGIC = b"SCCK"
CHECKPOINT_VERSION = 1
MLP_EXPANSION = 2


@dataclass
class ModelConfig:
    """Architecture knobs shared by both networks."""

    channels: int
    hidden: int
    heads: int
    categories: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if self.channels % 2 != 0:
            raise ValueError("feature channel count must be even")
        if self.hidden < 1 or self.heads < 1 or len(self.categories) < 1:
            raise ValueError("hidden width, heads and categories must be >= 1")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden width must divide evenly into heads")
        self.categories = tuple(self.categories)

    def category_index(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise KeyError(f"unknown category {name!r}") from None


@dataclass
class SphereMapperParams:
    reduce_w: Tensor
    reduce_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class PrototypeParams:
    lift_w: Tensor
    lift_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    out_w: Tensor
    out_b: Tensor
    cat_embed: Tensor


def param_items(params) -> list[tuple[str, Tensor]]:
    """(name, tensor) pairs in declaration order."""
    return [(f.name, getattr(params, f.name)) for f in dataclasses.fields(params)]


def param_list(*param_sets) -> list[Tensor]:
    out: list[Tensor] = []
    for ps in param_sets:
        out.extend(t for _, t in param_items(ps))
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(
    channels: int,
    hidden: int | None = None,
    heads: int = 4,
    categories: tuple[str, ...] = ("default",),
    seed: int = 0,
) -> tuple[ModelConfig, SphereMapperParams, PrototypeParams]:
    """Deterministically initialize both networks from one seed."""
    if hidden is None:
        hidden = channels // 2
    cfg = ModelConfig(channels=channels, hidden=hidden, heads=heads,
                      categories=tuple(categories), seed=seed)
    rng = np.random.default_rng(seed)
    c, d = cfg.channels, cfg.hidden

    def lin(fi, fo):
        return ad.parameter(_glorot(rng, fi, fo)), ad.parameter(np.zeros(fo))

    def ln():
        return ad.parameter(np.ones(d)), ad.parameter(np.zeros(d))

    reduce_w, reduce_b = lin(c, d)
    m_ln1 = ln()
    m_wq, m_bq = lin(d, d)
    m_wk, m_bk = lin(d, d)
    m_wv, m_bv = lin(d, d)
    m_wo, m_bo = lin(d, d)
    m_ln2 = ln()
    m_w1, m_b1 = lin(d, MLP_EXPANSION * d)
    m_w2, m_b2 = lin(MLP_EXPANSION * d, d)
    out_w, out_b = lin(d, 3)
    mapper = SphereMapperParams(
        reduce_w, reduce_b, *m_ln1,
        m_wq, m_bq, m_wk, m_bk, m_wv, m_bv, m_wo, m_bo,
        *m_ln2, m_w1, m_b1, m_w2, m_b2, out_w, out_b,
    )

    lift_w, lift_b = lin(3, d)
    p_ln1 = ln()
    p_wq, p_bq = lin(d, d)
    p_wk, p_bk = lin(d, d)
    p_wv, p_bv = lin(d, d)
    p_wo, p_bo = lin(d, d)
    p_ln2 = ln()
    p_w1, p_b1 = lin(d, MLP_EXPANSION * d)
    p_w2, p_b2 = lin(MLP_EXPANSION * d, d)
    p_out_w, p_out_b = lin(d, c)
    cat_embed = ad.parameter(_glorot(rng, len(cfg.categories), d))
    proto = PrototypeParams(
        lift_w, lift_b, *p_ln1,
        p_wq, p_bq, p_wk, p_bk, p_wv, p_bv, p_wo, p_bo,
        *p_ln2, p_w1, p_b1, p_w2, p_b2, p_out_w, p_out_b, cat_embed,
    )
    return cfg, mapper, proto


def _affine_ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm_rows(x), gain), bias)


def _attention(q_tokens: Tensor, kv_tokens: Tensor, p, heads: int,
               mm=ad.matmul) -> Tensor:
    """Multi-head attention; kv may be the same tokens (self) or one token."""
    d = q_tokens.value.shape[1]
    dh = d // heads
    q = ad.add(mm(q_tokens, p.wq), p.bq)
    k = ad.add(mm(kv_tokens, p.wk), p.bk)
    v = ad.add(mm(kv_tokens, p.wv), p.bv)
    outs = []
    for h in range(heads):
        qs = ad.slice_axis(q, 1, h * dh, (h + 1) * dh)
        ks = ad.slice_axis(k, 1, h * dh, (h + 1) * dh)
        vs = ad.slice_axis(v, 1, h * dh, (h + 1) * dh)
        logits = ad.scale(mm(qs, ad.transpose(ks)), 1.0 / np.sqrt(dh))
        attn = ad.softmax_rows(logits)
        outs.append(mm(attn, vs))
    merged = ad.concat(outs, axis=1)
    return ad.add(mm(merged, p.wo), p.bo)


def _block(tokens: Tensor, p, heads: int, kv: Tensor | None = None,
           mm=ad.matmul) -> Tensor:
    """Pre-norm transformer block: attention then MLP, both residual.

    With kv=None the block self-attends over its own normed tokens;
    otherwise it cross-attends against the given tokens.
    """
    normed = _affine_ln(tokens, p.ln1_g, p.ln1_b)
    t = ad.add(tokens, _attention(normed, normed if kv is None else kv,
                                  p, heads, mm=mm))
    h = _affine_ln(t, p.ln2_g, p.ln2_b)
    h = ad.add(mm(ad.relu(ad.add(mm(h, p.mlp_w1), p.mlp_b1)), p.mlp_w2), p.mlp_b2)
    return ad.add(t, h)


def sphere_mapper_forward(cfg: ModelConfig, params: SphereMapperParams,
                          features: Array) -> Tensor:
    """Map an (H, W, C) or (P, C) feature grid to unit sphere points (P, 3).

    Self-attention runs over all pixels of the image; no positional
    encodings, so the map is equivariant to pixel permutations.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 3:
        feats = feats.reshape(-1, feats.shape[-1])
    if feats.ndim != 2 or feats.shape[1] != cfg.channels:
        raise ValueError(
            f"features must have {cfg.channels} channels, got shape {feats.shape}"
        )
    x = Tensor(feats)
    t = ad.add(ad.matmul(x, params.reduce_w), params.reduce_b)
    t = _block(t, params, cfg.heads)
    out = ad.add(ad.matmul(t, params.out_w), params.out_b)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite activations in sphere mapper")
    return ad.l2_normalize_rows(out)


def prototype_query(cfg: ModelConfig, params: PrototypeParams,
                    points, category: str) -> Tensor:
    """Feature vectors (N, C) for N unit sphere points of one category.

    Each row only ever sees its own point plus the category token, so a
    point queried alone yields exactly the same bits as inside any batch.
    ``points`` may be a plain array or a graph Tensor (for training through
    the sphere mapper).
    """
    if isinstance(points, Tensor):
        pts_val = points.value.reshape(-1, 3)
        pts = points
    else:
        pts_val = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        pts = Tensor(pts_val)
    norms = np.linalg.norm(pts_val, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("prototype_query: points must be unit vectors")
    cat_idx = cfg.category_index(category)
    return _prototype_forward(cfg, params, pts, cat_idx)


def _prototype_forward(cfg: ModelConfig, params: PrototypeParams,
                       pts: Tensor, cat_idx: int) -> Tensor:
    """Graph-building core of prototype_query (points may carry gradients)."""
    token = ad.gather_rows(params.cat_embed, np.array([cat_idx]))
    t = ad.add(ad.matmul_rows(pts, params.lift_w), params.lift_b)
    t = _block(t, params, cfg.heads, kv=token, mm=ad.matmul_rows)
    return ad.add(ad.matmul_rows(t, params.out_w), params.out_b)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, cfg: ModelConfig, mapper: SphereMapperParams,
                    proto: PrototypeParams, epoch: int = 0) -> None:
    """Write a versioned binary checkpoint (JSON header + f64 LE weights)."""
    entries = [("mapper." + n, t) for n, t in param_items(mapper)]
    entries += [("prototype." + n, t) for n, t in param_items(proto)]
    header = {
        "channels": cfg.channels,
        "hidden": cfg.hidden,
        "heads": cfg.heads,
        "categories": list(cfg.categories),
        "seed": cfg.seed,
        "epoch": int(epoch),
        "params": [{"name": n, "shape": list(t.value.shape)} for n, t in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, t in entries:
            if not np.all(np.isfinite(t.value)):
                raise FloatingPointError("refusing to checkpoint non-finite weights")
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelConfig, SphereMapperParams,
                                   PrototypeParams, int]:
    """Read a checkpoint; save -> load -> save round-trips bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    cfg = ModelConfig(
        channels=header["channels"],
        hidden=header["hidden"],
        heads=header["heads"],
        categories=tuple(header["categories"]),
        seed=header["seed"],
    )
    values: dict[str, Array] = {}
    offset = 12 + hlen
    for ent in header["params"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated weights for {ent['name']}")
        values[ent["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8"
        ).reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after weights")

    def build(cls, prefix):
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = prefix + f.name
            if key not in values:
                raise CheckpointError(f"{path}: missing parameter {key}")
            kwargs[f.name] = ad.parameter(values[key])
        return cls(**kwargs)

    mapper = build(SphereMapperParams, "mapper.")
    proto = build(PrototypeParams, "prototype.")
    return cfg, mapper, proto, int(header["epoch"])
