"""Optimization loop binding data, models, and losses together.

Minibatches are drawn within one category per step so viewpoint pairs and
the prototype's category token stay coherent. Determinism contract: given
the same config and dataset content, training produces bit-identical
checkpoints, regardless of dataset file ordering (records are sorted and
all randomness flows from the config seed).
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import grad
from .dataio import ImageRecord
from .geometry import viewpoint_vector
from .losses import (LossWeights, orientation_loss, reconstruction_loss,
                     relative_distance_loss, sample_triplets, total_loss,
                     viewpoint_loss)
from .models import ModelConfig, PrototypeParams, SphereMapperParams
from .optim import AdamState, adam_step, clip_global_norm

ABLATABLE = ("vp", "rd", "o")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    triplets_per_image: int = 256
    bins: int = 8
    seed: int = 0
    heads: int = 4
    hidden: int | None = None
    warmup_frac: float = 0.05
    grad_clip: float = 10.0
    checkpoint_every: int = 25
    ablate: tuple[str, ...] = ()
    categories: tuple[str, ...] | None = None
    # matching/eval defaults carried alongside the training knobs
    alpha: float = 0.2
    kappa: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        unknown = set(self.ablate) - set(ABLATABLE)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if "vp" not in self.ablate and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 while the viewpoint "
                              "loss is enabled")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")

    def effective_weights(self) -> LossWeights:
        w = self.weights
        if "rd" in self.ablate:
            w = replace(w, lambda_rd=0.0)
        if "o" in self.ablate:
            w = replace(w, lambda_o=0.0)
        if "vp" in self.ablate:
            w = replace(w, lambda_vp=0.0)
        return w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        d["ablate"] = list(self.ablate)
        d["categories"] = None if self.categories is None else list(self.categories)
        return d


_CONFIG_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "lambda_rd": float,
    "lambda_o": float,
    "lambda_vp": float,
    "margin": float,
    "det_threshold": float,
    "triplets_per_image": int,
    "bins": int,
    "seed": int,
    "heads": int,
    "hidden": int,
    "warmup_frac": float,
    "grad_clip": float,
    "checkpoint_every": int,
    "ablate": list,
    "alpha": float,
    "kappa": float,
}


def config_from_mapping(raw: dict) -> TrainConfig:
    """Build a TrainConfig from flat file keys, rejecting unknown ones."""
    unknown = set(raw) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    weights_kw = {}
    cfg_kw = {}
    for key, value in raw.items():
        caster = _CONFIG_KEYS[key]
        if caster is list:
            value = tuple(str(v) for v in value)
        else:
            value = caster(value)
        if key in ("lambda_rd", "lambda_o", "lambda_vp", "margin", "det_threshold"):
            weights_kw[key] = value
        elif key == "ablate":
            cfg_kw["ablate"] = value
        else:
            cfg_kw[key] = value
    return TrainConfig(weights=LossWeights(**weights_kw), **cfg_kw)


def load_train_config(path) -> TrainConfig:
    """Read a TOML or JSON config file."""
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        raw = json.loads(text)
    else:
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        raw = tomllib.loads(text.decode("utf-8"))
    return config_from_mapping(raw)


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply key=value overrides (strings) against the config schema."""
    merged = {}
    base = config.to_dict()
    weights = base.pop("weights")
    flat = {**{k: v for k, v in base.items() if k not in ("categories",)}, **weights}
    for key, value in overrides.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        caster = _CONFIG_KEYS[key]
        if caster is list:
            merged[key] = [v for v in value.split(",") if v]
        elif caster is int:
            merged[key] = int(value)
        else:
            merged[key] = float(value)
    flat["ablate"] = list(config.ablate)
    flat.update(merged)
    flat = {k: v for k, v in flat.items() if v is not None}
    return config_from_mapping(flat)


@dataclass
class EpochStats:
    epoch: int
    rec: float
    rd: float
    orient: float
    vp: float
    total: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    wall_time: float
    checkpoint_path: str | None
    config: dict


@dataclass
class FitResult:
    model_config: ModelConfig
    mapper: SphereMapperParams
    prototype: PrototypeParams
    report: TrainReport


def _validate_dataset(records: list[ImageRecord], config: TrainConfig) -> None:
    if not records:
        raise TrainingError("dataset is empty")
    channels = {r.features.shape[2] for r in records}
    if len(channels) != 1:
        raise TrainingError(f"inconsistent channel counts in dataset: {channels}")
    for r in records:
        if r.mask is None or not r.mask.any():
            raise TrainingError(f"{r.image_id}: training requires a foreground mask")
        if r.bin_count != config.bins:
            raise TrainingError(
                f"{r.image_id}: dataset uses {r.bin_count} viewpoint bins but the "
                f"config expects {config.bins}; re-bin the dataset first")
    if "vp" not in config.ablate:
        counts: dict[str, int] = {}
        for r in records:
            counts[r.category] = counts.get(r.category, 0) + 1
        lonely = sorted(c for c, n in counts.items() if n < 2)
        if lonely:
            raise TrainingError(
                f"viewpoint loss needs >= 2 images per category; categories "
                f"{lonely} have only one (disable it with ablate=vp)")


def fit(config: TrainConfig, records: list[ImageRecord],
        out_dir=None, log=None) -> FitResult:
    """Train both networks on a loaded dataset.

    Writes a checkpoint every ``checkpoint_every`` epochs plus a final one
    when ``out_dir`` is given. ``log`` receives one progress line per epoch.
    """
    t_start = time.perf_counter()
    records = sorted(records, key=lambda r: (r.category, r.image_id))
    if config.categories is not None:
        keep = set(config.categories)
        records = [r for r in records if r.category in keep]
    _validate_dataset(records, config)
    categories = tuple(sorted({r.category for r in records}))
    channels = records[0].features.shape[2]
    model_cfg, mapper, proto = models.init_params(
        channels,
        hidden=config.hidden,
        heads=config.heads,
        categories=categories,
        seed=config.seed,
    )
    params = models.param_list(mapper, proto)
    adam = AdamState.for_params(params, lr=config.learning_rate)
    weights = config.effective_weights()
    rng = np.random.default_rng(config.seed)

    by_cat: dict[str, list[ImageRecord]] = {}
    for r in records:
        by_cat.setdefault(r.category, []).append(r)
    vp_vectors = {
        r.image_id: viewpoint_vector(r.viewpoint_bin, config.bins).as_array()
        for r in records
    }

    steps_per_epoch = sum(
        int(np.ceil(len(v) / config.batch_size)) for v in by_cat.values()
    )
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = max(1, int(round(config.warmup_frac * total_steps)))

    out_path = None if out_dir is None else Path(out_dir)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    epoch_rows: list[EpochStats] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        n_steps = 0
        for cat in categories:
            cat_records = by_cat[cat]
            order = rng.permutation(len(cat_records))
            for lo in range(0, len(order), config.batch_size):
                batch = [cat_records[i] for i in order[lo : lo + config.batch_size]]
                step += 1
                comps = _loss_components(batch, model_cfg, mapper, proto,
                                         config, vp_vectors, rng, cat)
                try:
                    loss = total_loss(comps["rec"], comps["rd"], comps["o"],
                                      comps["vp"], weights)
                except FloatingPointError as exc:
                    raise TrainingError(
                        f"epoch {epoch} step {step}: {exc}") from exc
                grads = grad(loss, params)
                grads, _ = clip_global_norm(grads, config.grad_clip)
                adam_step(params, grads, adam,
                          lr_scale=min(1.0, step / warmup_steps))
                sums += [float(comps[k].value) for k in ("rec", "rd", "o", "vp")]
                n_steps += 1
        rec, rd, orient, vp = sums / n_steps
        total_val = (rec + weights.lambda_rd * rd
                     + weights.lambda_o * orient
                     + weights.lambda_vp * vp)
        epoch_rows.append(EpochStats(epoch, rec, rd, orient, vp, total_val))
        if log is not None:
            log(f"epoch {epoch:4d}/{config.epochs}  rec {rec:.4f}  rd {rd:.4f}  "
                f"o {orient:.4f}  vp {vp:.4f}  total {total_val:.4f}")
        if out_path is not None and config.checkpoint_every > 0 \
                and epoch % config.checkpoint_every == 0 and epoch < config.epochs:
            models.save_checkpoint(out_path / f"checkpoint_epoch{epoch:04d}.sck",
                                   model_cfg, mapper, proto, epoch=epoch)

    ckpt = None
    if out_path is not None:
        ckpt = out_path / "checkpoint.sck"
        models.save_checkpoint(ckpt, model_cfg, mapper, proto, epoch=config.epochs)
    report = TrainReport(
        epochs=epoch_rows,
        wall_time=time.perf_counter() - t_start,
        checkpoint_path=None if ckpt is None else str(ckpt),
        config=config.to_dict(),
    )
    return FitResult(model_cfg, mapper, proto, report)


def _loss_components(batch, model_cfg, mapper, proto, config, vp_vectors,
                     rng, category):
    """Forward pass and all four component losses for one minibatch."""
    maps = []
    rec_terms = []
    rd_terms = []
    o_terms = []
    vp_entries = []
    for recd in batch:
        h, w, _ = recd.features.shape
        smap = models.sphere_mapper_forward(model_cfg, mapper, recd.features)
        maps.append(smap)
        rec_terms.append(reconstruction_loss(
            recd.features, smap, model_cfg, proto, recd.mask, category))
        triplets = sample_triplets(recd.mask, config.triplets_per_image, rng)
        rd_terms.append(relative_distance_loss(
            triplets, smap, w, config.weights.margin))
        o_terms.append(orientation_loss(
            triplets, smap, w, config.weights.det_threshold).loss)
        vp_entries.append((smap, recd.mask, vp_vectors[recd.image_id]))

    def mean_of(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.scale(acc, 1.0 / len(terms))

    comps = {
        "rec": mean_of(rec_terms),
        "rd": mean_of(rd_terms),
        "o": mean_of(o_terms),
        "vp": (viewpoint_loss(vp_entries) if len(vp_entries) >= 2
               else ad.Tensor(0.0)),
    }
    return comps


def load_checkpoint(path):
    """Re-export of the model checkpoint loader for trainer callers."""
    return models.load_checkpoint(path)
