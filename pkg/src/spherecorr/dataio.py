"""File formats and the synthetic world generator.

Feature maps travel in a small binary container (magic ``SCFM``, little
endian, float32 payload, optional byte mask). Keypoint annotations live in
a neutral JSON schema so real datasets can be exported into it; the bundled
generator produces mirror-symmetric synthetic "objects" whose ground-truth
correspondences are known exactly, which is what makes desk-scale
verification of the symmetry-breaking behavior possible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import azimuth_to_bin

Array = np.ndarray

FEATURE_MAGIC = b"SCFM"
FEATURE_VERSION = 1
ANNOTATION_SCHEMA = "spherecorr/annotations/v1"

# fraction of the short image side covered by the projected sphere radius
RENDER_FILL = 0.45


class FormatError(ValueError):
    pass


@dataclass
class DenseFeatureMap:
    """An H x W x C feature grid with an optional foreground byte mask."""

    data: Array  # float32 (H, W, C)
    mask: Array | None = None  # uint8 (H, W) of {0, 1}
    image_id: str = ""
    category: str = ""
    viewpoint_bin: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise FormatError(f"feature grid must be H x W x C, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FormatError("feature grid contains non-finite values")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.data.shape[:2]:
                raise FormatError("mask shape does not match feature grid")
            if not np.isin(self.mask, (0, 1)).all():
                raise FormatError("mask values must be 0 or 1")

    @property
    def shape(self):
        return self.data.shape


def write_feature_map(fmap: DenseFeatureMap, path) -> None:
    """Serialize a feature map; write -> read is bit-exact."""
    h, w, c = fmap.data.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIIIB", FEATURE_VERSION, h, w, c,
                             1 if fmap.mask is not None else 0))
        fh.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())
        if fmap.mask is not None:
            fh.write(fmap.mask.astype(np.uint8).tobytes())


def read_feature_map(path) -> DenseFeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 21 or raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature map file")
    version, h, w, c, has_mask = struct.unpack("<IIIIB", raw[4:21])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(h, w, c) < 1 or h * w * c > 2**31:
        raise FormatError(f"{path}: bad dimensions {h}x{w}x{c}")
    need = 21 + 4 * h * w * c + (h * w if has_mask else 0)
    if len(raw) != need:
        raise FormatError(f"{path}: truncated or oversized payload "
                          f"({len(raw)} bytes, expected {need})")
    data = np.frombuffer(raw[21 : 21 + 4 * h * w * c], dtype="<f4").reshape(h, w, c)
    mask = None
    if has_mask:
        mask = np.frombuffer(raw[21 + 4 * h * w * c :], dtype=np.uint8).reshape(h, w)
    return DenseFeatureMap(data=data.copy(), mask=None if mask is None else mask.copy())


# ---------------------------------------------------------------------------
# synthetic worlds


def _monomial_exponents(max_degree: int = 3) -> list[tuple[int, int, int]]:
    exps = []
    for total in range(max_degree + 1):
        for i in range(total, -1, -1):
            for j in range(total - i, -1, -1):
                exps.append((i, j, total - i - j))
    return exps


MONOMIAL_EXPONENTS = _monomial_exponents()


@dataclass
class SyntheticWorld:
    """A feature function on the unit sphere plus named keypoints.

    The feature function mixes degree <= 3 sphere polynomials into C
    channels. When ``symmetric`` is set, every monomial with an odd power of
    the first coordinate gets a zero coefficient, so features are exactly
    invariant under reflection of that axis -- the classic
    left-side/right-side confusion, by construction.
    """

    seed: int
    channels: int
    symmetric: bool
    coeffs: Array  # (C, n_monomials)
    keypoints: dict[str, Array] = field(default_factory=dict)

    def features_at(self, points) -> Array:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        basis = np.stack(
            [pts[:, 0] ** i * pts[:, 1] ** j * pts[:, 2] ** k
             for i, j, k in MONOMIAL_EXPONENTS],
            axis=1,
        )
        return basis @ self.coeffs.T

    def reflect(self, point) -> Array:
        p = np.asarray(point, dtype=np.float64).copy()
        p[..., 0] = -p[..., 0]
        return p


def generate_world(channels: int, seed: int, symmetric: bool = True,
                   keypoint_count: int = 12) -> SyntheticWorld:
    """Deterministically build a synthetic world from one seed."""
    if channels < 4:
        raise ValueError("need at least 4 feature channels")
    rng = np.random.default_rng(seed)
    n = len(MONOMIAL_EXPONENTS)
    coeffs = rng.normal(size=(channels, n)) / np.sqrt(n)
    if symmetric:
        odd_x = np.array([i % 2 == 1 for i, _, _ in MONOMIAL_EXPONENTS])
        coeffs[:, odd_x] = 0.0
    keypoints: dict[str, Array] = {}
    while len(keypoints) < keypoint_count:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        # keep keypoints away from the symmetry plane and from each other
        if abs(v[0]) < 0.3:
            continue
        if any(float(v @ k) > 0.95 for k in keypoints.values()):
            continue
        keypoints[f"kp_{len(keypoints):02d}"] = v
    return SyntheticWorld(seed=seed, channels=channels, symmetric=symmetric,
                          coeffs=coeffs, keypoints=keypoints)


@dataclass
class ViewAnnotation:
    """Per-view ground truth produced by the renderer."""

    image_id: str
    azimuth: float
    width: int
    height: int
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1
    keypoints: dict[str, tuple[float, float] | None]  # (col, row) or invisible
    mirror_keypoints: dict[str, tuple[float, float] | None]


def _camera_frame(azimuth: float) -> tuple[Array, Array, Array]:
    d = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    right = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    return d, right, up


def surface_grid(azimuth: float, height: int, width: int) -> tuple[Array, Array]:
    """Ground-truth surface point per pixel for an orthographic view.

    Returns the (H, W, 3) unit surface points (arbitrary on background) and
    the (H, W) boolean foreground mask. This is the oracle sphere map the
    learned mapper is trying to recover, up to a global rotation.
    """
    d, right, up = _camera_frame(azimuth)
    scale = RENDER_FILL * min(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    a = (cols - cx) / scale
    b = (cy - rows) / scale
    rho2 = a * a + b * b
    fg = rho2 <= 1.0
    depth = np.sqrt(np.clip(1.0 - rho2, 0.0, None))
    surf = a[..., None] * right + b[..., None] * up + depth[..., None] * d
    surf[~fg] = np.array([0.0, 0.0, 1.0])
    return surf, fg


def render_view(world: SyntheticWorld, azimuth: float, height: int, width: int,
                image_id: str = "") -> tuple[DenseFeatureMap, ViewAnnotation]:
    """Orthographic view of the camera-facing hemisphere.

    Foreground pixels sample the world's feature function at the surface
    point they see; background pixels are masked out and filled with seeded
    noise so foreground/background separation stays a real problem. A
    keypoint is visible exactly when it lies on the facing hemisphere, and
    its projection in any view is the ground-truth correspondence oracle.
    """
    if height < 8 or width < 8:
        raise ValueError("render grid must be at least 8 x 8")
    d, right, up = _camera_frame(azimuth)
    scale = RENDER_FILL * min(height, width)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    surf, fg = surface_grid(azimuth, height, width)

    az_key = int(np.float64(azimuth).view(np.uint64))
    noise_rng = np.random.default_rng(np.random.SeedSequence([world.seed, az_key]))
    feats = noise_rng.normal(size=(height, width, world.channels))
    feats[fg] = world.features_at(surf[fg])

    def project(point) -> tuple[float, float] | None:
        p = np.asarray(point, dtype=np.float64)
        if float(p @ d) < 0.0:
            return None
        return (float(cx + scale * (p @ right)), float(cy - scale * (p @ up)))

    kps = {name: project(p) for name, p in world.keypoints.items()}
    mirrors = {name: project(world.reflect(p)) for name, p in world.keypoints.items()}

    ys, xs = np.nonzero(fg)
    bbox = (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
    fmap = DenseFeatureMap(data=feats.astype(np.float32),
                           mask=fg.astype(np.uint8), image_id=image_id)
    ann = ViewAnnotation(image_id=image_id, azimuth=float(azimuth), width=width,
                         height=height, bbox=bbox, keypoints=kps,
                         mirror_keypoints=mirrors)
    return fmap, ann


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class ImageRecord:
    """One image of a loaded dataset, features upcast to float64."""

    image_id: str
    category: str
    features: Array  # float64 (H, W, C)
    mask: Array | None  # bool (H, W)
    bbox: tuple[float, float, float, float]
    viewpoint_bin: int
    bin_count: int
    keypoints: dict[str, tuple[float, float] | None]
    azimuth: float | None = None
    mirror_keypoints: dict[str, tuple[float, float] | None] | None = None

    @property
    def shape(self):
        return self.features.shape


def _round_pair(loc):
    return None if loc is None else [round(float(loc[0]), 6), round(float(loc[1]), 6)]


def write_dataset(world: SyntheticWorld, azimuths, height: int, width: int,
                  bins: int, out_dir, category: str = "synthetic") -> Path:
    """Render views and write features, annotations, and a checksum manifest."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    images = []
    files: dict[str, str] = {}
    for i, az in enumerate(azimuths):
        image_id = f"view_{i:03d}"
        fmap, ann = render_view(world, az, height, width, image_id=image_id)
        rel = f"features/{image_id}.scfm"
        write_feature_map(fmap, out / rel)
        files[rel] = hashlib.sha256((out / rel).read_bytes()).hexdigest()
        images.append({
            "id": image_id,
            "features": rel,
            "width": width,
            "height": height,
            "bbox": [round(v, 6) for v in ann.bbox],
            "viewpoint_bin": azimuth_to_bin(az, bins),
            "azimuth": round(float(az), 12),
            "keypoints": {k: _round_pair(v) for k, v in ann.keypoints.items()},
            "mirror_keypoints": {k: _round_pair(v)
                                 for k, v in ann.mirror_keypoints.items()},
        })
    annotations = {
        "$schema": ANNOTATION_SCHEMA,
        "category": category,
        "viewpoint_bins": bins,
        "images": images,
    }
    ann_path = out / "annotations.json"
    ann_path.write_text(json.dumps(annotations, indent=1, sort_keys=True))
    files["annotations.json"] = hashlib.sha256(ann_path.read_bytes()).hexdigest()
    manifest = {
        "generator": {
            "seed": world.seed,
            "channels": world.channels,
            "symmetric": world.symmetric,
            "keypoints": len(world.keypoints),
            "views": len(images),
            "height": height,
            "width": width,
            "viewpoint_bins": bins,
        },
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def _check(cond, msg):
    if not cond:
        raise FormatError(msg)


def load_dataset(dataset_dir) -> list[ImageRecord]:
    """Load and validate a dataset directory into image records."""
    root = Path(dataset_dir)
    ann_path = root / "annotations.json"
    _check(ann_path.exists(), f"{root}: missing annotations.json")
    ann = json.loads(ann_path.read_text())
    _check(ann.get("$schema") == ANNOTATION_SCHEMA,
           f"{root}: unsupported annotation schema {ann.get('$schema')!r}")
    bins = int(ann["viewpoint_bins"])
    _check(bins >= 2, "viewpoint_bins must be >= 2")
    category = ann["category"]
    records = []
    for img in ann["images"]:
        rel = img["features"]
        fpath = root / rel
        _check(fpath.exists(), f"{root}: referenced feature file missing: {rel}")
        fmap = read_feature_map(fpath)
        h, w, _ = fmap.shape
        _check((h, w) == (img["height"], img["width"]),
               f"{img['id']}: feature grid {h}x{w} disagrees with annotation")
        bbox = tuple(float(v) for v in img["bbox"])
        _check(bbox[2] > bbox[0] and bbox[3] > bbox[1],
               f"{img['id']}: bbox must have positive area")
        vbin = int(img["viewpoint_bin"])
        _check(0 <= vbin < bins, f"{img['id']}: viewpoint bin {vbin} out of range")
        kps = {}
        for name, loc in img["keypoints"].items():
            if loc is None:
                kps[name] = None
            else:
                c, r = float(loc[0]), float(loc[1])
                _check(-0.5 <= c <= w - 0.5 and -0.5 <= r <= h - 0.5,
                       f"{img['id']}: keypoint {name} outside the image")
                kps[name] = (c, r)
        mirrors = None
        if "mirror_keypoints" in img:
            mirrors = {k: None if v is None else (float(v[0]), float(v[1]))
                       for k, v in img["mirror_keypoints"].items()}
        records.append(ImageRecord(
            image_id=img["id"],
            category=category,
            features=fmap.data.astype(np.float64),
            mask=None if fmap.mask is None else fmap.mask.astype(bool),
            bbox=bbox,
            viewpoint_bin=vbin,
            bin_count=bins,
            keypoints=kps,
            azimuth=img.get("azimuth"),
            mirror_keypoints=mirrors,
        ))
    records.sort(key=lambda r: (r.category, r.image_id))
    return records


def rebin_dataset(dataset_dir, bins: int) -> None:
    """Rewrite a dataset's viewpoint bins from stored azimuths."""
    root = Path(dataset_dir)
    ann = json.loads((root / "annotations.json").read_text())
    for img in ann["images"]:
        if img.get("azimuth") is None:
            raise FormatError(f"{img['id']}: no azimuth stored, cannot re-bin")
        img["viewpoint_bin"] = azimuth_to_bin(float(img["azimuth"]), bins)
    ann["viewpoint_bins"] = bins
    (root / "annotations.json").write_text(json.dumps(ann, indent=1, sort_keys=True))


def convert_external_annotations(pairs_dir, out_dir):
    """Stub documenting how to export SPair-71k-style annotations here.

    The mapping is mechanical: each image becomes one entry of
    ``annotations.json`` with its keypoint dictionary (image coordinates as
    [column, row], ``null`` for invisible keypoints), its object bounding
    box as [x0, y0, x1, y1], and its azimuth bin index plus the dataset's
    bin count under ``viewpoint_bin`` / ``viewpoint_bins``. Dense backbone
    features for each image must be exported separately as ``SCFM`` files
    (float32, channel-last) with the instance mask embedded, and referenced
    by relative path from the annotation entry. Keypoint identifiers must
    agree across images of a category for pairing to work.
    """
    raise NotImplementedError("external dataset conversion is documentation only")
