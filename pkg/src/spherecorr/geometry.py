"""Sphere geometry: cosine distance, mean direction, tangent frames,
oriented determinants, and azimuth viewpoint bins.

Everything here is a pure numpy function; the differentiable counterparts
used inside the losses are composed from autodiff ops in ``losses``. Pixel
coordinates are (column, row) with row increasing downward, and both the
image and sphere determinants are computed on unit-normalized difference
vectors so one threshold can gate them both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

DEGENERATE_EPS = 1e-9


class DegenerateTripletError(ValueError):
    """Raised when a triplet has no usable tangent frame."""


def cosine_distance(u: Array, v: Array) -> float:
    """1 - cos(u, v); 0 for aligned, 1 for orthogonal, 2 for antipodal."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-15 or nv < 1e-15:
        raise ValueError("cosine_distance: zero-norm input")
    return float(1.0 - (u @ v) / (nu * nv))


def mean_direction(sphere_map: Array, mask: Array | None = None) -> Array:
    """Arithmetic mean of the unit vectors of a sphere map.

    ``sphere_map`` is (H, W, 3) or (N, 3). With a mask, only pixels where the
    mask is nonzero participate; the result's norm is at most 1.
    """
    pts = np.asarray(sphere_map, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        sel = np.asarray(mask).reshape(-1).astype(bool)
        if not sel.any():
            raise ValueError("mean_direction: empty mask")
        pts = pts[sel]
    if pts.shape[0] == 0:
        raise ValueError("mean_direction: no pixels")
    return pts.mean(axis=0)


def tangent_project(s_a: Array, s_b: Array) -> Array:
    """Project s_b into the plane tangent to the sphere at s_a.

    Returns u_b = s_b - (s_a . s_b) s_a, which is orthogonal to s_a. The
    result is the zero vector when s_b is (anti)parallel to s_a; callers
    decide whether that is degenerate.
    """
    s_a = np.asarray(s_a, dtype=np.float64)
    s_b = np.asarray(s_b, dtype=np.float64)
    return s_b - (s_a @ s_b) * s_a


def sphere_determinant(s_a: Array, s_b: Array, s_c: Array) -> float:
    """Signed orientation of a sphere triplet in the tangent plane at s_a.

    Both projected vectors are unit-normalized first, so the value is the
    sine of their signed angle, in [-1, 1]. Positive means (u_b, u_c) wind
    counter-clockwise around the outward normal s_a.
    """
    u_b = tangent_project(s_a, s_b)
    u_c = tangent_project(s_a, s_c)
    nb = np.linalg.norm(u_b)
    nc = np.linalg.norm(u_c)
    if nb < DEGENERATE_EPS or nc < DEGENERATE_EPS:
        raise DegenerateTripletError("sphere triplet collapses in the tangent plane")
    hat_b = u_b / nb
    hat_c = u_c / nc
    if np.linalg.norm(hat_b - hat_c) < DEGENERATE_EPS:
        raise DegenerateTripletError("coincident projected directions")
    return float(np.cross(hat_b, hat_c) @ np.asarray(s_a, dtype=np.float64))


def image_determinant(a, b, c) -> float:
    """Signed orientation of an image triplet, scale and translation free.

    Points are (column, row) with row growing downward. The two difference
    vectors are unit-normalized before the 2x2 determinant, so the result is
    the sine of the signed angle between them, in [-1, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(b, dtype=np.float64) - a
    v = np.asarray(c, dtype=np.float64) - a
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-15 or nv < 1e-15:
        raise ValueError("image_determinant: coincident points")
    u /= nu
    v /= nv
    return float(u[0] * v[1] - u[1] * v[0])


def image_determinant_batch(a: Array, b: Array, c: Array) -> Array:
    """Vectorized image_determinant over (N, 2) point arrays."""
    a = np.asarray(a, dtype=np.float64)
    u = np.asarray(b, dtype=np.float64) - a
    v = np.asarray(c, dtype=np.float64) - a
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if np.any(nu < 1e-15) or np.any(nv < 1e-15):
        raise ValueError("image_determinant: coincident points")
    u = u / nu[:, None]
    v = v / nv[:, None]
    return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]


@dataclass(frozen=True)
class ViewpointVector:
    """Unit azimuth vector standing in for a coarse viewpoint bin."""

    coords: tuple[float, float, float]
    bin: int
    bin_count: int

    def as_array(self) -> Array:
        return np.array(self.coords, dtype=np.float64)


def viewpoint_vector(bin_index: int, bin_count: int) -> ViewpointVector:
    """Unit vector at the center azimuth of a viewpoint bin.

    With K bins covering [0, 2pi), bin b is represented by the azimuth
    2pi (b + 0.5) / K; the third coordinate is zero (azimuth-only poses).
    """
    if bin_count < 2:
        raise ValueError("need at least 2 viewpoint bins")
    if not 0 <= bin_index < bin_count:
        raise ValueError(f"bin {bin_index} out of range for K={bin_count}")
    theta = 2.0 * np.pi * (bin_index + 0.5) / bin_count
    return ViewpointVector(
        coords=(float(np.cos(theta)), float(np.sin(theta)), 0.0),
        bin=bin_index,
        bin_count=bin_count,
    )


def azimuth_to_bin(azimuth: float, bin_count: int) -> int:
    """Bin index of an azimuth angle (radians, wrapped into [0, 2pi))."""
    if bin_count < 2:
        raise ValueError("need at least 2 viewpoint bins")
    wrapped = float(azimuth) % (2.0 * np.pi)
    return min(int(wrapped / (2.0 * np.pi / bin_count)), bin_count - 1)


def random_rotation(rng: np.random.Generator) -> Array:
    """Uniform-ish random 3x3 rotation (QR of a Gaussian matrix, det +1)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
