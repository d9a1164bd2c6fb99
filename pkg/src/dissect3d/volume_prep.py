"""Vertebra patch pipeline: spline-aligned, 1 mm, 96-cube crops.

A crop is taken per vertebra, centered on its centroid, with the patch's
third index axis following the spine (the spline tangent at the centroid),
the second axis the world anterior-posterior direction projected orthogonal
to the tangent, and the first axis their cross product. Intensities are then
clamped to [-1000, 1000] HU and scaled to [0, 1].

The spline through the centroids is a chord-length parameterized
Catmull-Rom: it interpolates every centroid, is C1, and each segment only
depends on its four nearest centroids. Endpoint tangents use one-sided
differences.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateCentroids, LabelNotFound
from .manifest import CERVICAL_LABELS, VERTEBRA_LABELS, DatasetIndex
from .tensor_io import Volume

PATCH_SIZE = 96
PATCH_SPACING_MM = 1.0
FILL_HU = -1000.0
HU_RANGE = (-1000.0, 1000.0)

_AP_WORLD = np.array([0.0, 1.0, 0.0])  # anterior-posterior axis in world coordinates


@dataclass(frozen=True)
class CentroidSet:
    """Vertebral centroids in world millimetres, ordered superior to inferior."""

    labels: tuple[str, ...]
    positions_mm: np.ndarray  # (n, 3)

    def __post_init__(self):
        object.__setattr__(self, "positions_mm", np.asarray(self.positions_mm, dtype=np.float64))
        if len(self.labels) < 2:
            raise ValueError("need at least two centroids")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("centroid labels must be unique")
        unknown = [l for l in self.labels if l not in VERTEBRA_LABELS]
        if unknown:
            raise ValueError(f"unknown vertebra labels: {unknown}")
        if self.positions_mm.shape != (len(self.labels), 3):
            raise ValueError("positions must be an (n, 3) array matching the labels")


def load_centroids(path: str | Path) -> CentroidSet:
    """Read the centroid JSON: {"centroids": [{"label", "position_mm"}, ...]}."""
    payload = json.loads(Path(path).read_text())
    items = payload["centroids"]
    return CentroidSet(
        labels=tuple(item["label"] for item in items),
        positions_mm=np.array([item["position_mm"] for item in items], dtype=np.float64),
    )


@dataclass(frozen=True)
class SpineSpline:
    """C1 cubic interpolant through the centroids (Hermite form per segment)."""

    labels: tuple[str, ...]
    points: np.ndarray  # (n, 3) control points
    params: np.ndarray  # (n,) chord-length parameters
    tangents: np.ndarray  # (n, 3) dP/dt at the control points

    def _segment(self, t: float) -> tuple[int, float, float]:
        i = int(np.clip(np.searchsorted(self.params, t, side="right") - 1, 0, len(self.params) - 2))
        h = self.params[i + 1] - self.params[i]
        s = (t - self.params[i]) / h
        return i, h, s

    def position(self, t: float) -> np.ndarray:
        i, h, s = self._segment(float(t))
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (
            h00 * self.points[i]
            + h10 * h * self.tangents[i]
            + h01 * self.points[i + 1]
            + h11 * h * self.tangents[i + 1]
        )

    def tangent(self, t: float) -> np.ndarray:
        i, h, s = self._segment(float(t))
        d00 = 6 * s**2 - 6 * s
        d10 = 3 * s**2 - 4 * s + 1
        d01 = -6 * s**2 + 6 * s
        d11 = 3 * s**2 - 2 * s
        return (
            d00 / h * self.points[i]
            + d10 * self.tangents[i]
            + d01 / h * self.points[i + 1]
            + d11 * self.tangents[i + 1]
        )

    def param_of_label(self, label: str) -> float:
        try:
            return float(self.params[self.labels.index(label)])
        except ValueError:
            raise LabelNotFound(f"vertebra {label!r} not on the spline") from None


def build_spline(centroids: CentroidSet) -> SpineSpline:
    """Chord-length Catmull-Rom through all centroids.

    Raises:
        DegenerateCentroids: two consecutive centroids coincide, so the
            chord-length parameterization collapses.
    """
    pts = centroids.positions_mm
    gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(gaps < 1e-12):
        raise DegenerateCentroids("consecutive centroids coincide")
    params = np.concatenate([[0.0], np.cumsum(gaps)])

    n = len(pts)
    tangents = np.empty_like(pts)
    tangents[0] = (pts[1] - pts[0]) / (params[1] - params[0])
    tangents[-1] = (pts[-1] - pts[-2]) / (params[-1] - params[-2])
    for i in range(1, n - 1):
        tangents[i] = (pts[i + 1] - pts[i - 1]) / (params[i + 1] - params[i - 1])
    if np.any(np.linalg.norm(tangents, axis=1) < 1e-12):
        # a centroid's neighbors coincide, so the spine folds back on itself
        raise DegenerateCentroids("zero tangent at a control point")

    return SpineSpline(labels=centroids.labels, points=pts, params=params, tangents=tangents)


def sample_trilinear(data: np.ndarray, coords: np.ndarray, fill: float) -> np.ndarray:
    """Trilinear interpolation at fractional voxel indices.

    ``coords`` is (..., 3); points with any coordinate outside [0, n-1] get
    ``fill`` (no partial blending, so out-of-volume regions are uniform).
    """
    shape = np.array(data.shape)
    coords = np.asarray(coords, dtype=np.float64)
    inside = np.all((coords >= 0) & (coords <= shape - 1), axis=-1)

    base = np.clip(np.floor(coords).astype(np.int64), 0, shape - 2)
    frac = coords - base
    i0, j0, k0 = base[..., 0], base[..., 1], base[..., 2]
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]

    c000 = data[i0, j0, k0]
    c100 = data[i0 + 1, j0, k0]
    c010 = data[i0, j0 + 1, k0]
    c110 = data[i0 + 1, j0 + 1, k0]
    c001 = data[i0, j0, k0 + 1]
    c101 = data[i0 + 1, j0, k0 + 1]
    c011 = data[i0, j0 + 1, k0 + 1]
    c111 = data[i0 + 1, j0 + 1, k0 + 1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return np.where(inside, out, fill)


def patch_frame(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal patch axes (u, v, w) from a spine tangent.

    w follows the spine, v is the world AP axis projected orthogonal to w,
    u = v x w. If the tangent is (nearly) parallel to the AP axis the frame
    is completed from an arbitrary orthogonal direction, with a warning.
    """
    w = np.asarray(tangent, dtype=np.float64)
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        raise DegenerateCentroids("zero-length spine tangent")
    w = w / norm
    v = _AP_WORLD - (_AP_WORLD @ w) * w
    vnorm = np.linalg.norm(v)
    if vnorm < 1e-6:
        warnings.warn(
            "spine tangent is parallel to the AP axis; using an arbitrary in-plane frame",
            stacklevel=2,
        )
        seed = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        v = seed - (seed @ w) * w
        vnorm = np.linalg.norm(v)
    v = v / vnorm
    u = np.cross(v, w)
    return u, v, w


def extract_patch(
    volume: Volume,
    spline: SpineSpline,
    target: str,
    size: int = PATCH_SIZE,
    spacing_mm: float = PATCH_SPACING_MM,
) -> Volume:
    """Crop an oriented cube of raw HU values around one vertebra.

    The grid is centered at the target centroid (center voxel ``size // 2``)
    and sampled trilinearly from the source; points outside the source get
    the air value -1000 HU.
    """
    t = spline.param_of_label(target)
    center = spline.position(t)
    u, v, w = patch_frame(spline.tangent(t))

    offsets = (np.arange(size, dtype=np.float64) - size // 2) * spacing_mm
    oi, oj, ok = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    world = (
        center
        + oi[..., None] * u
        + oj[..., None] * v
        + ok[..., None] * w
    )
    coords = volume.world_to_index(world.reshape(-1, 3)).reshape(size, size, size, 3)
    values = sample_trilinear(volume.data.astype(np.float64), coords, fill=FILL_HU)

    origin = center - size // 2 * spacing_mm * (u + v + w)
    return Volume(
        data=values.astype(np.float32),
        spacing_mm=(spacing_mm,) * 3,
        origin_mm=origin,
        axis_directions=np.column_stack([u, v, w]),
        intensity_unit="HU",
    )


def normalize_hu_values(values: np.ndarray) -> np.ndarray:
    """Clamp to [-1000, 1000] HU then scale to [0, 1]; monotone non-decreasing."""
    lo, hi = HU_RANGE
    return (np.clip(values, lo, hi) - lo) / (hi - lo)


@dataclass(frozen=True)
class PatchVolume:
    """Normalized, network-ready patch: 96-cube, 1 mm, intensities in [0, 1]."""

    volume: Volume
    sample_id: str
    vertebra_label: str

    def __post_init__(self):
        v = self.volume
        if v.shape != (PATCH_SIZE,) * 3:
            raise ValueError(f"patch must be {PATCH_SIZE}^3, got {v.shape}")
        if not np.allclose(v.spacing_mm, PATCH_SPACING_MM):
            raise ValueError("patch spacing must be 1 mm")
        if v.intensity_unit != "normalized":
            raise ValueError("patch intensities must be normalized")
        if float(v.data.min()) < 0.0 or float(v.data.max()) > 1.0:
            raise ValueError("patch intensities must lie in [0, 1]")


def normalize_hu(raw: Volume, sample_id: str, vertebra_label: str) -> PatchVolume:
    """Normalize a raw HU patch into a :class:`PatchVolume`."""
    normalized = Volume(
        data=normalize_hu_values(raw.data.astype(np.float64)).astype(np.float32),
        spacing_mm=raw.spacing_mm,
        origin_mm=raw.origin_mm,
        axis_directions=raw.axis_directions,
        intensity_unit="normalized",
    )
    return PatchVolume(volume=normalized, sample_id=sample_id, vertebra_label=vertebra_label)


def filter_vertebrae(index: DatasetIndex) -> DatasetIndex:
    """Drop cervical (C1-C7) entries, keeping the original order. Idempotent."""
    return DatasetIndex(
        tuple(e for e in index.entries if e.vertebra_label not in CERVICAL_LABELS)
    )
