"""Visual explanation artifacts: slices, overlays, collages, and reports.

Scores and slice choices are always computed on the native activation grid;
upsampling to the patch grid (trilinear, half-pixel centers) happens only
when rendering. All rasters are pure functions of their inputs, so repeated
exports are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dissection import (
    ActivationVolume,
    CorrelationRanking,
    UnitThresholds,
    load_activation,
    relevance_scores,
)
from .errors import IoFailure, MixedDimensions, SampleMismatch, UnknownSample
from .jsonio import write_json
from .manifest import DatasetIndex, SampleEntry
from .tensor_io import Volume, load_tensor, save_nifti
from .volume_prep import sample_trilinear

AXES = ("sagittal", "coronal", "axial")
DEGENERATE_NOTE = "no statistically significant activations"
COLLAGE_SEPARATOR = 2

# perceptually uniform ramp (viridis anchors at 0.0, 0.1, ..., 1.0)
_RAMP = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.266941, 0.748751, 0.440573),
        (0.477504, 0.821444, 0.318195),
        (0.741388, 0.873449, 0.149561),
        (0.993248, 0.906157, 0.143936),
    ]
)


def axis_index(axis: str) -> int:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    return AXES.index(axis)


@dataclass(frozen=True)
class SliceChoice:
    """Slice with the largest thresholded-activation mass along an axis."""

    axis: str
    index: int  # on the native activation grid
    score: float


def select_slice(
    activation: ActivationVolume,
    unit: int,
    thresholds: UnitThresholds,
    axis: str = "sagittal",
) -> SliceChoice:
    """Pick the slice maximizing the masked activation sum along ``axis``.

    Ties resolve to the lowest index; an all-zero mask yields the middle
    slice with score 0.
    """
    ax = axis_index(axis)
    unit_map = activation.units[unit]
    masked = np.where(unit_map > thresholds.values[unit], unit_map, 0.0)
    sum_axes = tuple(d for d in range(3) if d != ax)
    per_slice = masked.sum(axis=sum_axes, dtype=np.float64)
    if not np.any(per_slice > 0):
        return SliceChoice(axis=axis, index=unit_map.shape[ax] // 2, score=0.0)
    idx = int(np.argmax(per_slice))  # first occurrence: lowest index on ties
    return SliceChoice(axis=axis, index=idx, score=float(per_slice[idx]))


def map_slice_index(index: int, native_size: int, target_size: int) -> int:
    """Carry a slice index between grids using half-pixel voxel centers."""
    x = (index + 0.5) * target_size / native_size - 0.5
    return int(np.clip(np.floor(x + 0.5), 0, target_size - 1))


def upsample_trilinear(volume: np.ndarray, out_shape: tuple[int, int, int]) -> np.ndarray:
    """Resample a 3D map to ``out_shape`` (half-pixel centers, edge clamp)."""
    in_shape = np.array(volume.shape, dtype=np.float64)
    grids = [
        np.clip((np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        for n_out, n_in in zip(out_shape, in_shape)
    ]
    coords = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1)
    return sample_trilinear(volume.astype(np.float64), coords, fill=0.0)


def apply_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities through the perceptual ramp; output float RGB."""
    stops = np.linspace(0.0, 1.0, len(_RAMP))
    flat = np.clip(values, 0.0, 1.0).ravel()
    rgb = np.stack([np.interp(flat, stops, _RAMP[:, c]) for c in range(3)], axis=-1)
    return rgb.reshape(*values.shape, 3)


@dataclass(frozen=True)
class OverlayImage:
    base: np.ndarray  # 2D grayscale patch slice in [0, 1]
    heat: np.ndarray  # 2D activation slice in [0, 1], patch resolution
    alpha: float
    rendered: np.ndarray  # (H, W, 3) uint8


def _take_slice(volume: np.ndarray, axis: str, index: int) -> np.ndarray:
    return np.take(volume, index, axis=axis_index(axis))


def heat_volume(activation: ActivationVolume, unit: int, patch_shape) -> np.ndarray:
    """Unit map upsampled to the patch grid, normalized to [0, 1] by the
    unit's maximum over this sample (an identically zero map stays zero)."""
    unit_map = activation.units[unit]
    upsampled = upsample_trilinear(unit_map, patch_shape)
    peak = float(unit_map.max())
    return upsampled / peak if peak > 0 else np.zeros_like(upsampled)


def _blend(base: np.ndarray, heat: np.ndarray, alpha: float) -> OverlayImage:
    # a pixel's blend weight is alpha * heat: zero heat leaves pure grayscale,
    # saturated heat at alpha 1 is pure colormap
    weight = (alpha * heat)[..., None]
    gray = np.repeat(base[..., None], 3, axis=-1)
    blended = (1.0 - weight) * gray + weight * apply_colormap(heat)
    rendered = np.rint(blended * 255.0).astype(np.uint8)
    return OverlayImage(base=base, heat=heat, alpha=alpha, rendered=rendered)


def render_overlay_at(
    patch: Volume,
    activation: ActivationVolume,
    unit: int,
    axis: str,
    patch_index: int,
    alpha: float = 0.5,
    patch_sample_id: str | None = None,
    heat3d: np.ndarray | None = None,
) -> OverlayImage:
    """Blend a unit's activation heatmap over one patch-grid slice.

    Pass a precomputed ``heat3d`` (see :func:`heat_volume`) when rendering
    many slices of one sample-unit pair.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if patch_sample_id is not None and patch_sample_id != activation.sample_id:
        raise SampleMismatch(
            f"patch belongs to {patch_sample_id!r}, activations to {activation.sample_id!r}"
        )
    if heat3d is None:
        heat3d = heat_volume(activation, unit, patch.shape)
    heat = np.clip(_take_slice(heat3d, axis, patch_index), 0.0, 1.0)
    base = np.clip(_take_slice(patch.data, axis, patch_index), 0.0, 1.0)
    return _blend(base, heat, alpha)


def render_overlay(
    patch: Volume,
    activation: ActivationVolume,
    unit: int,
    thresholds: UnitThresholds,
    choice: SliceChoice,
    alpha: float = 0.5,
    patch_sample_id: str | None = None,
) -> OverlayImage:
    """Render the chosen native slice, carried onto the patch grid."""
    ax = axis_index(choice.axis)
    patch_index = map_slice_index(
        choice.index, activation.units[unit].shape[ax], patch.shape[ax]
    )
    return render_overlay_at(
        patch, activation, unit, choice.axis, patch_index, alpha, patch_sample_id
    )


def render_patch_slice(patch: Volume, axis: str, index: int) -> np.ndarray:
    """Plain grayscale patch slice as uint8."""
    base = np.clip(_take_slice(patch.data, axis, index), 0.0, 1.0)
    return np.rint(base * 255.0).astype(np.uint8)


def build_collage(
    images: list[OverlayImage], rows: int = 5, cols: int = 5
) -> np.ndarray:
    """Row-major grid of rendered overlays with 2-pixel black separators."""
    if len(images) > rows * cols:
        raise ValueError(f"{len(images)} images exceed the {rows}x{cols} grid")
    if images:
        h, w = images[0].rendered.shape[:2]
        for img in images:
            if img.rendered.shape[:2] != (h, w):
                raise MixedDimensions("collage cells must share dimensions")
    else:
        h = w = 96
    sep = COLLAGE_SEPARATOR
    canvas = np.zeros((rows * h + (rows - 1) * sep, cols * w + (cols - 1) * sep, 3), np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = r * (h + sep), c * (w + sep)
        canvas[y : y + h, x : x + w] = img.rendered
    return canvas


def write_png(path: str | Path, raster: np.ndarray) -> None:
    mode = "RGB" if raster.ndim == 3 else "L"
    Image.fromarray(raster, mode=mode).save(str(path), format="PNG")


def top_correlated_units(ranking: CorrelationRanking, n: int = 10) -> list[int]:
    """First ``n`` units in correlation-rank order (fewer if K < n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [int(u) for u in ranking.order[:n]]


def top_activating_samples(
    unit: int,
    dataset: DatasetIndex,
    thresholds: UnitThresholds,
    n: int = 25,
    fractured_only: bool = True,
) -> list[tuple[SampleEntry, float]]:
    """Samples ordered by this unit's inference relevance, strongest first.

    Ties break on ascending sample_id. With ``fractured_only`` only fractured
    samples are considered.
    """
    candidates = dataset.fractured_entries() if fractured_only else dataset.entries
    scored = []
    for entry in candidates:
        activation = load_activation(entry)
        scored.append((entry, float(relevance_scores(activation, thresholds).scores[unit])))
    scored.sort(key=lambda pair: (-pair[1], pair[0].sample_id))
    return scored[:n]


def _load_patch_volume(entry: SampleEntry) -> Volume:
    if entry.patch_file is None:
        raise IoFailure(f"sample {entry.sample_id} has no patch file to render")
    return Volume(data=load_tensor(entry.patch_file), intensity_unit="normalized")


@dataclass(frozen=True)
class UnitBundle:
    unit: int
    correlation_rank: int | None
    degenerate: bool
    collage_path: Path
    sample_dirs: tuple[Path, ...]
    metadata_path: Path


def export_unit_bundle(
    unit: int,
    dataset: DatasetIndex,
    thresholds: UnitThresholds,
    out_dir: str | Path,
    ranking: CorrelationRanking | None = None,
    collage_samples: int = 25,
    export_samples: int = 5,
    axis: str = "sagittal",
    alpha: float = 0.5,
) -> UnitBundle:
    """Export one unit's dataset-wide evidence: collage, slices, volumes.

    Writes ``unit_{k}/collage.png``, and for the strongest ``export_samples``
    samples one overlay PNG per slice along ``axis`` plus the unit map
    upsampled to the patch grid as NIfTI. File layout and bytes are
    deterministic, so re-exporting over an existing directory is a no-op.
    """
    unit_dir = Path(out_dir) / f"unit_{unit:03d}"
    try:
        unit_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {unit_dir}: {exc}") from exc

    ranked = top_activating_samples(unit, dataset, thresholds, n=collage_samples)
    degenerate = not any(score > 0 for _, score in ranked)

    tiles = []
    for entry, _ in ranked:
        activation = load_activation(entry)
        patch = _load_patch_volume(entry)
        choice = select_slice(activation, unit, thresholds, axis)
        tiles.append(
            render_overlay(patch, activation, unit, thresholds, choice, alpha,
                           patch_sample_id=entry.sample_id)
        )
    collage_path = unit_dir / "collage.png"
    write_png(collage_path, build_collage(tiles))

    sample_dirs = []
    sample_meta = []
    for entry, score in ranked[:export_samples]:
        activation = load_activation(entry)
        patch = _load_patch_volume(entry)
        choice = select_slice(activation, unit, thresholds, axis)
        sample_dir = unit_dir / f"sample_{entry.sample_id}"
        sample_dir.mkdir(exist_ok=True)
        upsampled = upsample_trilinear(activation.units[unit], patch.shape)
        peak = float(activation.units[unit].max())
        heat3d = upsampled / peak if peak > 0 else np.zeros_like(upsampled)
        for i in range(patch.shape[axis_index(axis)]):
            overlay = render_overlay_at(
                patch, activation, unit, axis, i, alpha,
                patch_sample_id=entry.sample_id, heat3d=heat3d,
            )
            write_png(sample_dir / f"slice_{i:03d}.png", overlay.rendered)
        save_nifti(
            sample_dir / "activation.nii",
            Volume(
                data=upsampled.astype(np.float32),
                spacing_mm=patch.spacing_mm,
                origin_mm=patch.origin_mm,
                axis_directions=patch.axis_directions,
                intensity_unit="raw",
            ),
        )
        sample_dirs.append(sample_dir)
        sample_meta.append(
            {
                "sample_id": entry.sample_id,
                "relevance": score,
                "slice_index": choice.index,
                "dir": sample_dir.name,
            }
        )

    metadata = {
        "unit": unit,
        "correlation_rank": ranking.rank_of(unit) if ranking is not None else None,
        "axis": axis,
        "degenerate": degenerate,
        "note": DEGENERATE_NOTE if degenerate else None,
        "collage": collage_path.name,
        "collage_sample_ids": [entry.sample_id for entry, _ in ranked],
        "samples": sample_meta,
    }
    metadata_path = unit_dir / "bundle.json"
    write_json(metadata_path, metadata)
    return UnitBundle(
        unit=unit,
        correlation_rank=metadata["correlation_rank"],
        degenerate=degenerate,
        collage_path=collage_path,
        sample_dirs=tuple(sample_dirs),
        metadata_path=metadata_path,
    )


def build_report_rows(
    activation: ActivationVolume,
    thresholds: UnitThresholds,
    ranking: CorrelationRanking,
    n: int = 10,
    axis: str = "sagittal",
) -> list[dict]:
    """Top-n relevance rows for one inference, without rendering."""
    relevance = relevance_scores(activation, thresholds)
    rows = []
    for rank, unit in enumerate(relevance.order[:n], start=1):
        unit = int(unit)
        choice = select_slice(activation, unit, thresholds, axis)
        rows.append(
            {
                "unit": unit,
                "relevance_rank": rank,
                "relevance": float(relevance.scores[unit]),
                "correlation_rank": ranking.rank_of(unit),
                "slice": {"axis": choice.axis, "index": choice.index},
            }
        )
    return rows


@dataclass(frozen=True)
class InferenceReport:
    sample_id: str
    predicted_prob: float | None
    rows: tuple[dict, ...]
    json_path: Path

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "predicted_prob": self.predicted_prob,
            "rows": list(self.rows),
        }


def relevance_payload(
    sample_id: str,
    dataset: DatasetIndex,
    thresholds: UnitThresholds,
    ranking: CorrelationRanking,
    n: int = 10,
    axis: str = "sagittal",
) -> dict:
    """Report rows without rasters; the CLI file and the API body share this."""
    entry = dataset.by_id(sample_id)
    if entry is None:
        raise UnknownSample(f"sample {sample_id!r} not in dataset")
    activation = load_activation(entry)
    return {
        "sample_id": sample_id,
        "rows": build_report_rows(activation, thresholds, ranking, n=n, axis=axis),
    }


def inference_report(
    sample_id: str,
    dataset: DatasetIndex,
    thresholds: UnitThresholds,
    ranking: CorrelationRanking,
    out_dir: str | Path,
    n: int = 10,
    axis: str = "sagittal",
    alpha: float = 0.5,
) -> InferenceReport:
    """Write the single-inference explanation: ranked units with overlays.

    Rows pair each of the sample's ``n`` most relevant units with its
    dataset-wide correlation rank, the high-activation slice, and a rendered
    overlay, mirroring the ranking-strip layout clinicians review.
    """
    entry = dataset.by_id(sample_id)
    if entry is None:
        raise UnknownSample(f"sample {sample_id!r} not in dataset")
    activation = load_activation(entry)
    patch = _load_patch_volume(entry)

    report_dir = Path(out_dir) / f"sample_{sample_id}"
    report_dir.mkdir(parents=True, exist_ok=True)

    rows = build_report_rows(activation, thresholds, ranking, n=n, axis=axis)
    for row in rows:
        choice = SliceChoice(axis=row["slice"]["axis"], index=row["slice"]["index"], score=0.0)
        overlay = render_overlay(
            patch, activation, row["unit"], thresholds, choice, alpha,
            patch_sample_id=entry.sample_id,
        )
        overlay_name = f"unit_{row['unit']:03d}.png"
        write_png(report_dir / overlay_name, overlay.rendered)
        row["overlay"] = overlay_name

    report = InferenceReport(
        sample_id=sample_id,
        predicted_prob=entry.predicted_prob,
        rows=tuple(rows),
        json_path=report_dir / "report.json",
    )
    write_json(report.json_path, report.to_dict())
    return report
