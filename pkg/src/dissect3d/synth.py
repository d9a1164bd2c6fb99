"""Synthetic datasets with planted concept structure, plus a naive oracle.

The generator makes the "enabled" outcome of every planted unit analytically
certain rather than empirical, by construction:

* Background noise per (sample, unit) is a per-sample level ``lam`` drawn
  from U(0, bg) with a multiplicative ripple, so every background value is
  strictly below ``bg``.
* A planted blob is an additive Gaussian bump with peak ``amp >> bg``
  stamped at an integer voxel. Voxels where the bump alone exceeds
  ``1.25 * bg`` are counted; their dataset-wide total must exceed the
  worst-case exceedance budget ``floor(q * N)``, which pins the unit's
  top-quantile threshold strictly between ``bg`` and ``amp``. Consequently a
  sample enables the unit if and only if it received a blob.

All randomness is counter-based (one Philox stream per sample-unit pair),
so generation order and parallelism cannot change the output bytes.

``oracle_dissect`` re-implements thresholds, masks, enabled sets,
correlation, and relevance with plain Python loops and shares no code with
:mod:`dissect3d.dissection`; it exists purely to cross-check the engine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, TooLarge
from .manifest import DatasetIndex, SampleEntry, save_manifest
from .tensor_io import load_tensor, save_tensor

_BLOB_MARGIN = 1.25  # blob voxels are counted only where bump alone > margin * bg
_ORACLE_LIMIT = 10**8  # max pooled values the in-memory oracle will sort


@dataclass(frozen=True)
class PlantedUnit:
    unit: int
    enable_prob_positive: float = 0.9
    enable_prob_negative: float = 0.05
    blob_radius: float = 1.5  # Gaussian sigma, voxels
    blob_amplitude: float = 50.0


@dataclass(frozen=True)
class PlantSpec:
    unit_count: int
    spatial_shape: tuple[int, int, int]
    positives: int
    negatives: int
    planted_units: tuple[PlantedUnit, ...]
    background_scale: float = 1.0
    seed: int = 0
    quantile_level: float = 0.005
    emit_patches: bool = False
    patch_size: int = 96

    def __post_init__(self):
        object.__setattr__(self, "spatial_shape", tuple(int(d) for d in self.spatial_shape))
        object.__setattr__(self, "planted_units", tuple(self.planted_units))
        if self.unit_count < 1 or len(self.spatial_shape) != 3:
            raise InvalidSpec("need unit_count >= 1 and a 3D spatial shape")
        if any(d < 2 for d in self.spatial_shape):
            raise InvalidSpec("spatial dimensions must be >= 2")
        if self.positives < 0 or self.negatives < 0 or self.positives + self.negatives < 1:
            raise InvalidSpec("need at least one sample")
        units = [p.unit for p in self.planted_units]
        if len(set(units)) != len(units) or any(not 0 <= u < self.unit_count for u in units):
            raise InvalidSpec("planted units must be distinct indices below unit_count")
        for p in self.planted_units:
            if not (0 <= p.enable_prob_positive <= 1 and 0 <= p.enable_prob_negative <= 1):
                raise InvalidSpec("enable probabilities must be in [0, 1]")
            if p.blob_amplitude <= _BLOB_MARGIN * self.background_scale:
                raise InvalidSpec("blob amplitude must clear the background margin")
        if self.background_scale <= 0:
            raise InvalidSpec("background scale must be positive")
        if not 0 < self.quantile_level < 1:
            raise InvalidSpec("quantile level must be in (0, 1)")

    @property
    def sample_count(self) -> int:
        return self.positives + self.negatives

    @classmethod
    def from_dict(cls, payload: dict) -> "PlantSpec":
        planted = tuple(PlantedUnit(**p) for p in payload.get("planted_units", []))
        fields = {k: v for k, v in payload.items() if k != "planted_units"}
        fields["spatial_shape"] = tuple(fields["spatial_shape"])
        return cls(planted_units=planted, **fields)


@dataclass(frozen=True)
class GroundTruth:
    """Exact planted outcomes: which samples enable which planted units."""

    enabled: dict[int, dict[str, bool]]  # unit -> sample_id -> blob present
    positive_numerators: dict[int, int] = field(default_factory=dict)

    def expected_correlation(self, unit: int, positive_count: int) -> float:
        return self.positive_numerators[unit] / positive_count


def _rng_for(seed: int, sample_index: int, stream: int) -> np.random.Generator:
    # one independent Philox stream per (sample, stream); the distinguishing
    # values sit in the high counter words so streams can never collide
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, 0x6469737365637433], dtype=np.uint64)
    counter = np.array([0, 0, sample_index, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _stamp_blob(
    grid: np.ndarray, center: np.ndarray, sigma: float, amplitude: float, margin: float
) -> int:
    """Add a Gaussian bump; return how many voxels the bump alone puts above margin."""
    axes = [np.arange(n, dtype=np.float64) - c for n, c in zip(grid.shape, center)]
    d2 = (
        axes[0][:, None, None] ** 2
        + axes[1][None, :, None] ** 2
        + axes[2][None, None, :] ** 2
    )
    bump = amplitude * np.exp(-d2 / (2.0 * sigma * sigma))
    grid += bump
    return int(np.count_nonzero(bump > margin))


def _phantom_patch(rng: np.random.Generator, size: int, fractured: bool) -> np.ndarray:
    """Ellipsoid vertebra phantom in [0, 1]; positives get a wedge defect."""
    coords = np.stack(
        np.meshgrid(*[np.arange(size, dtype=np.float64) for _ in range(3)], indexing="ij")
    )
    center = size / 2.0 + rng.uniform(-2, 2, size=3)
    semi = np.array([0.30, 0.26, 0.22]) * size * rng.uniform(0.9, 1.1, size=3)
    r2 = sum(((coords[i] - center[i]) / semi[i]) ** 2 for i in range(3))
    patch = np.full((size,) * 3, 0.05)
    patch[r2 <= 1.0] = 0.55
    patch[r2 <= 0.55] = 0.45
    if fractured:
        # wedge: collapse the anterior-superior corner of the body
        slope = rng.uniform(0.5, 1.0)
        depth = rng.uniform(0.15, 0.3) * size
        z = coords[2] - center[2]
        y = coords[1] - center[1]
        wedge = (z > semi[2] - depth + slope * y) & (r2 <= 1.0)
        patch[wedge] = 0.05
    patch += 0.02 * rng.standard_normal((size,) * 3)
    return np.clip(patch, 0.0, 1.0).astype(np.float32)


def generate(spec: PlantSpec, out_dir: str | Path) -> tuple[DatasetIndex, GroundTruth]:
    """Write activations, (optionally) patches, manifest, and ground truth.

    Raises:
        InvalidSpec: parameters cannot guarantee the planted thresholds
            (blob mass under the exceedance budget, or too few voxels).
    """
    out_dir = Path(out_dir)
    (out_dir / "activations").mkdir(parents=True, exist_ok=True)
    if spec.emit_patches:
        (out_dir / "patches").mkdir(parents=True, exist_ok=True)

    shape = spec.spatial_shape
    voxels = math.prod(shape)
    n_total = spec.sample_count * voxels
    budget = math.floor(Fraction(spec.quantile_level) * n_total)
    if spec.sample_count > budget:
        raise InvalidSpec(
            f"{spec.sample_count} samples exceed the exceedance budget {budget}; "
            "grow the spatial shape or the quantile level"
        )

    planted_by_unit = {p.unit: p for p in spec.planted_units}
    bg = spec.background_scale
    margin = _BLOB_MARGIN * bg
    labels = [l for l in ("T1", "T4", "T7", "T10", "T12", "L1", "L3", "L5")]

    enabled: dict[int, dict[str, bool]] = {u: {} for u in planted_by_unit}
    blob_mass: dict[int, int] = {u: 0 for u in planted_by_unit}
    entries: list[SampleEntry] = []

    for idx in range(spec.sample_count):
        fractured = idx < spec.positives
        sample_id = f"v{idx:04d}"
        maps = np.empty((spec.unit_count, *shape), dtype=np.float32)
        for unit in range(spec.unit_count):
            rng = _rng_for(spec.seed, idx, unit)
            lam = rng.uniform(0.0, bg)
            grid = lam * (1.0 - 0.5 * rng.random(shape))
            planted = planted_by_unit.get(unit)
            if planted is not None:
                prob = planted.enable_prob_positive if fractured else planted.enable_prob_negative
                has_blob = bool(rng.random() < prob)
                enabled[unit][sample_id] = has_blob
                if has_blob:
                    center = np.array(
                        [rng.integers(0, n) for n in shape], dtype=np.float64
                    )
                    blob_mass[unit] += _stamp_blob(
                        grid, center, planted.blob_radius, planted.blob_amplitude, margin
                    )
            maps[unit] = grid.astype(np.float32)
        save_tensor(out_dir / "activations" / f"{sample_id}.npy", maps)

        patch_path = None
        if spec.emit_patches:
            patch_rng = _rng_for(spec.seed, idx, spec.unit_count)
            patch = _phantom_patch(patch_rng, spec.patch_size, fractured)
            patch_path = f"patches/{sample_id}.npy"
            save_tensor(out_dir / patch_path, patch)

        entries.append(
            SampleEntry(
                sample_id=sample_id,
                vertebra_label=labels[idx % len(labels)],
                fractured=fractured,
                predicted_prob=0.9 if fractured else 0.1,
                activation_path=f"activations/{sample_id}.npy",
                patch_path=patch_path,
                split="all",
                root=out_dir,
            )
        )

    for unit, mass in blob_mass.items():
        planted_total = sum(enabled[unit].values())
        if planted_total and mass <= budget:
            raise InvalidSpec(
                f"unit {unit}: {mass} blob voxels above margin do not exceed the "
                f"exceedance budget {budget}; enlarge blob_radius or blob_amplitude"
            )

    numerators = {
        unit: sum(
            1
            for entry in entries
            if entry.fractured and enabled[unit].get(entry.sample_id, False)
        )
        for unit in planted_by_unit
    }
    truth = GroundTruth(enabled=enabled, positive_numerators=numerators)

    save_manifest(entries, out_dir / "manifest.jsonl")
    (out_dir / "ground_truth.json").write_text(
        json.dumps(
            {
                "planted": {
                    str(unit): {
                        "enabled": enabled[unit],
                        "positive_numerator": numerators[unit],
                    }
                    for unit in sorted(planted_by_unit)
                }
            },
            indent=2,
        )
        + "\n"
    )
    return DatasetIndex(tuple(entries)), truth


# ---------------------------------------------------------------------------
# naive oracle: same definitions, no shared code with the engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    thresholds: list[float]
    enabled_sets: dict[str, set[int]]
    correlation: dict[str, list[float]]  # policy -> per-unit scores
    relevance: dict[str, list[float]]  # sample_id -> per-unit masked sums


def oracle_dissect(dataset: DatasetIndex, q: float = 0.005) -> OracleResult:
    """Reference dissection by full sort and per-voxel Python loops."""
    per_sample: dict[str, list[list[float]]] = {}
    unit_count = None
    total = 0
    for entry in dataset:
        arr = load_tensor(entry.activation_file)
        if unit_count is None:
            unit_count = arr.shape[0]
        flat = [arr[k].ravel().tolist() for k in range(arr.shape[0])]
        per_sample[entry.sample_id] = flat
        total += arr.size
        if total > _ORACLE_LIMIT:
            raise TooLarge(f"oracle refuses to sort more than {_ORACLE_LIMIT} values")

    thresholds: list[float] = []
    for k in range(unit_count):
        pooled: list[float] = []
        for flat in per_sample.values():
            pooled.extend(flat[k])
        pooled.sort()
        n = len(pooled)
        rank = n - math.floor(Fraction(q) * n)
        thresholds.append(pooled[rank - 1])

    enabled_sets: dict[str, set[int]] = {}
    relevance: dict[str, list[float]] = {}
    for sample_id, flat in per_sample.items():
        fired: set[int] = set()
        sums: list[float] = []
        for k in range(unit_count):
            t = thresholds[k]
            acc = 0.0
            hit = False
            for value in flat[k]:
                if value > t:
                    acc += value
                    hit = True
            sums.append(acc)
            if hit:
                fired.add(k)
        enabled_sets[sample_id] = fired
        relevance[sample_id] = sums

    correlation: dict[str, list[float]] = {}
    for policy in ("gt-positive", "true-positive"):
        positives = [
            e.sample_id
            for e in dataset
            if e.fractured
            and (policy == "gt-positive" or (e.predicted_prob is not None and e.predicted_prob >= 0.5))
        ]
        if positives:
            correlation[policy] = [
                sum(1 for s in positives if k in enabled_sets[s]) / len(positives)
                for k in range(unit_count)
            ]
    return OracleResult(
        thresholds=thresholds,
        enabled_sets=enabled_sets,
        correlation=correlation,
        relevance=relevance,
    )
