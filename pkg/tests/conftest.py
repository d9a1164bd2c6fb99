"""Shared fixtures: planted synthetic datasets and hand-built mini datasets."""

from __future__ import annotations

import numpy as np
import pytest

from dissect3d import dissection, synth
from dissect3d.manifest import DatasetIndex, SampleEntry, load_manifest, save_manifest
from dissect3d.tensor_io import save_tensor

PLANTED_UNITS = (3, 11, 17, 24, 29)


def make_dataset(
    root,
    arrays_by_sample: dict[str, np.ndarray],
    fractured: dict[str, bool] | None = None,
    probs: dict[str, float | None] | None = None,
    patches_by_sample: dict[str, np.ndarray] | None = None,
) -> DatasetIndex:
    """Write arrays as NPY files plus a manifest, then load it back."""
    (root / "activations").mkdir(parents=True, exist_ok=True)
    if patches_by_sample:
        (root / "patches").mkdir(exist_ok=True)
    entries = []
    labels = ("T10", "T11", "T12", "L1", "L2", "L3")
    for i, (sample_id, arr) in enumerate(arrays_by_sample.items()):
        save_tensor(root / "activations" / f"{sample_id}.npy", arr)
        patch_path = None
        if patches_by_sample and sample_id in patches_by_sample:
            patch_path = f"patches/{sample_id}.npy"
            save_tensor(root / patch_path, patches_by_sample[sample_id])
        is_pos = fractured.get(sample_id, False) if fractured else False
        prob = probs.get(sample_id) if probs else (0.9 if is_pos else 0.1)
        entries.append(
            SampleEntry(
                sample_id=sample_id,
                vertebra_label=labels[i % len(labels)],
                fractured=is_pos,
                predicted_prob=prob,
                activation_path=f"activations/{sample_id}.npy",
                patch_path=patch_path,
                split="all",
            )
        )
    save_manifest(entries, root / "manifest.jsonl")
    return load_manifest(root / "manifest.jsonl")


@pytest.fixture(scope="session")
def planted(tmp_path_factory):
    """The seeded planted dataset: K=32 units, 16^3 grid, 30+30 samples."""
    root = tmp_path_factory.mktemp("planted")
    spec = synth.PlantSpec(
        unit_count=32,
        spatial_shape=(16, 16, 16),
        positives=30,
        negatives=30,
        planted_units=tuple(synth.PlantedUnit(unit=u) for u in PLANTED_UNITS),
        seed=7,
    )
    dataset, truth = synth.generate(spec, root)
    return spec, dataset, truth


@pytest.fixture(scope="session")
def planted_thresholds(planted):
    _, dataset, _ = planted
    return dissection.fit_thresholds(dataset, q=0.005, estimator="exact")


@pytest.fixture(scope="session")
def planted_oracle(planted):
    _, dataset, _ = planted
    return synth.oracle_dissect(dataset, q=0.005)


@pytest.fixture(scope="session")
def report_corpus(tmp_path_factory):
    """20 samples with 96^3 patches for rendering/report tests (K=8, 12^3)."""
    root = tmp_path_factory.mktemp("report_corpus")
    spec = synth.PlantSpec(
        unit_count=8,
        spatial_shape=(12, 12, 12),
        positives=12,
        negatives=8,
        planted_units=(synth.PlantedUnit(unit=1), synth.PlantedUnit(unit=6)),
        seed=21,
        emit_patches=True,
    )
    dataset, truth = synth.generate(spec, root)
    thresholds = dissection.fit_thresholds(dataset)
    ranking = dissection.correlation_scores(dataset, thresholds)
    return root, dataset, thresholds, ranking
