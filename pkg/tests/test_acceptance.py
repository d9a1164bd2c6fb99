"""Acceptance criteria, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line per
criterion. Every expected value is either hand-derivable, produced by an
independent oracle (full sort, per-voxel loops, pair counting), or checked
against analytic ground truth.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import make_dataset
from dissect3d import cli
from dissect3d import dissection as dc
from dissect3d import report as rp
from dissect3d import synth
from dissect3d import tensor_io as tio
from dissect3d import volume_prep as vp
from dissect3d.errors import FormatError
from dissect3d.jsonio import write_json
from dissect3d.tensor_io import Volume


def _pass(name: str) -> None:
    print(f"\n[ACCEPTANCE] {name}: PASS")


# --------------------------------------------------------------------------
# 1. Threshold exactness
# --------------------------------------------------------------------------


def test_threshold_exactness(planted, planted_oracle):
    _, dataset, _ = planted
    started = time.perf_counter()
    thresholds = dc.fit_thresholds(dataset, q=0.005, estimator="exact")
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"exact fit took {elapsed:.2f}s"

    assert thresholds.unit_count == 32
    assert thresholds.values.tolist() == planted_oracle.thresholds  # bit-for-bit

    for k in range(thresholds.unit_count):
        pooled = np.concatenate(
            [dc.load_activation(e).units[k].ravel() for e in dataset]
        )
        exceedance = float(np.mean(pooled > thresholds.values[k]))
        assert exceedance <= 0.005, f"unit {k} exceedance {exceedance}"
    _pass(f"threshold exactness (32 units, runtime {elapsed:.2f}s)")


# --------------------------------------------------------------------------
# 2. Streaming bound on a 1e7-value-per-unit stress set
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def stress_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("stress")
    units, shape, samples = 4, (64, 64, 64), 40  # 40 * 64^3 = 10,485,760 per unit
    arrays = {}
    for i in range(samples):
        rng = np.random.default_rng([1234, i])
        arrays[f"s{i:03d}"] = rng.standard_normal((units, *shape)).astype(np.float32)
    return make_dataset(root, arrays), arrays


def test_streaming_bound(stress_dataset):
    dataset, arrays = stress_dataset
    q = 0.005
    started = time.perf_counter()
    streaming = dc.fit_thresholds(dataset, q=q, estimator="streaming", workers=4)
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0, f"streaming fit took {elapsed:.2f}s"

    n = int(streaming.population_count[0])
    assert n >= 10_000_000
    target = dc.nearest_rank(n, q)
    for k in range(streaming.unit_count):
        pooled = np.sort(np.concatenate([a[k].ravel() for a in arrays.values()]))
        value = streaming.values[k]
        lo = int(np.searchsorted(pooled, value, side="left")) + 1
        hi = int(np.searchsorted(pooled, value, side="right"))
        distance = 0 if lo <= target <= hi else min(abs(target - lo), abs(target - hi))
        assert distance <= 1e-3 * n, f"unit {k} rank distance {distance}"
    _pass(f"streaming bound (n={n} per unit, runtime {elapsed:.2f}s)")


# --------------------------------------------------------------------------
# 3. Eq-1-style correlation: oracle equivalence under both policies
# --------------------------------------------------------------------------


def test_correlation_oracle_equivalence(planted, planted_thresholds, planted_oracle):
    _, dataset, _ = planted
    for policy in dc.POLICIES:
        ranking = dc.correlation_scores(dataset, planted_thresholds, policy)
        assert ranking.scores.tolist() == planted_oracle.correlation[policy], policy
    _pass("correlation scores equal oracle counting under both policies")


# --------------------------------------------------------------------------
# 4. Eq-2-style relevance: naive masked sums on 100 random samples
# --------------------------------------------------------------------------


def test_relevance_oracle_equivalence(tmp_path):
    rng = np.random.default_rng(77)
    arrays = {
        f"r{i:03d}": rng.uniform(0, 1, size=(8, 8, 8, 8)).astype(np.float32)
        for i in range(100)
    }
    dataset = make_dataset(tmp_path, arrays)
    thresholds = dc.fit_thresholds(dataset, q=0.005)

    for entry in dataset:
        activation = dc.load_activation(entry)
        ranking = dc.relevance_scores(activation, thresholds)
        naive = []
        for k in range(8):
            total = 0.0
            for value in activation.units[k].ravel().tolist():
                if value > thresholds.values[k]:
                    total += value
            naive.append(total)
        for k in range(8):
            assert ranking.scores[k] == pytest.approx(naive[k], rel=1e-5)
        naive_order = sorted(range(8), key=lambda k: (-naive[k], k))
        assert ranking.order.tolist() == naive_order
    _pass("relevance equals naive masked sums on 100 samples, identical order")


# --------------------------------------------------------------------------
# 5. Planted-concept recovery over 20 fixed seeds
# --------------------------------------------------------------------------


def test_planted_concept_recovery(tmp_path):
    planted_set = (7, 19, 33, 46, 58)
    for seed in range(100, 120):
        spec = synth.PlantSpec(
            unit_count=64,
            spatial_shape=(12, 12, 12),
            positives=24,
            negatives=16,
            planted_units=tuple(
                synth.PlantedUnit(unit=u, enable_prob_positive=0.9,
                                  enable_prob_negative=0.05)
                for u in planted_set
            ),
            seed=seed,
        )
        dataset, truth = synth.generate(spec, tmp_path / f"seed_{seed}")
        thresholds = dc.fit_thresholds(dataset)
        ranking = dc.correlation_scores(dataset, thresholds)
        top5 = {int(u) for u in ranking.order[:5]}
        assert top5 == set(planted_set), f"seed {seed}: top5 {sorted(top5)}"
        for unit in planted_set:
            assert ranking.scores[unit] == truth.expected_correlation(
                unit, ranking.positive_count
            ), f"seed {seed} unit {unit}"
    _pass("planted units occupy the top-5 ranks for all 20 seeds")


# --------------------------------------------------------------------------
# 6. Monotone-transform invariance
# --------------------------------------------------------------------------


def test_monotone_transform_invariance(tmp_path):
    rng = np.random.default_rng(123)
    arrays = {f"s{i}": rng.uniform(1.0, 2.0, size=(6, 8, 8, 8)) for i in range(10)}
    fractured = {f"s{i}": i < 5 for i in range(10)}
    unit = 2

    base = make_dataset(tmp_path / "base", arrays, fractured=fractured)
    cubed = make_dataset(
        tmp_path / "cubed",
        {
            sid: np.concatenate([arr[:unit], arr[unit : unit + 1] ** 3, arr[unit + 1 :]])
            for sid, arr in arrays.items()
        },
        fractured=fractured,
    )
    t_base = dc.fit_thresholds(base)
    t_cubed = dc.fit_thresholds(cubed)
    for e_base, e_cubed in zip(base.entries, cubed.entries):
        enabled_base = dc.enabled_units(dc.binarize(dc.load_activation(e_base), t_base))
        enabled_cubed = dc.enabled_units(dc.binarize(dc.load_activation(e_cubed), t_cubed))
        assert (unit in enabled_base.units) == (unit in enabled_cubed.units)
    c_base = dc.correlation_scores(base, t_base)
    c_cubed = dc.correlation_scores(cubed, t_cubed)
    assert np.array_equal(c_base.scores, c_cubed.scores)
    _pass("cubing one unit's activations changes no membership, no score")


# --------------------------------------------------------------------------
# 7. Preprocessing identity
# --------------------------------------------------------------------------


def test_preprocessing_identity():
    # (a) axis-aligned integer-translation extraction is exact
    rng = np.random.default_rng(31)
    volume = Volume(
        data=rng.uniform(-800, 900, (40, 40, 40)).astype(np.float32),
        intensity_unit="HU",
    )
    spline = vp.build_spline(
        vp.CentroidSet(
            labels=("T5", "T6"),
            positions_mm=np.array([[20.0, 20.0, 28.0], [20.0, 20.0, 12.0]]),
        )
    )
    patch = vp.extract_patch(volume, spline, "T6", size=16)
    u, v, w = vp.patch_frame(spline.tangent(spline.param_of_label("T6")))
    offsets = np.meshgrid(*(np.arange(16) - 8,) * 3, indexing="ij")
    world = (
        np.array([20.0, 20.0, 12.0])
        + offsets[0][..., None] * u
        + offsets[1][..., None] * v
        + offsets[2][..., None] * w
    )
    src = np.rint(world).astype(int)
    inside = ((src >= 0) & (src < 40)).all(axis=-1)
    clipped = np.clip(src, 0, 39)
    expected = np.where(
        inside, volume.data[clipped[..., 0], clipped[..., 1], clipped[..., 2]], -1000.0
    ).astype(np.float32)
    assert np.array_equal(patch.data, expected)

    # (b) HU normalization anchors
    anchors = vp.normalize_hu_values(np.array([-1500.0, -1000.0, 0.0, 1000.0, 2000.0]))
    assert anchors.tolist() == [0.0, 0.0, 0.5, 1.0, 1.0]

    # (c) rotated smooth phantom within 1% of analytic values
    def phantom(points):
        return 500.0 * np.sin(points[..., 0] / 17.0) * np.cos(points[..., 1] / 23.0) \
            + 200.0 * np.sin(points[..., 2] / 29.0)

    angle = np.deg2rad(30)
    rot = np.array(
        [[1, 0, 0], [0, np.cos(angle), -np.sin(angle)], [0, np.sin(angle), np.cos(angle)]]
    )
    n = 80
    idx = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1)
    origin = np.array([-40.0, -40.0, -40.0])
    world = (rot @ (idx + origin).reshape(-1, 3).T).T.reshape(n, n, n, 3)
    rotated_volume = Volume(
        data=phantom(world).astype(np.float32),
        origin_mm=rot @ origin,
        axis_directions=rot,
        intensity_unit="HU",
    )
    # off-grid centroid so sampling genuinely interpolates
    base_centroids = np.array([[0.4, -0.3, 12.6], [0.4, -0.3, -11.4]])
    rot_spline = vp.build_spline(
        vp.CentroidSet(labels=("T5", "T6"), positions_mm=(rot @ base_centroids.T).T)
    )
    rot_patch = vp.extract_patch(rotated_volume, rot_spline, "T6", size=32)
    pu, pv, pw = vp.patch_frame(rot_spline.tangent(rot_spline.param_of_label("T6")))
    offs = np.arange(32) - 16
    grid = np.meshgrid(offs, offs, offs, indexing="ij")
    points = (
        rot @ base_centroids[1]
        + grid[0][..., None] * pu
        + grid[1][..., None] * pv
        + grid[2][..., None] * pw
    )
    analytic = phantom(points)
    dynamic_range = analytic.max() - analytic.min()
    max_err = float(np.max(np.abs(rot_patch.data - analytic)))
    assert max_err <= 0.01 * dynamic_range, f"max error {max_err}"
    _pass(f"preprocessing identity (rotated-phantom max err {max_err:.3f} HU)")


# --------------------------------------------------------------------------
# 8. Format round-trips and fuzz totality
# --------------------------------------------------------------------------


def test_format_roundtrips():
    rng = np.random.default_rng(41)

    # NPY fixtures across dtypes and ranks
    for dtype in (np.float32, np.float64, np.int16):
        for shape in [(3,), (2, 5), (3, 4, 5), (2, 3, 4, 5)]:
            tensor = rng.uniform(-500, 500, size=shape).astype(dtype)
            again = tio.read_tensor(tio.write_tensor(tensor))
            assert again.dtype == np.dtype(dtype) and np.array_equal(again, tensor)

    # NIfTI fixtures: identity and rotated/anisotropic geometry
    angle = np.deg2rad(20)
    rot = np.array(
        [[np.cos(angle), -np.sin(angle), 0], [np.sin(angle), np.cos(angle), 0], [0, 0, 1]]
    )
    for volume in (
        Volume(data=rng.uniform(-1000, 1000, (4, 4, 4)).astype(np.float32),
               intensity_unit="HU"),
        Volume(
            data=rng.uniform(-1000, 1000, (3, 5, 7)).astype(np.float32),
            spacing_mm=(1.0, 1.0, 3.0),
            origin_mm=(5.0, -2.0, 11.0),
            axis_directions=rot,
            intensity_unit="HU",
        ),
    ):
        again = tio.read_nifti(tio.write_nifti(volume))
        assert np.array_equal(again.data, volume.data)
        assert np.allclose(again.spacing_mm, volume.spacing_mm, atol=1e-5)
        assert np.allclose(again.origin_mm, volume.origin_mm, atol=1e-5)
        assert np.allclose(again.axis_directions, volume.axis_directions, atol=1e-5)

    # fuzz: random blobs and mutated valid files never escape typed errors
    valid_npy = tio.write_tensor(rng.normal(size=(4, 4)).astype(np.float32))
    valid_nifti = tio.write_nifti(
        Volume(data=rng.normal(size=(3, 3, 3)).astype(np.float32), intensity_unit="HU")
    )
    attempts = 0
    for trial in range(400):
        blob = rng.bytes(int(rng.integers(0, 600)))
        for parser in (tio.read_tensor, tio.read_nifti):
            attempts += 1
            try:
                parser(blob)
            except FormatError:
                pass
        for template, parser in ((valid_npy, tio.read_tensor), (valid_nifti, tio.read_nifti)):
            mutated = bytearray(template)
            mutated[int(rng.integers(0, len(mutated)))] = int(rng.integers(0, 256))
            attempts += 1
            try:
                parser(bytes(mutated))
            except FormatError:
                pass
    _pass(f"format round-trips plus {attempts} fuzz inputs, all typed")


# --------------------------------------------------------------------------
# 9. Report consistency on 20 synthetic samples
# --------------------------------------------------------------------------


def test_report_consistency(report_corpus, tmp_path):
    _, dataset, thresholds, ranking = report_corpus
    assert len(dataset) == 20

    # independent correlation-rank table: sort (-score, unit) and invert
    independent_corr = sorted(range(ranking.unit_count),
                              key=lambda k: (-ranking.scores[k], k))
    corr_rank_of = {unit: i + 1 for i, unit in enumerate(independent_corr)}

    for entry in dataset:
        result = rp.inference_report(
            entry.sample_id, dataset, thresholds, ranking, tmp_path, n=8
        )
        payload = json.loads(result.json_path.read_text())
        activation = dc.load_activation(entry)

        # independent relevance recomputation: masked sums then resort
        naive = []
        for k in range(activation.unit_count):
            unit_map = activation.units[k]
            naive.append(
                float(unit_map[unit_map > thresholds.values[k]].sum(dtype=np.float64))
            )
        independent_rel = sorted(range(len(naive)), key=lambda k: (-naive[k], k))

        for i, row in enumerate(payload["rows"]):
            assert set(row) == {
                "unit", "relevance_rank", "relevance", "correlation_rank",
                "slice", "overlay",
            }
            assert row["relevance_rank"] == i + 1
            assert row["unit"] == independent_rel[i]
            assert row["correlation_rank"] == corr_rank_of[row["unit"]]

            # slice choice equals exhaustive per-slice search
            axis = rp.AXES.index(row["slice"]["axis"])
            unit_map = activation.units[row["unit"]]
            masked = np.where(
                unit_map > thresholds.values[row["unit"]], unit_map, 0.0
            )
            sums = [
                float(np.take(masked, s, axis=axis).sum(dtype=np.float64))
                for s in range(unit_map.shape[axis])
            ]
            if max(sums) > 0:
                assert row["slice"]["index"] == int(np.argmax(sums))
            else:
                assert row["slice"]["index"] == unit_map.shape[axis] // 2
    _pass("inference reports consistent with recomputed rankings on 20 samples")


# --------------------------------------------------------------------------
# 10. Metrics sanity
# --------------------------------------------------------------------------


def test_metrics_sanity(tmp_path):
    def dataset_for(labels, probs, where):
        arrays = {f"s{i}": np.zeros((1, 2, 2, 2), np.float32) for i in range(len(labels))}
        return make_dataset(
            tmp_path / where,
            arrays,
            fractured={f"s{i}": bool(y) for i, y in enumerate(labels)},
            probs={f"s{i}": p for i, p in enumerate(probs)},
        )

    four = dataset_for([1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1], "four")
    metrics = dc.compute_metrics(four)
    assert metrics.auc == pytest.approx(0.75, abs=1e-12)

    perfect = dataset_for([1, 1, 0, 0], [1.0, 0.9, 0.1, 0.0], "perfect")
    m = dc.compute_metrics(perfect)
    assert (m.f1, m.accuracy, m.auc, m.average_precision) == (1.0, 1.0, 1.0, 1.0)
    _pass("metrics reproduce AUC=0.75 fixture and perfect-prediction 1.0s")


# --------------------------------------------------------------------------
# 11. Determinism of CLI artifacts across runs and worker counts
# --------------------------------------------------------------------------


def _digest_tree(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_determinism(planted, report_corpus, tmp_path):
    _, dataset, _ = planted
    manifest = dataset.entries[0].root / "manifest.jsonl"
    runner = CliRunner()

    def fit(out, estimator, workers):
        result = runner.invoke(
            cli.dissect,
            ["fit", "--manifest", str(manifest), "--estimator", estimator,
             "--workers", str(workers), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        return out.read_bytes()

    for estimator in ("exact", "streaming"):
        run1 = fit(tmp_path / f"{estimator}_1.json", estimator, 1)
        run1_again = fit(tmp_path / f"{estimator}_1b.json", estimator, 1)
        run8 = fit(tmp_path / f"{estimator}_8.json", estimator, 8)
        assert run1 == run1_again, f"{estimator}: rerun differs"
        assert run1 == run8, f"{estimator}: worker count changed bytes"

    def correlate(out):
        result = runner.invoke(
            cli.dissect,
            ["correlate", "--manifest", str(manifest),
             "--thresholds", str(tmp_path / "exact_1.json"), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        return out.read_bytes()

    assert correlate(tmp_path / "rank_a.json") == correlate(tmp_path / "rank_b.json")

    # reports (JSON + rasters) byte-identical across runs
    corpus_root, corpus_dataset, corpus_thresholds, corpus_ranking = report_corpus
    write_json(tmp_path / "ct.json", corpus_thresholds.to_dict())
    write_json(tmp_path / "cr.json", corpus_ranking.to_dict())

    def run_report(out_dir):
        for sid in (corpus_dataset.entries[0].sample_id, corpus_dataset.entries[1].sample_id):
            result = runner.invoke(
                cli.dissect,
                ["report", "--sample", sid,
                 "--manifest", str(corpus_root / "manifest.jsonl"),
                 "--thresholds", str(tmp_path / "ct.json"),
                 "--ranking", str(tmp_path / "cr.json"),
                 "--top", "5", "--out-dir", str(out_dir)],
            )
            assert result.exit_code == 0, result.output
        return _digest_tree(out_dir)

    assert run_report(tmp_path / "rep_a") == run_report(tmp_path / "rep_b")
    _pass("fit + correlate + report byte-identical across runs and 1 vs 8 workers")
