"""Slice selection, overlay rendering, collages, bundles, inference reports."""

import json

import numpy as np
import pytest

from conftest import make_dataset
from dissect3d import dissection as dc
from dissect3d import report as rp
from dissect3d.errors import MixedDimensions, SampleMismatch, UnknownSample
from dissect3d.tensor_io import Volume, read_nifti


def _activation(arr, sample_id="s"):
    return dc.ActivationVolume(sample_id=sample_id, units=np.asarray(arr))


def _thresholds(values):
    values = np.asarray(values, dtype=np.float64)
    return dc.UnitThresholds(0.005, values, np.full(values.shape[0], 10), "exact")


class TestSelectSlice:
    def test_single_superthreshold_voxel(self):
        arr = np.zeros((1, 8, 8, 8), dtype=np.float32)
        arr[0, 3, 5, 2] = 4.0
        choice = rp.select_slice(_activation(arr), 0, _thresholds([1.0]), "sagittal")
        assert choice.index == 3 and choice.score == pytest.approx(4.0)
        assert rp.select_slice(_activation(arr), 0, _thresholds([1.0]), "coronal").index == 5
        assert rp.select_slice(_activation(arr), 0, _thresholds([1.0]), "axial").index == 2

    def test_all_zero_mask_middle_slice(self):
        arr = np.zeros((1, 96, 96, 96), dtype=np.float32)
        choice = rp.select_slice(_activation(arr), 0, _thresholds([0.0]))
        assert choice.index == 48 and choice.score == 0.0

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(2)
        arr = rng.uniform(0, 1, size=(3, 9, 9, 9)).astype(np.float32)
        thresholds = _thresholds([0.6, 0.7, 0.8])
        for unit in range(3):
            for axis_name, axis in zip(rp.AXES, range(3)):
                choice = rp.select_slice(_activation(arr), unit, thresholds, axis_name)
                masked = np.where(arr[unit] > thresholds.values[unit], arr[unit], 0.0)
                sums = [
                    float(np.take(masked, i, axis=axis).sum(dtype=np.float64))
                    for i in range(masked.shape[axis])
                ]
                best = max(range(len(sums)), key=lambda i: (sums[i], -i))
                assert choice.index == best
                # optimality up to float summation-order noise
                tol = 1e-12 * max(1.0, abs(choice.score))
                assert not any(s > choice.score + tol for s in sums)

    def test_tie_breaks_to_lowest_index(self):
        arr = np.zeros((1, 6, 4, 4), dtype=np.float32)
        arr[0, 1, 0, 0] = 2.0
        arr[0, 4, 1, 1] = 2.0
        choice = rp.select_slice(_activation(arr), 0, _thresholds([1.0]), "sagittal")
        assert choice.index == 1


class TestMapSliceIndex:
    def test_identity_when_same_size(self):
        for i in (0, 5, 95):
            assert rp.map_slice_index(i, 96, 96) == i

    def test_upscaling_centers(self):
        assert rp.map_slice_index(0, 12, 96) == 4
        assert rp.map_slice_index(11, 12, 96) == 92

    def test_bounds(self):
        assert 0 <= rp.map_slice_index(0, 3, 96) < 96
        assert 0 <= rp.map_slice_index(2, 3, 96) < 96


class TestUpsample:
    def test_identity_size_is_exact(self):
        rng = np.random.default_rng(3)
        vol = rng.uniform(size=(7, 8, 9))
        assert np.allclose(rp.upsample_trilinear(vol, (7, 8, 9)), vol)

    def test_constant_stays_constant(self):
        vol = np.full((4, 4, 4), 2.5)
        out = rp.upsample_trilinear(vol, (12, 12, 12))
        assert np.allclose(out, 2.5)

    def test_never_exceeds_native_range(self):
        rng = np.random.default_rng(4)
        vol = rng.uniform(size=(5, 5, 5))
        out = rp.upsample_trilinear(vol, (20, 20, 20))
        assert out.min() >= vol.min() - 1e-12 and out.max() <= vol.max() + 1e-12


def _patch(size=96, value=0.25):
    return Volume(data=np.full((size,) * 3, value, dtype=np.float32),
                  intensity_unit="normalized")


class TestRenderOverlay:
    def test_zero_activation_is_pure_grayscale(self):
        arr = np.zeros((1, 12, 12, 12), dtype=np.float32)
        patch = _patch(value=0.5)
        choice = rp.SliceChoice("sagittal", 6, 0.0)
        overlay = rp.render_overlay(patch, _activation(arr), 0, _thresholds([0.0]), choice)
        gray = np.rint(0.5 * 255).astype(np.uint8)
        assert np.all(overlay.rendered == gray)
        assert np.all(overlay.heat == 0.0)

    def test_alpha_one_saturated_is_pure_colormap(self):
        arr = np.full((1, 8, 8, 8), 7.0, dtype=np.float32)  # saturated everywhere
        patch = _patch(size=8, value=0.1)
        choice = rp.SliceChoice("axial", 4, 1.0)
        overlay = rp.render_overlay(
            patch, _activation(arr), 0, _thresholds([1.0]), choice, alpha=1.0
        )
        top = np.rint(np.array(rp._RAMP[-1]) * 255).astype(np.uint8)
        assert np.all(overlay.rendered == top)

    def test_byte_identical_across_runs(self):
        rng = np.random.default_rng(5)
        arr = rng.uniform(0, 1, size=(2, 12, 12, 12)).astype(np.float32)
        patch = Volume(
            data=rng.uniform(0, 1, size=(24, 24, 24)).astype(np.float32),
            intensity_unit="normalized",
        )
        choice = rp.SliceChoice("coronal", 5, 1.0)
        a = rp.render_overlay(patch, _activation(arr), 1, _thresholds([0.2, 0.2]), choice)
        b = rp.render_overlay(patch, _activation(arr), 1, _thresholds([0.2, 0.2]), choice)
        assert a.rendered.tobytes() == b.rendered.tobytes()

    def test_sample_mismatch(self):
        arr = np.zeros((1, 4, 4, 4), dtype=np.float32)
        with pytest.raises(SampleMismatch):
            rp.render_overlay_at(
                _patch(8), _activation(arr, "sampleA"), 0, "sagittal", 2,
                patch_sample_id="sampleB",
            )

    def test_rendered_matches_base_dimensions(self):
        arr = np.zeros((1, 6, 6, 6), dtype=np.float32)
        overlay = rp.render_overlay_at(_patch(32), _activation(arr), 0, "sagittal", 7)
        assert overlay.rendered.shape == (32, 32, 3)
        assert overlay.base.shape == (32, 32)


class TestCollage:
    def _tiles(self, n, size=96):
        tile = rp.OverlayImage(
            base=np.zeros((size, size)),
            heat=np.zeros((size, size)),
            alpha=0.5,
            rendered=np.full((size, size, 3), 37, dtype=np.uint8),
        )
        return [tile] * n

    def test_full_grid_dimensions(self):
        raster = rp.build_collage(self._tiles(25), rows=5, cols=5)
        expected = 5 * 96 + 4 * 2
        assert raster.shape == (expected, expected, 3)

    @pytest.mark.parametrize("rows,cols,size", [(1, 1, 10), (2, 3, 8), (4, 4, 5)])
    def test_dimension_formula_other_grids(self, rows, cols, size):
        raster = rp.build_collage(self._tiles(rows * cols, size), rows=rows, cols=cols)
        assert raster.shape == (rows * size + (rows - 1) * 2, cols * size + (cols - 1) * 2, 3)

    def test_partial_fill_leaves_black_cells(self):
        raster = rp.build_collage(self._tiles(3, 4), rows=5, cols=5)
        assert np.all(raster[: 4, : 4] == 37)  # first cell filled
        assert np.all(raster[6 : 10, : 4] == 0)  # second row empty

    def test_empty_is_all_black(self):
        raster = rp.build_collage([], rows=5, cols=5)
        assert raster.sum() == 0

    def test_mixed_dimensions_rejected(self):
        tiles = self._tiles(1, 8) + self._tiles(1, 9)
        with pytest.raises(MixedDimensions):
            rp.build_collage(tiles)

    def test_too_many_rejected(self):
        with pytest.raises(ValueError):
            rp.build_collage(self._tiles(26), rows=5, cols=5)


class TestTopSelection:
    def test_top_correlated_units(self, report_corpus):
        _, _, _, ranking = report_corpus
        top = rp.top_correlated_units(ranking, n=4)
        assert top == [int(u) for u in ranking.order[:4]]
        assert rp.top_correlated_units(ranking, n=1) == [int(ranking.order[0])]
        assert len(rp.top_correlated_units(ranking, n=100)) == ranking.unit_count

    def test_all_equal_scores_tie_break(self):
        scores = np.full(6, 0.5)
        ranking = dc.CorrelationRanking("gt-positive", 4, scores, dc.rank_descending(scores))
        assert rp.top_correlated_units(ranking, 3) == [0, 1, 2]

    def test_top_activating_samples_match_bruteforce(self, report_corpus):
        _, dataset, thresholds, _ = report_corpus
        unit = 1
        ranked = rp.top_activating_samples(unit, dataset, thresholds, n=25)
        brute = []
        for entry in dataset.fractured_entries():
            act = dc.load_activation(entry)
            unit_map = act.units[unit]
            masked = unit_map[unit_map > thresholds.values[unit]]
            brute.append((entry.sample_id, float(masked.sum(dtype=np.float64))))
        brute.sort(key=lambda p: (-p[1], p[0]))
        assert [e.sample_id for e, _ in ranked] == [sid for sid, _ in brute[:25]]
        for (_, got), (_, want) in zip(ranked, brute):
            assert got == pytest.approx(want, rel=1e-9)

    def test_fractured_only_with_no_fractured(self, tmp_path):
        dataset = make_dataset(
            tmp_path,
            {"s0": np.ones((1, 2, 2, 2), dtype=np.float32)},
            fractured={"s0": False},
        )
        thresholds = dc.fit_thresholds(dataset)
        assert rp.top_activating_samples(0, dataset, thresholds) == []

    def test_n_larger_than_dataset(self, report_corpus):
        _, dataset, thresholds, _ = report_corpus
        ranked = rp.top_activating_samples(1, dataset, thresholds, n=10_000)
        assert len(ranked) == len(dataset.fractured_entries())


class TestUnitBundle:
    def test_export_counts_and_idempotence(self, report_corpus, tmp_path):
        _, dataset, thresholds, ranking = report_corpus
        bundle = rp.export_unit_bundle(
            1, dataset, thresholds, tmp_path, ranking=ranking,
            collage_samples=9, export_samples=2,
        )
        unit_dir = tmp_path / "unit_001"
        assert (unit_dir / "collage.png").is_file()
        meta = json.loads((unit_dir / "bundle.json").read_text())
        assert meta["unit"] == 1
        assert meta["correlation_rank"] == ranking.rank_of(1)
        assert not meta["degenerate"] and meta["note"] is None
        for sample in meta["samples"]:
            sample_dir = unit_dir / sample["dir"]
            slices = sorted(sample_dir.glob("slice_*.png"))
            assert len(slices) == 96
            vol = read_nifti((sample_dir / "activation.nii").read_bytes())
            assert vol.shape == (96, 96, 96)

        before = {
            p: p.read_bytes() for p in unit_dir.rglob("*") if p.is_file()
        }
        rp.export_unit_bundle(
            1, dataset, thresholds, tmp_path, ranking=ranking,
            collage_samples=9, export_samples=2,
        )
        after = {p: p.read_bytes() for p in unit_dir.rglob("*") if p.is_file()}
        assert before == after

    def test_degenerate_unit_flagged(self, tmp_path):
        # one unit with superthreshold mass, one silent everywhere
        arrays, patches = {}, {}
        rng = np.random.default_rng(6)
        for i in range(3):
            arr = np.zeros((2, 6, 6, 6), dtype=np.float32)
            arr[0] = rng.uniform(0, 1, (6, 6, 6))
            arr[1] = 0.5  # constant: strict threshold never fires
            arrays[f"s{i}"] = arr
            patches[f"s{i}"] = np.full((96, 96, 96), 0.3, dtype=np.float32)
        dataset = make_dataset(
            tmp_path / "data", arrays,
            fractured={f"s{i}": True for i in range(3)},
            patches_by_sample=patches,
        )
        thresholds = dc.fit_thresholds(dataset)
        bundle = rp.export_unit_bundle(1, dataset, thresholds, tmp_path / "out",
                                       collage_samples=3, export_samples=1)
        assert bundle.degenerate
        meta = json.loads(bundle.metadata_path.read_text())
        assert meta["degenerate"] is True
        assert meta["note"] == "no statistically significant activations"
        assert meta["samples"][0]["slice_index"] == 3  # middle of the 6-grid


class TestInferenceReport:
    def test_rows_schema_and_consistency(self, report_corpus, tmp_path):
        _, dataset, thresholds, ranking = report_corpus
        sample_id = dataset.entries[0].sample_id
        result = rp.inference_report(
            sample_id, dataset, thresholds, ranking, tmp_path, n=5
        )
        payload = json.loads(result.json_path.read_text())
        assert payload["sample_id"] == sample_id
        assert payload["predicted_prob"] == dataset.entries[0].predicted_prob
        assert len(payload["rows"]) == 5

        act = dc.load_activation(dataset.entries[0])
        relevance = dc.relevance_scores(act, thresholds)
        for i, row in enumerate(payload["rows"], start=1):
            assert set(row) == {
                "unit", "relevance_rank", "relevance", "correlation_rank",
                "slice", "overlay",
            }
            assert row["relevance_rank"] == i
            assert row["unit"] == int(relevance.order[i - 1])
            assert row["relevance"] == float(relevance.scores[row["unit"]])
            assert row["correlation_rank"] == ranking.rank_of(row["unit"])
            assert (result.json_path.parent / row["overlay"]).is_file()

    def test_all_zero_sample_ranks_by_index(self, tmp_path):
        arrays = {
            "on": np.full((4, 6, 6, 6), 1.0, dtype=np.float32),
            "zero": np.zeros((4, 6, 6, 6), dtype=np.float32),
        }
        arrays["on"][0, 0, 0, 0] = 9.0
        patches = {k: np.zeros((96, 96, 96), dtype=np.float32) for k in arrays}
        dataset = make_dataset(
            tmp_path / "d", arrays,
            fractured={"on": True, "zero": False},
            patches_by_sample=patches,
        )
        thresholds = dc.fit_thresholds(dataset)
        ranking = dc.correlation_scores(dataset, thresholds)
        result = rp.inference_report(
            "zero", dataset, thresholds, ranking, tmp_path / "out", n=4
        )
        rows = list(result.rows)
        assert [r["unit"] for r in rows] == [0, 1, 2, 3]
        assert all(r["relevance"] == 0.0 for r in rows)

    def test_unknown_sample(self, report_corpus, tmp_path):
        _, dataset, thresholds, ranking = report_corpus
        with pytest.raises(UnknownSample):
            rp.inference_report("ghost", dataset, thresholds, ranking, tmp_path)

    def test_relevance_payload_matches_report_rows(self, report_corpus, tmp_path):
        _, dataset, thresholds, ranking = report_corpus
        sample_id = dataset.entries[2].sample_id
        result = rp.inference_report(
            sample_id, dataset, thresholds, ranking, tmp_path, n=6
        )
        payload = rp.relevance_payload(sample_id, dataset, thresholds, ranking, n=6)
        stripped = [
            {key: value for key, value in row.items() if key != "overlay"}
            for row in result.rows
        ]
        assert payload["rows"] == stripped
