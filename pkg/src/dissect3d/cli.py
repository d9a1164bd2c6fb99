"""Command-line entry points: ``dissect``, ``prep``, and ``synth``."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import dissection, report, synth as synth_mod, volume_prep
from .dissection import CorrelationRanking, UnitThresholds
from .errors import DissectError
from .jsonio import read_json, write_json
from .manifest import CERVICAL_LABELS, SampleEntry, load_manifest, save_manifest
from .tensor_io import load_nifti, save_nifti, save_tensor


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(1)


@click.group()
def dissect():
    """Dissect a fracture classifier's final-layer activations."""


@dissect.command("fit")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--q", default=dissection.DEFAULT_QUANTILE, show_default=True, type=float)
@click.option("--estimator", default="exact", show_default=True,
              type=click.Choice(dissection.ESTIMATORS))
@click.option("--split", default="all", show_default=True)
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--epsilon", default=1e-3, show_default=True, type=float,
              help="rank-error bound for the streaming estimator")
@click.option("--out", "out_path", default="thresholds.json", show_default=True,
              type=click.Path())
def dissect_fit(manifest_path, q, estimator, split, workers, epsilon, out_path):
    """Fit per-unit top-quantile thresholds over the manifest samples."""
    try:
        dataset = load_manifest(manifest_path).filter_split(split)
        thresholds = dissection.fit_thresholds(
            dataset, q=q, estimator=estimator, workers=workers, epsilon=epsilon
        )
    except (DissectError, ValueError) as exc:
        _fail(exc)
    write_json(out_path, thresholds.to_dict())
    click.echo(f"fitted {thresholds.unit_count} unit thresholds -> {out_path}")


@dissect.command("correlate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_path", default="thresholds.json",
              show_default=True, type=click.Path(exists=True))
@click.option("--policy", default=dissection.POLICY_GROUND_TRUTH, show_default=True,
              type=click.Choice(dissection.POLICIES))
@click.option("--out", "out_path", default="ranking.json", show_default=True,
              type=click.Path())
def dissect_correlate(manifest_path, thresholds_path, policy, out_path):
    """Rank units by the fraction of positive samples enabling them."""
    try:
        dataset = load_manifest(manifest_path)
        thresholds = UnitThresholds.from_dict(read_json(thresholds_path))
        ranking = dissection.correlation_scores(dataset, thresholds, policy)
    except (DissectError, ValueError) as exc:
        _fail(exc)
    write_json(out_path, ranking.to_dict())
    click.echo(f"ranked {ranking.unit_count} units over {ranking.positive_count} positives "
               f"-> {out_path}")


@dissect.command("relevance")
@click.option("--sample", "sample_id", required=True)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_path", default="thresholds.json",
              show_default=True, type=click.Path(exists=True))
@click.option("--ranking", "ranking_path", default="ranking.json", show_default=True,
              type=click.Path(exists=True))
@click.option("--top", default=10, show_default=True, type=int)
@click.option("--axis", default="sagittal", show_default=True,
              type=click.Choice(report.AXES))
@click.option("--out", "out_path", default="relevance.json", show_default=True,
              type=click.Path())
def dissect_relevance(sample_id, manifest_path, thresholds_path, ranking_path, top, axis,
                      out_path):
    """Write one sample's most relevant units (no rasters)."""
    try:
        dataset = load_manifest(manifest_path)
        thresholds = UnitThresholds.from_dict(read_json(thresholds_path))
        ranking = CorrelationRanking.from_dict(read_json(ranking_path))
        payload = report.relevance_payload(
            sample_id, dataset, thresholds, ranking, n=top, axis=axis
        )
    except (DissectError, ValueError) as exc:
        _fail(exc)
    write_json(out_path, payload)
    click.echo(f"relevance for {sample_id} -> {out_path}")


@dissect.command("metrics")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", default=0.5, show_default=True, type=float)
@click.option("--out", "out_path", default=None, type=click.Path())
def dissect_metrics(manifest_path, threshold, out_path):
    """Classification metrics from the manifest's predicted probabilities."""
    try:
        dataset = load_manifest(manifest_path)
        metrics = dissection.compute_metrics(dataset, decision_threshold=threshold)
    except (DissectError, ValueError) as exc:
        _fail(exc)
    if out_path:
        write_json(out_path, metrics.to_dict())
    click.echo(
        f"f1={metrics.f1:.4f} accuracy={metrics.accuracy:.4f} "
        f"auc={metrics.auc:.4f} ap={metrics.average_precision:.4f} "
        f"@{metrics.decision_threshold}"
    )


@dissect.command("report")
@click.option("--sample", "sample_id", required=True)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_path", default="thresholds.json",
              show_default=True, type=click.Path(exists=True))
@click.option("--ranking", "ranking_path", default="ranking.json", show_default=True,
              type=click.Path(exists=True))
@click.option("--top", default=10, show_default=True, type=int)
@click.option("--axis", default="sagittal", show_default=True,
              type=click.Choice(report.AXES))
@click.option("--alpha", default=0.5, show_default=True, type=float)
@click.option("--out-dir", "out_dir", default="reports", show_default=True,
              type=click.Path())
def dissect_report(sample_id, manifest_path, thresholds_path, ranking_path, top, axis,
                   alpha, out_dir):
    """Export the single-inference explanation (JSON + overlays)."""
    try:
        dataset = load_manifest(manifest_path)
        thresholds = UnitThresholds.from_dict(read_json(thresholds_path))
        ranking = CorrelationRanking.from_dict(read_json(ranking_path))
        result = report.inference_report(
            sample_id, dataset, thresholds, ranking, out_dir, n=top, axis=axis, alpha=alpha
        )
    except (DissectError, ValueError) as exc:
        _fail(exc)
    click.echo(f"report with {len(result.rows)} rows -> {result.json_path}")


@dissect.command("bundle")
@click.option("--unit", required=True, type=int)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", "thresholds_path", default="thresholds.json",
              show_default=True, type=click.Path(exists=True))
@click.option("--ranking", "ranking_path", default="ranking.json", show_default=True,
              type=click.Path(exists=True))
@click.option("--top-samples", default=25, show_default=True, type=int)
@click.option("--export-samples", default=5, show_default=True, type=int)
@click.option("--axis", default="sagittal", show_default=True,
              type=click.Choice(report.AXES))
@click.option("--out-dir", "out_dir", default="bundles", show_default=True,
              type=click.Path())
def dissect_bundle(unit, manifest_path, thresholds_path, ranking_path, top_samples,
                   export_samples, axis, out_dir):
    """Export a unit's dataset-wide evidence (collage + per-slice exports)."""
    try:
        dataset = load_manifest(manifest_path)
        thresholds = UnitThresholds.from_dict(read_json(thresholds_path))
        ranking = CorrelationRanking.from_dict(read_json(ranking_path))
        bundle = report.export_unit_bundle(
            unit, dataset, thresholds, out_dir, ranking=ranking,
            collage_samples=top_samples, export_samples=export_samples, axis=axis,
        )
    except (DissectError, ValueError) as exc:
        _fail(exc)
    note = " (degenerate: no superthreshold activations)" if bundle.degenerate else ""
    click.echo(f"bundle for unit {unit} -> {bundle.metadata_path.parent}{note}")


@dissect.command("serve")
@click.option("--artifacts", "artifacts_dir", default=None, type=click.Path())
@click.option("--port", default=8400, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
def dissect_serve(artifacts_dir, port, host):
    """Serve precomputed artifacts to the explorer UI (read-only)."""
    import uvicorn

    from .server import ServeConfig, create_app, resolve_artifacts_dir

    try:
        root = resolve_artifacts_dir(artifacts_dir)
        app = create_app(ServeConfig(artifacts_dir=root))
    except DissectError as exc:
        _fail(exc)
    uvicorn.run(app, host=host, port=port)


@click.group()
def prep():
    """CT preprocessing: vertebra patch extraction."""


@prep.command("extract")
@click.option("--volume", "volume_path", required=True, type=click.Path(exists=True))
@click.option("--centroids", "centroids_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
@click.option("--include-cervical", is_flag=True, default=False,
              help="keep C1-C7 (excluded by default)")
@click.option("--nifti/--no-nifti", "emit_nifti", default=False, show_default=True,
              help="also write each patch as NIfTI")
def prep_extract(volume_path, centroids_path, out_dir, include_cervical, emit_nifti):
    """Extract one normalized 96-cube patch per vertebra.

    Writes patches under <out-dir>/patches and the matching manifest rows to
    <out-dir>/patches.jsonl. Rows point at activations/<sample_id>.npy, which
    the capture adapter fills in later; fracture flags and predicted
    probabilities likewise come from the host pipeline.
    """
    out_root = Path(out_dir)
    (out_root / "patches").mkdir(parents=True, exist_ok=True)
    try:
        volume = load_nifti(volume_path)
        centroids = volume_prep.load_centroids(centroids_path)
        spline = volume_prep.build_spline(centroids)
    except (DissectError, ValueError, KeyError) as exc:
        _fail(exc)

    stem = Path(volume_path).name.split(".")[0]
    entries = []
    for label in centroids.labels:
        if not include_cervical and label in CERVICAL_LABELS:
            continue
        try:
            raw = volume_prep.extract_patch(volume, spline, label)
            patch = volume_prep.normalize_hu(raw, sample_id=f"{stem}_{label}",
                                             vertebra_label=label)
        except DissectError as exc:
            _fail(exc)
        rel = f"patches/{stem}_{label}.npy"
        save_tensor(out_root / rel, patch.volume.data)
        if emit_nifti:
            save_nifti(out_root / f"patches/{stem}_{label}.nii", patch.volume)
        entries.append(
            SampleEntry(
                sample_id=f"{stem}_{label}",
                vertebra_label=label,
                fractured=False,
                predicted_prob=None,
                activation_path=f"activations/{stem}_{label}.npy",
                patch_path=rel,
                split="all",
            )
        )
    save_manifest(entries, out_root / "patches.jsonl")
    click.echo(f"extracted {len(entries)} patches -> {out_root}")


@click.group()
def synth():
    """Synthetic planted-concept benchmarks."""


@synth.command("generate")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", "out_dir", required=True, type=click.Path())
def synth_generate(spec_path, out_dir):
    """Generate a dataset from a plant-spec JSON (see PlantSpec fields)."""
    try:
        spec = synth_mod.PlantSpec.from_dict(read_json(spec_path))
        dataset, truth = synth_mod.generate(spec, out_dir)
    except (DissectError, ValueError, TypeError, KeyError) as exc:
        _fail(exc)
    click.echo(
        f"generated {len(dataset)} samples, {spec.unit_count} units, "
        f"{len(truth.enabled)} planted -> {out_dir}"
    )
