"""Read-only HTTP service over precomputed dissection artifacts.

All heavy computation happens in batch CLI passes; the service only loads
``manifest.jsonl``, ``thresholds.json``, and ``ranking.json`` from the
artifact directory, computes per-sample relevance lazily (memoized), and
renders overlay rasters on first request into an on-disk cache. Responses
carry a content-hash ETag, and every JSON body goes through the same
serializer as the CLI exports, so API and file bytes agree.
"""

from __future__ import annotations

import hashlib
import io
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import HTTPException, RequestValidationError
from fastapi.responses import HTMLResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .dissection import (
    CorrelationRanking,
    UnitThresholds,
    load_activation,
    relevance_scores,
)
from .errors import MissingArtifact
from .errors import SchemaViolation as ManifestSchemaViolation
from .jsonio import dump_json_bytes, read_json
from .manifest import DatasetIndex, SampleEntry, load_manifest
from .report import (
    AXES,
    map_slice_index,
    relevance_payload,
    render_overlay_at,
    render_patch_slice,
    select_slice,
)
from .tensor_io import Volume, load_tensor, load_tensor_shape

DEFAULT_PORT = 8400
ARTIFACTS_ENV = "DISSECT_ARTIFACTS"


@dataclass(frozen=True)
class ServeConfig:
    artifacts_dir: Path
    ui_dir: Path | None = None  # defaults to <artifacts>/ui when present


@dataclass
class ServingIndex:
    """Immutable artifacts plus a memoizing relevance/overlay cache."""

    dataset: DatasetIndex
    thresholds: UnitThresholds
    ranking: CorrelationRanking
    artifacts_dir: Path
    _relevance: dict[tuple, dict] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def cache_dir(self) -> Path:
        return self.artifacts_dir / "cache"

    def relevance_payload_for(self, sample_id: str, top: int, axis: str) -> dict:
        """Lazily computed, memoized inference rows for one sample."""
        key = (sample_id, top, axis)
        with self._lock:
            cached = self._relevance.get(key)
        if cached is not None:
            return cached
        payload = relevance_payload(
            sample_id, self.dataset, self.thresholds, self.ranking, n=top, axis=axis
        )
        with self._lock:
            # identical values regardless of which request computed them
            return self._relevance.setdefault(key, payload)


def build_index(config: ServeConfig) -> ServingIndex:
    """Load and validate every artifact the service depends on.

    Raises:
        MissingArtifact: a required file is absent (named in the message).
        SchemaViolation: an artifact exists but does not parse or validate.
    """
    root = Path(config.artifacts_dir)
    manifest_path = root / "manifest.jsonl"
    thresholds_path = root / "thresholds.json"
    ranking_path = root / "ranking.json"
    for path in (manifest_path, thresholds_path, ranking_path):
        if not path.is_file():
            raise MissingArtifact(f"required artifact missing: {path}")
    dataset = load_manifest(manifest_path)
    try:
        thresholds = UnitThresholds.from_dict(read_json(thresholds_path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestSchemaViolation(0, "thresholds", str(exc)) from exc
    try:
        ranking = CorrelationRanking.from_dict(read_json(ranking_path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestSchemaViolation(0, "ranking", str(exc)) from exc
    if ranking.unit_count != thresholds.unit_count:
        raise ManifestSchemaViolation(
            0, "ranking", f"{ranking.unit_count} units vs {thresholds.unit_count} thresholds"
        )
    return ServingIndex(
        dataset=dataset, thresholds=thresholds, ranking=ranking, artifacts_dir=root
    )


def _etag(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()[:32]


def _json_response(payload) -> Response:
    body = dump_json_bytes(payload)
    return Response(content=body, media_type="application/json", headers={"ETag": _etag(body)})


def _png_response(body: bytes) -> Response:
    return Response(content=body, media_type="image/png", headers={"ETag": _etag(body)})


def _bad_query(message: str):
    return HTTPException(status_code=400, detail=message)


def _entry_payload(entry: SampleEntry) -> dict:
    return {
        "sample_id": entry.sample_id,
        "vertebra_label": entry.vertebra_label,
        "fractured": entry.fractured,
        "predicted_prob": entry.predicted_prob,
        "split": entry.split,
        "has_patch": entry.patch_path is not None,
    }


def create_app(config: ServeConfig) -> FastAPI:
    index = build_index(config)
    app = FastAPI(title="dissect3d explorer API", docs_url=None, redoc_url=None)

    @app.exception_handler(HTTPException)
    async def _http_error(request: Request, exc: HTTPException):
        body = dump_json_bytes({"error": str(exc.detail)})
        return Response(content=body, status_code=exc.status_code, media_type="application/json")

    @app.exception_handler(RequestValidationError)
    async def _query_error(request: Request, exc: RequestValidationError):
        body = dump_json_bytes({"error": "bad query parameter"})
        return Response(content=body, status_code=400, media_type="application/json")

    def _get_entry(sample_id: str) -> SampleEntry:
        entry = index.dataset.by_id(sample_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown sample {sample_id!r}")
        return entry

    def _check_unit(unit: int) -> int:
        if not 0 <= unit < index.thresholds.unit_count:
            raise HTTPException(status_code=404, detail=f"unknown unit {unit}")
        return unit

    @app.get("/api/units")
    def list_units(sort: str = "correlation", limit: int | None = None, offset: int = 0):
        if sort not in ("correlation", "index"):
            raise _bad_query(f"sort must be 'correlation' or 'index', got {sort!r}")
        if offset < 0 or (limit is not None and limit < 0):
            raise _bad_query("limit/offset must be non-negative")
        payload = index.ranking.to_dict()
        units = payload["units"]
        if sort == "index":
            units = sorted(units, key=lambda u: u["k"])
        end = None if limit is None else offset + limit
        payload["units"] = units[offset:end]
        return _json_response(payload)

    @app.get("/api/units/{unit}")
    def unit_detail(unit: int):
        _check_unit(unit)
        return _json_response(
            {
                "k": unit,
                "threshold": float(index.thresholds.values[unit]),
                "population": int(index.thresholds.population_count[unit]),
                "c": float(index.ranking.scores[unit]),
                "rank": index.ranking.rank_of(unit),
            }
        )

    @app.get("/api/units/{unit}/top-samples")
    def unit_top_samples(unit: int, n: int = 25, fractured: bool = True,
                         axis: str = "sagittal"):
        _check_unit(unit)
        if n < 1:
            raise _bad_query("n must be >= 1")
        if axis not in AXES:
            raise _bad_query(f"axis must be one of {AXES}")
        candidates = (
            index.dataset.fractured_entries() if fractured else index.dataset.entries
        )
        scored = []
        for entry in candidates:
            activation = load_activation(entry)
            relevance = float(relevance_scores(activation, index.thresholds).scores[unit])
            choice = select_slice(activation, unit, index.thresholds, axis)
            scored.append((entry, relevance, choice))
        scored.sort(key=lambda item: (-item[1], item[0].sample_id))
        return _json_response(
            {
                "unit": unit,
                "samples": [
                    {
                        **_entry_payload(entry),
                        "relevance": relevance,
                        "slice": {"axis": choice.axis, "index": choice.index},
                    }
                    for entry, relevance, choice in scored[:n]
                ],
            }
        )

    @app.get("/api/samples")
    def list_samples():
        return _json_response(
            {"samples": [_entry_payload(e) for e in index.dataset]}
        )

    @app.get("/api/samples/{sample_id}")
    def sample_detail(sample_id: str):
        entry = _get_entry(sample_id)
        payload = _entry_payload(entry)
        payload["patch_shape"] = (
            list(load_tensor_shape(entry.patch_file))
            if entry.patch_file is not None and entry.patch_file.is_file()
            else None
        )
        payload["activation_shape"] = list(load_tensor_shape(entry.activation_file))
        return _json_response(payload)

    @app.get("/api/samples/{sample_id}/relevance")
    def sample_relevance(sample_id: str, top: int = 10):
        _get_entry(sample_id)
        if top < 1:
            raise _bad_query("top must be >= 1")
        return _json_response(index.relevance_payload_for(sample_id, top, "sagittal"))

    def _load_patch(entry: SampleEntry) -> Volume:
        if entry.patch_file is None or not entry.patch_file.is_file():
            raise HTTPException(
                status_code=404, detail=f"sample {entry.sample_id!r} has no patch raster"
            )
        return Volume(data=load_tensor(entry.patch_file), intensity_unit="normalized")

    def _check_axis_slice(axis: str, slice_index: int, patch: Volume) -> None:
        if axis not in AXES:
            raise _bad_query(f"axis must be one of {AXES}")
        size = patch.shape[AXES.index(axis)]
        if not 0 <= slice_index < size:
            raise _bad_query(f"slice index {slice_index} outside [0, {size})")

    @app.get("/api/overlays/{sample_id}/{unit}/{axis}/{slice_index}.png")
    def overlay_png(sample_id: str, unit: int, axis: str, slice_index: int,
                    alpha: float = 0.5, native: bool = False):
        entry = _get_entry(sample_id)
        _check_unit(unit)
        patch = _load_patch(entry)
        if native:
            # index on the activation grid; carry it onto the patch grid here
            if axis not in AXES:
                raise _bad_query(f"axis must be one of {AXES}")
            shape = load_tensor_shape(entry.activation_file)
            native_size = shape[1 + AXES.index(axis)]  # (K, D, H, W) on disk
            if not 0 <= slice_index < native_size:
                raise _bad_query(f"native slice {slice_index} outside [0, {native_size})")
            slice_index = map_slice_index(
                slice_index, native_size, patch.shape[AXES.index(axis)]
            )
        _check_axis_slice(axis, slice_index, patch)
        if not 0.0 < alpha <= 1.0:
            raise _bad_query("alpha must be in (0, 1]")
        cache_path = (
            index.cache_dir
            / "overlays"
            / sample_id
            / f"unit_{unit:03d}_{axis}_{slice_index:03d}_a{alpha:.3f}.png"
        )
        if cache_path.is_file():
            return _png_response(cache_path.read_bytes())
        overlay = render_overlay_at(
            patch, load_activation(entry), unit, axis, slice_index, alpha,
            patch_sample_id=entry.sample_id,
        )
        buf = io.BytesIO()
        Image.fromarray(overlay.rendered, mode="RGB").save(buf, format="PNG")
        body = buf.getvalue()
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_suffix(".tmp")
        tmp.write_bytes(body)
        os.replace(tmp, cache_path)  # atomic: concurrent writers race benignly
        return _png_response(body)

    @app.get("/api/patches/{sample_id}/{axis}/{slice_index}.png")
    def patch_png(sample_id: str, axis: str, slice_index: int):
        entry = _get_entry(sample_id)
        patch = _load_patch(entry)
        _check_axis_slice(axis, slice_index, patch)
        raster = render_patch_slice(patch, axis, slice_index)
        buf = io.BytesIO()
        Image.fromarray(raster, mode="L").save(buf, format="PNG")
        return _png_response(buf.getvalue())

    ui_dir = config.ui_dir if config.ui_dir is not None else config.artifacts_dir / "ui"
    if ui_dir.is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:
        @app.get("/", response_class=HTMLResponse)
        def landing():
            return (
                "<html><body><h1>dissect3d</h1>"
                "<p>No UI assets found. The JSON API lives under <code>/api</code>.</p>"
                "</body></html>"
            )

    return app


def resolve_artifacts_dir(flag_value: str | None) -> Path:
    """CLI flag, overridden by the DISSECT_ARTIFACTS environment variable."""
    env = os.environ.get(ARTIFACTS_ENV)
    if env:
        return Path(env)
    if flag_value is None:
        raise MissingArtifact(f"pass --artifacts or set {ARTIFACTS_ENV}")
    return Path(flag_value)
