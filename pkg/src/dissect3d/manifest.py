"""JSON-Lines dataset manifest: one sample entry per line.

The manifest is the only place sample metadata lives — labels, upstream
prediction probabilities, and the paths of the activation/patch files. Paths
are stored as written but resolved against the manifest's directory on load,
so an artifact directory stays relocatable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DuplicateSampleId, SchemaViolation

VERTEBRA_LABELS = tuple(
    [f"C{i}" for i in range(1, 8)]
    + [f"T{i}" for i in range(1, 13)]
    + [f"L{i}" for i in range(1, 7)]
)
CERVICAL_LABELS = frozenset(f"C{i}" for i in range(1, 8))
SPLITS = ("train", "val", "test", "all")

_FIELDS = (
    "sample_id",
    "vertebra_label",
    "fractured",
    "predicted_prob",
    "activation_path",
    "patch_path",
    "split",
)


@dataclass(frozen=True)
class SampleEntry:
    sample_id: str
    vertebra_label: str
    fractured: bool
    predicted_prob: float | None
    activation_path: str
    patch_path: str | None
    split: str
    root: Path | None = None  # directory paths are resolved against

    @property
    def activation_file(self) -> Path:
        return _resolve(self.activation_path, self.root)

    @property
    def patch_file(self) -> Path | None:
        if self.patch_path is None:
            return None
        return _resolve(self.patch_path, self.root)

    def to_json_line(self) -> str:
        record = {name: getattr(self, name) for name in _FIELDS}
        return json.dumps(record, separators=(", ", ": "))


def _resolve(path_str: str, root: Path | None) -> Path:
    p = Path(path_str)
    if p.is_absolute() or root is None:
        return p
    return root / p


@dataclass(frozen=True)
class DatasetIndex:
    """Ordered, validated collection of sample entries."""

    entries: tuple[SampleEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[SampleEntry]:
        return iter(self.entries)

    def by_id(self, sample_id: str) -> SampleEntry | None:
        for entry in self.entries:
            if entry.sample_id == sample_id:
                return entry
        return None

    def filter_split(self, split: str | None) -> "DatasetIndex":
        """Restrict to one split; ``None`` or ``"all"`` keeps every entry."""
        if split is None or split == "all":
            return self
        return DatasetIndex(tuple(e for e in self.entries if e.split == split))

    def fractured_entries(self) -> tuple[SampleEntry, ...]:
        return tuple(e for e in self.entries if e.fractured)


def _parse_entry(record: object, line_no: int, root: Path | None) -> SampleEntry:
    if not isinstance(record, dict):
        raise SchemaViolation(line_no, "<line>", "entry is not a JSON object")
    unknown = set(record) - set(_FIELDS)
    if unknown:
        raise SchemaViolation(line_no, sorted(unknown)[0], "unknown field")
    missing = set(_FIELDS) - set(record)
    if missing:
        raise SchemaViolation(line_no, sorted(missing)[0], "missing field")

    sample_id = record["sample_id"]
    if not isinstance(sample_id, str) or not sample_id:
        raise SchemaViolation(line_no, "sample_id", "must be a non-empty string")
    label = record["vertebra_label"]
    if label not in VERTEBRA_LABELS:
        raise SchemaViolation(line_no, "vertebra_label", f"{label!r} is not a vertebra label")
    fractured = record["fractured"]
    if not isinstance(fractured, bool):
        raise SchemaViolation(line_no, "fractured", "must be a boolean")
    prob = record["predicted_prob"]
    if prob is not None:
        if isinstance(prob, bool) or not isinstance(prob, (int, float)):
            raise SchemaViolation(line_no, "predicted_prob", "must be a number or null")
        prob = float(prob)
        if not 0.0 <= prob <= 1.0:
            raise SchemaViolation(line_no, "predicted_prob", f"{prob} outside [0, 1]")
    activation_path = record["activation_path"]
    if not isinstance(activation_path, str) or not activation_path:
        raise SchemaViolation(line_no, "activation_path", "must be a non-empty string")
    patch_path = record["patch_path"]
    if patch_path is not None and (not isinstance(patch_path, str) or not patch_path):
        raise SchemaViolation(line_no, "patch_path", "must be a string or null")
    split = record["split"]
    if split not in SPLITS:
        raise SchemaViolation(line_no, "split", f"{split!r} not in {SPLITS}")

    return SampleEntry(
        sample_id=sample_id,
        vertebra_label=label,
        fractured=fractured,
        predicted_prob=prob,
        activation_path=activation_path,
        patch_path=patch_path,
        split=split,
        root=root,
    )


def load_manifest(path: str | Path) -> DatasetIndex:
    """Parse and validate a JSON-Lines manifest, preserving row order.

    Raises:
        SchemaViolation: malformed line, bad field value, or an activation
            file that does not resolve to an existing file.
        DuplicateSampleId: repeated ``sample_id``.
    """
    path = Path(path)
    root = path.parent
    entries: list[SampleEntry] = []
    seen: set[str] = set()
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(line_no, "<line>", f"invalid JSON: {exc.msg}") from exc
        entry = _parse_entry(record, line_no, root)
        if entry.sample_id in seen:
            raise DuplicateSampleId(f"sample_id {entry.sample_id!r} repeated at line {line_no}")
        seen.add(entry.sample_id)
        if not entry.activation_file.is_file():
            raise SchemaViolation(
                line_no, "activation_path", f"{entry.activation_file} does not exist"
            )
        entries.append(entry)
    return DatasetIndex(tuple(entries))


def save_manifest(entries: Iterable[SampleEntry], path: str | Path) -> None:
    path = Path(path)
    lines = [entry.to_json_line() for entry in entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def rebase(entry: SampleEntry, root: Path) -> SampleEntry:
    """Re-anchor an entry's relative paths to a different directory."""
    return replace(entry, root=root)
