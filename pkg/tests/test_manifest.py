"""Manifest schema validation, ordering, and purity."""

import numpy as np
import pytest

from dissect3d.errors import DuplicateSampleId, SchemaViolation
from dissect3d.manifest import SampleEntry, load_manifest, save_manifest
from dissect3d.tensor_io import save_tensor


def _line(sample_id="v001", **overrides) -> str:
    record = {
        "sample_id": sample_id,
        "vertebra_label": "T12",
        "fractured": True,
        "predicted_prob": 0.9,
        "activation_path": "act.npy",
        "patch_path": None,
        "split": "all",
    }
    record.update(overrides)
    import json

    return json.dumps(record)


@pytest.fixture
def root(tmp_path):
    save_tensor(tmp_path / "act.npy", np.zeros((1, 2, 2, 2), dtype=np.float32))
    return tmp_path


def test_two_valid_lines(root):
    (root / "m.jsonl").write_text(_line("v001") + "\n" + _line("v002") + "\n")
    idx = load_manifest(root / "m.jsonl")
    assert len(idx) == 2
    assert [e.sample_id for e in idx] == ["v001", "v002"]


def test_order_preserved(root):
    ids = [f"v{i:03d}" for i in (5, 1, 9, 3)]
    (root / "m.jsonl").write_text("\n".join(_line(i) for i in ids))
    assert [e.sample_id for e in load_manifest(root / "m.jsonl")] == ids


def test_pure_same_bytes_same_index(root):
    (root / "m.jsonl").write_text(_line("v001") + "\n")
    assert load_manifest(root / "m.jsonl") == load_manifest(root / "m.jsonl")


def test_prob_out_of_range(root):
    (root / "m.jsonl").write_text(_line(predicted_prob=1.5))
    with pytest.raises(SchemaViolation) as err:
        load_manifest(root / "m.jsonl")
    assert err.value.field == "predicted_prob"
    assert err.value.line_no == 1


def test_duplicate_sample_id(root):
    (root / "m.jsonl").write_text(_line("v001") + "\n" + _line("v001"))
    with pytest.raises(DuplicateSampleId):
        load_manifest(root / "m.jsonl")


def test_null_prob_allowed(root):
    (root / "m.jsonl").write_text(_line(predicted_prob=None))
    assert load_manifest(root / "m.jsonl").entries[0].predicted_prob is None


@pytest.mark.parametrize(
    "overrides,field",
    [
        ({"vertebra_label": "X9"}, "vertebra_label"),
        ({"fractured": "yes"}, "fractured"),
        ({"split": "holdout"}, "split"),
        ({"sample_id": ""}, "sample_id"),
        ({"predicted_prob": True}, "predicted_prob"),
        ({"extra_field": 1}, "extra_field"),
    ],
)
def test_schema_violations(root, overrides, field):
    (root / "m.jsonl").write_text(_line(**overrides))
    with pytest.raises(SchemaViolation) as err:
        load_manifest(root / "m.jsonl")
    assert err.value.field == field


def test_missing_field_reported(root):
    import json

    record = json.loads(_line())
    del record["split"]
    (root / "m.jsonl").write_text(json.dumps(record))
    with pytest.raises(SchemaViolation) as err:
        load_manifest(root / "m.jsonl")
    assert err.value.field == "split"


def test_invalid_json_line_number(root):
    (root / "m.jsonl").write_text(_line() + "\n{oops\n")
    with pytest.raises(SchemaViolation) as err:
        load_manifest(root / "m.jsonl")
    assert err.value.line_no == 2


def test_unresolvable_activation_path(root):
    (root / "m.jsonl").write_text(_line(activation_path="missing.npy"))
    with pytest.raises(SchemaViolation) as err:
        load_manifest(root / "m.jsonl")
    assert err.value.field == "activation_path"


def test_save_load_roundtrip(root):
    entries = [
        SampleEntry("a", "T10", True, 0.75, "act.npy", None, "train"),
        SampleEntry("b", "L2", False, None, "act.npy", None, "test"),
    ]
    save_manifest(entries, root / "m.jsonl")
    idx = load_manifest(root / "m.jsonl")
    assert [e.sample_id for e in idx] == ["a", "b"]
    assert idx.entries[0].predicted_prob == 0.75
    assert idx.entries[1].predicted_prob is None
    assert idx.entries[1].split == "test"


def test_filter_split(root):
    entries = [
        SampleEntry("a", "T10", True, 0.75, "act.npy", None, "train"),
        SampleEntry("b", "L2", False, None, "act.npy", None, "test"),
    ]
    save_manifest(entries, root / "m.jsonl")
    idx = load_manifest(root / "m.jsonl")
    assert [e.sample_id for e in idx.filter_split("train")] == ["a"]
    assert len(idx.filter_split("all")) == 2
    assert len(idx.filter_split(None)) == 2
