"""One JSON serializer for every artifact, so CLI files and API bodies match
byte for byte."""

from __future__ import annotations

import json
from pathlib import Path


def dump_json_bytes(payload) -> bytes:
    return (json.dumps(payload, indent=2) + "\n").encode("utf-8")


def write_json(path: str | Path, payload) -> None:
    Path(path).write_bytes(dump_json_bytes(payload))


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())
