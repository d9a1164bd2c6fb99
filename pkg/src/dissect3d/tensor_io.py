"""Bit-exact readers and writers for the on-disk tensor formats.

Two binary formats are handled here, both parsed by hand so that the byte
layout is fully under this module's control:

* NPY v1.0 — the tensor interchange format used for activation maps and
  patches. Only version 1.0 headers are accepted and only the three element
  types the engine needs (float32, float64, int16). Payloads start at a
  64-byte boundary.
* NIfTI-1 — the volume format used for CT ingestion and 3D exports. Only the
  minimal single-stream subset is supported: 348-byte header, int16/float32
  data, geometry from sform (preferred) or qform.

Parsers are total: any malformed byte sequence raises a typed
:mod:`dissect3d.errors` exception, never an uncaught one.
"""

from __future__ import annotations

import ast
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    MalformedHeader,
    NonInvertibleOrientation,
    TruncatedPayload,
    UnsupportedDatatype,
    UnsupportedElementType,
)

NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64

# element types supported by the interchange format, keyed by NPY descr
_DESCR_TO_DTYPE = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "<i2": np.dtype("<i2"),
}
_DTYPE_TO_DESCR = {np.dtype(k): k for k in _DESCR_TO_DTYPE}

MAX_TENSOR_RANK = 4


def _check_tensor(arr: np.ndarray) -> np.ndarray:
    """Validate the tensor contract; returns a C-contiguous little-endian view."""
    if arr.ndim < 1 or arr.ndim > MAX_TENSOR_RANK:
        raise ValueError(f"tensor rank must be in [1, {MAX_TENSOR_RANK}], got {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TO_DESCR:
        raise ValueError(f"unsupported element type {arr.dtype}")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def read_tensor(data: bytes) -> np.ndarray:
    """Decode an NPY v1.0 byte sequence into a row-major array.

    Column-major (``fortran_order: True``) files are transposed on load so the
    returned array is always C-contiguous with the header's logical shape.

    Raises:
        MalformedHeader: bad magic, non-1.0 version, or unparseable header.
        UnsupportedElementType: descr outside {<f4, <f8, <i2}.
        TruncatedPayload: payload size disagrees with the header.
    """
    if len(data) < 10:
        raise MalformedHeader("shorter than the fixed 10-byte prelude")
    if data[:6] != NPY_MAGIC:
        raise MalformedHeader("bad NPY magic")
    if data[6:8] != b"\x01\x00":
        raise MalformedHeader(f"only NPY v1.0 is supported, got version {data[6]}.{data[7]}")
    (hlen,) = struct.unpack("<H", data[8:10])
    if len(data) < 10 + hlen:
        raise MalformedHeader("header extends past end of data")
    try:
        header_text = data[10 : 10 + hlen].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader("header is not ASCII") from exc
    try:
        header = ast.literal_eval(header_text.strip())
    except (ValueError, SyntaxError, MemoryError, RecursionError) as exc:
        raise MalformedHeader("header is not a Python dict literal") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader("header must contain exactly descr/fortran_order/shape")

    descr = header["descr"]
    if not isinstance(descr, str) or descr not in _DESCR_TO_DTYPE:
        raise UnsupportedElementType(f"descr {descr!r} not in {sorted(_DESCR_TO_DTYPE)}")
    dtype = _DESCR_TO_DTYPE[descr]

    fortran = header["fortran_order"]
    if not isinstance(fortran, bool):
        raise MalformedHeader("fortran_order must be a bool")

    shape = header["shape"]
    if (
        not isinstance(shape, tuple)
        or not 1 <= len(shape) <= MAX_TENSOR_RANK
        or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
    ):
        raise MalformedHeader(
            f"shape must be a tuple of 1..{MAX_TENSOR_RANK} positive ints, got {shape!r}"
        )

    count = math.prod(shape)
    payload = data[10 + hlen :]
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise TruncatedPayload(f"payload is {len(payload)} bytes, header implies {expected}")

    flat = np.frombuffer(payload, dtype=dtype).copy()
    arr = flat.reshape(shape, order="F" if fortran else "C")
    return np.ascontiguousarray(arr)


def write_tensor(arr: np.ndarray) -> bytes:
    """Encode an array as NPY v1.0 bytes (row-major, payload 64-byte aligned)."""
    arr = _check_tensor(arr)
    descr = _DTYPE_TO_DESCR[arr.dtype]
    dict_str = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, repr(arr.shape))
    base = 10 + len(dict_str) + 1
    pad = (NPY_ALIGN - base % NPY_ALIGN) % NPY_ALIGN
    header_text = dict_str + " " * pad + "\n"
    if len(header_text) > 0xFFFF:
        raise ValueError("header too long for NPY v1.0")
    out = bytearray()
    out += NPY_MAGIC
    out += b"\x01\x00"
    out += struct.pack("<H", len(header_text))
    out += header_text.encode("ascii")
    out += arr.tobytes()
    return bytes(out)


def read_tensor_shape(data: bytes) -> tuple[int, ...]:
    """Decode only the header and return the logical shape (payload ignored)."""
    if len(data) < 10 or data[:6] != NPY_MAGIC or data[6:8] != b"\x01\x00":
        raise MalformedHeader("not an NPY v1.0 prelude")
    (hlen,) = struct.unpack("<H", data[8:10])
    probe = data[: 10 + hlen] + b""  # header only; fabricate nothing
    try:
        header = ast.literal_eval(probe[10:].decode("ascii").strip())
        shape = header["shape"]
    except Exception as exc:  # noqa: BLE001 - reported as a typed error
        raise MalformedHeader("unparseable header") from exc
    if not isinstance(shape, tuple) or not all(isinstance(d, int) for d in shape):
        raise MalformedHeader("header shape is not a tuple of ints")
    return shape


def load_tensor_shape(path: str | Path) -> tuple[int, ...]:
    with open(path, "rb") as handle:
        prelude = handle.read(10)
        if len(prelude) < 10:
            raise MalformedHeader("file shorter than the NPY prelude")
        (hlen,) = struct.unpack("<H", prelude[8:10])
        return read_tensor_shape(prelude + handle.read(hlen))


def load_tensor(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(write_tensor(arr))


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

# (struct format, field name) pairs, in file order; total size is 348 bytes.
_NIFTI_FIELDS = (
    ("i", "sizeof_hdr"),
    ("10s", "data_type"),
    ("18s", "db_name"),
    ("i", "extents"),
    ("h", "session_error"),
    ("b", "regular"),
    ("b", "dim_info"),
    ("8h", "dim"),
    ("f", "intent_p1"),
    ("f", "intent_p2"),
    ("f", "intent_p3"),
    ("h", "intent_code"),
    ("h", "datatype"),
    ("h", "bitpix"),
    ("h", "slice_start"),
    ("8f", "pixdim"),
    ("f", "vox_offset"),
    ("f", "scl_slope"),
    ("f", "scl_inter"),
    ("h", "slice_end"),
    ("b", "slice_code"),
    ("b", "xyzt_units"),
    ("f", "cal_max"),
    ("f", "cal_min"),
    ("f", "slice_duration"),
    ("f", "toffset"),
    ("i", "glmax"),
    ("i", "glmin"),
    ("80s", "descrip"),
    ("24s", "aux_file"),
    ("h", "qform_code"),
    ("h", "sform_code"),
    ("f", "quatern_b"),
    ("f", "quatern_c"),
    ("f", "quatern_d"),
    ("f", "qoffset_x"),
    ("f", "qoffset_y"),
    ("f", "qoffset_z"),
    ("4f", "srow_x"),
    ("4f", "srow_y"),
    ("4f", "srow_z"),
    ("16s", "intent_name"),
    ("4s", "magic"),
)
NIFTI_HEADER_SIZE = 348
assert struct.calcsize("<" + "".join(f for f, _ in _NIFTI_FIELDS)) == NIFTI_HEADER_SIZE

_NIFTI_DT_INT16 = 4
_NIFTI_DT_FLOAT32 = 16
_NIFTI_DTYPES = {_NIFTI_DT_INT16: np.dtype("<i2"), _NIFTI_DT_FLOAT32: np.dtype("<f4")}

INTENSITY_UNITS = ("HU", "normalized", "raw")

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Volume:
    """A 3D grid with physical geometry.

    ``axis_directions`` holds one unit world-direction per column; voxel index
    ``(i, j, k)`` sits at ``origin_mm + axis_directions @ (index * spacing_mm)``.
    """

    data: np.ndarray  # 3D, float32
    spacing_mm: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin_mm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis_directions: np.ndarray = field(default_factory=lambda: np.eye(3))
    intensity_unit: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float32))
        object.__setattr__(self, "spacing_mm", np.asarray(self.spacing_mm, dtype=np.float64))
        object.__setattr__(self, "origin_mm", np.asarray(self.origin_mm, dtype=np.float64))
        object.__setattr__(
            self, "axis_directions", np.asarray(self.axis_directions, dtype=np.float64)
        )
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if self.spacing_mm.shape != (3,) or np.any(self.spacing_mm <= 0):
            raise ValueError("spacing must be three strictly positive values")
        if self.origin_mm.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        d = self.axis_directions
        if d.shape != (3, 3) or not np.allclose(d.T @ d, np.eye(3), atol=_ORTHO_TOL):
            raise ValueError("axis_directions must be orthonormal within 1e-6")
        if self.intensity_unit not in INTENSITY_UNITS:
            raise ValueError(f"intensity_unit must be one of {INTENSITY_UNITS}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_world(self, index: np.ndarray) -> np.ndarray:
        """Map (possibly fractional) voxel indices to world millimetres."""
        idx = np.asarray(index, dtype=np.float64)
        return self.origin_mm + (self.axis_directions @ (idx * self.spacing_mm).T).T

    def world_to_index(self, world: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`index_to_world` (orthonormal directions assumed)."""
        w = np.asarray(world, dtype=np.float64)
        return (self.axis_directions.T @ (w - self.origin_mm).T).T / self.spacing_mm


def _unpack_header(data: bytes) -> dict:
    fields = {}
    offset = 0
    for fmt, name in _NIFTI_FIELDS:
        values = struct.unpack_from("<" + fmt, data, offset)
        offset += struct.calcsize("<" + fmt)
        fields[name] = values if len(values) > 1 else values[0]
    return fields


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray:
    norm_sq = b * b + c * c + d * d
    if norm_sq > 1.0 + 1e-5:
        raise NonInvertibleOrientation("quaternion norm exceeds 1")
    a = math.sqrt(max(0.0, 1.0 - norm_sq))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
        ]
    )


def _validate_directions(directions: np.ndarray) -> np.ndarray:
    if abs(np.linalg.det(directions)) < 1e-6:
        raise NonInvertibleOrientation("direction matrix is singular")
    if not np.allclose(directions.T @ directions, np.eye(3), atol=_ORTHO_TOL):
        raise NonInvertibleOrientation("direction matrix is not orthonormal")
    return directions


def read_nifti(data: bytes) -> Volume:
    """Decode a single-stream NIfTI-1 byte sequence into a :class:`Volume`.

    Geometry comes from the sform when ``sform_code > 0``, else the qform,
    else identity; spacing always comes from pixdim. Voxels are scaled by
    scl_slope/scl_inter when the slope is set. CT ingestion is assumed, so
    the returned volume is tagged with Hounsfield units.
    """
    if len(data) < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"shorter than the {NIFTI_HEADER_SIZE}-byte NIfTI-1 header")
    h = _unpack_header(data[:NIFTI_HEADER_SIZE])
    if h["magic"] not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"magic {h['magic']!r} is not a NIfTI-1 magic")
    if h["sizeof_hdr"] != NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"sizeof_hdr is {h['sizeof_hdr']}, must be {NIFTI_HEADER_SIZE}")
    if h["datatype"] not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"datatype code {h['datatype']} (supported: int16, float32)")
    dtype = _NIFTI_DTYPES[h["datatype"]]

    ndim = h["dim"][0]
    if not 3 <= ndim <= 7:
        raise MalformedHeader(f"dim[0] is {ndim}, need a 3D volume")
    shape = tuple(int(d) for d in h["dim"][1:4])
    trailing = h["dim"][4 : 1 + ndim]
    if any(d <= 0 for d in shape) or any(d != 1 for d in trailing):
        raise MalformedHeader(f"unsupported dim layout {h['dim'][: 1 + ndim]}")

    spacing = np.array([float(p) for p in h["pixdim"][1:4]])
    if np.any(~np.isfinite(spacing)) or np.any(spacing <= 0):
        raise MalformedHeader(f"pixdim spacings must be positive, got {spacing}")

    if h["sform_code"] > 0:
        affine = np.array([h["srow_x"][:3], h["srow_y"][:3], h["srow_z"][:3]], dtype=np.float64)
        if not np.all(np.isfinite(affine)):
            raise NonInvertibleOrientation("sform rows are not finite")
        norms = np.linalg.norm(affine, axis=0)
        if np.any(norms < 1e-12):
            raise NonInvertibleOrientation("sform has a zero column")
        directions = _validate_directions(affine / norms)
        origin = np.array([h["srow_x"][3], h["srow_y"][3], h["srow_z"][3]], dtype=np.float64)
    elif h["qform_code"] > 0:
        for name in ("quatern_b", "quatern_c", "quatern_d", "qoffset_x", "qoffset_y", "qoffset_z"):
            if not math.isfinite(h[name]):
                raise NonInvertibleOrientation(f"{name} is not finite")
        rot = _quaternion_rotation(h["quatern_b"], h["quatern_c"], h["quatern_d"])
        qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
        rot[:, 2] *= qfac
        directions = _validate_directions(rot)
        origin = np.array([h["qoffset_x"], h["qoffset_y"], h["qoffset_z"]], dtype=np.float64)
    else:
        directions = np.eye(3)
        origin = np.zeros(3)

    if h["magic"] == b"n+1\x00":
        if not math.isfinite(h["vox_offset"]) or h["vox_offset"] < NIFTI_HEADER_SIZE:
            raise MalformedHeader(f"vox_offset {h['vox_offset']} is invalid")
        offset = int(h["vox_offset"])
    else:
        # "ni1" pairs keep data in a separate .img; this reader supports the
        # concatenated single-stream form with the payload right after the header.
        offset = NIFTI_HEADER_SIZE

    count = shape[0] * shape[1] * shape[2]
    payload = data[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedPayload(
            f"need {count * dtype.itemsize} voxel bytes at offset {offset}, have {len(payload)}"
        )
    # dim[1] varies fastest on disk
    voxels = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F").astype(np.float32)
    slope, inter = float(h["scl_slope"]), float(h["scl_inter"])
    if not (math.isfinite(slope) and math.isfinite(inter)):
        raise MalformedHeader("scl_slope/scl_inter are not finite")
    if slope != 0.0 and (slope, inter) != (1.0, 0.0):
        voxels = voxels * np.float32(slope) + np.float32(inter)

    return Volume(
        data=np.ascontiguousarray(voxels),
        spacing_mm=spacing,
        origin_mm=origin,
        axis_directions=directions,
        intensity_unit="HU",
    )


def _field_arity(fmt: str) -> int:
    return 1 if fmt.endswith("s") or len(fmt) == 1 else int(fmt[:-1])


def write_nifti(volume: Volume) -> bytes:
    """Encode a :class:`Volume` as single-file NIfTI-1 (float32, sform geometry)."""
    shape = volume.shape
    affine = volume.axis_directions * volume.spacing_mm  # scales columns
    values = {
        name: b"" if fmt.endswith("s") else ((0,) * _field_arity(fmt) if _field_arity(fmt) > 1 else 0)
        for fmt, name in _NIFTI_FIELDS
    }
    values.update(
        sizeof_hdr=NIFTI_HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        regular=ord("r"),
        dim=(3, shape[0], shape[1], shape[2], 1, 1, 1, 1),
        datatype=_NIFTI_DT_FLOAT32,
        bitpix=32,
        pixdim=(1.0, float(volume.spacing_mm[0]), float(volume.spacing_mm[1]),
                float(volume.spacing_mm[2]), 1.0, 1.0, 1.0, 1.0),
        vox_offset=352.0,
        scl_slope=1.0,
        scl_inter=0.0,
        descrip=b"dissect3d",
        aux_file=b"",
        qform_code=0,
        sform_code=1,
        srow_x=(affine[0, 0], affine[0, 1], affine[0, 2], float(volume.origin_mm[0])),
        srow_y=(affine[1, 0], affine[1, 1], affine[1, 2], float(volume.origin_mm[1])),
        srow_z=(affine[2, 0], affine[2, 1], affine[2, 2], float(volume.origin_mm[2])),
        intent_name=b"",
        magic=b"n+1\x00",
    )
    out = bytearray()
    for fmt, name in _NIFTI_FIELDS:
        v = values[name]
        if isinstance(v, tuple):
            out += struct.pack("<" + fmt, *v)
        else:
            out += struct.pack("<" + fmt, v)
    assert len(out) == NIFTI_HEADER_SIZE
    out += b"\x00" * 4  # pad header block to vox_offset 352
    out += np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    return bytes(out)


def load_nifti(path: str | Path) -> Volume:
    """Read a .nii or .nii.gz file (gzip handled here, parsing stays pure)."""
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        import gzip

        raw = gzip.decompress(raw)
    return read_nifti(raw)


def save_nifti(path: str | Path, volume: Volume) -> None:
    raw = write_nifti(volume)
    if str(path).endswith(".gz"):
        import gzip

        raw = gzip.compress(raw, mtime=0)
    Path(path).write_bytes(raw)
