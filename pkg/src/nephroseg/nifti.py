"""Reader and writer for single-file NIfTI-1 volumes.

Only the subset the pipeline needs is supported: 3D volumes (a 4D header
with a singleton fourth axis is accepted) stored as uint8, int16, int32 or
float32, optionally wrapped in gzip.  Orientation fields (qform/sform) are
parsed and carried through but never used to reorient voxels.

Arrays are indexed ``[x, y, z]``; on disk x varies fastest.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConsistencyError,
    DomainError,
    FormatError,
    TruncationError,
    UnsupportedTypeError,
)

HEADER_SIZE = 348
CANONICAL_VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> (numpy dtype char, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
}
DTYPE_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
               np.dtype(np.int32): 8, np.dtype(np.float32): 16}

# (name, struct code) in on-disk order; 348 bytes total.
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


def _unpack(raw: bytes, endian: str) -> dict:
    values = list(struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE]))
    out = {}
    for name, code in _FIELDS:
        n = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if n == 1:
            out[name] = values.pop(0)
        else:
            out[name] = tuple(values[:n])
            del values[:n]
    return out


@dataclass(frozen=True)
class NiftiHeader:
    dims: tuple[int, ...]
    datatype_code: int
    pixdim: tuple[float, ...]
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    vox_offset: float = float(CANONICAL_VOX_OFFSET)
    magic: bytes = MAGIC_SINGLE
    xyzt_units: int = 2  # millimetres
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    srow_x: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    srow_y: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    srow_z: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    descrip: bytes = b""
    endian: str = "<"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.dims[1:4])

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(float(p) for p in self.pixdim[1:4])

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.endian + DATATYPES[self.datatype_code][0])

    @property
    def scaled(self) -> bool:
        return self.scl_slope != 0 and not (self.scl_slope == 1 and self.scl_inter == 0)

    def validate(self) -> None:
        if self.dims[0] not in (3, 4):
            raise FormatError(f"dim[0] must be 3 or 4, got {self.dims[0]}")
        if any(d < 1 for d in self.dims[1:4]):
            raise FormatError(f"spatial dims must be >= 1, got {self.dims[1:4]}")
        if self.dims[0] == 4 and self.dims[4] > 1:
            raise FormatError("4D time series are not supported")
        if self.datatype_code not in DATATYPES:
            raise UnsupportedTypeError(f"unsupported datatype code {self.datatype_code}")
        if any(not p > 0 for p in self.pixdim[1:4]):
            raise FormatError(f"pixdim[1..3] must be positive, got {self.pixdim[1:4]}")


@dataclass(frozen=True)
class NiftiImage:
    header: NiftiHeader
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape != self.header.shape:
            raise ConsistencyError(
                f"payload shape {self.data.shape} does not match header dims {self.header.shape}")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.header.spacing


def _f4_decimal(x: float) -> float:
    """Shortest decimal that rounds to the same float32 as ``x``.

    pixdim is stored as float32, so 1.62 comes back as 1.6200000047...;
    taking the shortest round-tripping decimal recovers the written value
    and keeps voxel volumes free of that representation error.
    """
    return float(str(np.float32(x)))


def make_header(shape, spacing, datatype_code: int, **kwargs) -> NiftiHeader:
    """Canonical header for a 3D volume."""
    if datatype_code not in DATATYPES:
        raise UnsupportedTypeError(f"unsupported datatype code {datatype_code}")
    dims = (3, *(int(s) for s in shape), 1, 1, 1, 1)
    pixdim = (1.0, *(float(s) for s in spacing), 0.0, 0.0, 0.0, 0.0)
    # snap to what an f4 field can carry so spacing survives a round trip
    pixdim = tuple(_f4_decimal(p) for p in pixdim)
    return NiftiHeader(dims=dims, datatype_code=datatype_code, pixdim=pixdim, **kwargs)


def image_from_array(data, spacing, datatype_code: int | None = None) -> NiftiImage:
    data = np.asarray(data)
    if datatype_code is None:
        if data.dtype not in DTYPE_CODES:
            raise UnsupportedTypeError(f"no NIfTI datatype for {data.dtype}")
        datatype_code = DTYPE_CODES[data.dtype]
    header = make_header(data.shape, spacing, datatype_code)
    return NiftiImage(header, data.astype(header.dtype.newbyteorder("="), copy=False))


def voxel_volume(header: NiftiHeader) -> float:
    """Voxel volume in mm^3."""
    sx, sy, sz = header.spacing
    if min(sx, sy, sz) <= 0:
        raise DomainError(f"voxel spacing must be positive, got {(sx, sy, sz)}")
    return sx * sy * sz


def _detect_endian(raw: bytes) -> str:
    if len(raw) < HEADER_SIZE:
        raise TruncationError(f"stream of {len(raw)} bytes is shorter than a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            return endian
    raise FormatError("sizeof_hdr is not 348 in either byte order")


def read_header(raw: bytes) -> NiftiHeader:
    endian = _detect_endian(raw)
    f = _unpack(raw, endian)
    if f["magic"] != MAGIC_SINGLE:
        raise FormatError(f"bad magic {f['magic']!r}; expected single-file 'n+1'")
    header = NiftiHeader(
        dims=tuple(f["dim"]),
        datatype_code=f["datatype"],
        pixdim=tuple(_f4_decimal(p) for p in f["pixdim"]),
        scl_slope=f["scl_slope"],
        scl_inter=f["scl_inter"],
        vox_offset=f["vox_offset"],
        magic=f["magic"],
        xyzt_units=f["xyzt_units"],
        qform_code=f["qform_code"],
        sform_code=f["sform_code"],
        quatern=(f["quatern_b"], f["quatern_c"], f["quatern_d"]),
        qoffset=(f["qoffset_x"], f["qoffset_y"], f["qoffset_z"]),
        srow_x=tuple(f["srow_x"]),
        srow_y=tuple(f["srow_y"]),
        srow_z=tuple(f["srow_z"]),
        descrip=f["descrip"].rstrip(b"\x00"),
        endian=endian,
    )
    header.validate()
    return header


def read_nifti(raw: bytes) -> NiftiImage:
    """Parse a NIfTI-1 byte stream, raw or gzip-compressed.

    Voxel values come back with intensity scaling applied whenever
    ``scl_slope`` is nonzero; otherwise the stored values are returned in
    their stored dtype.
    """
    raw = bytes(raw)
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncationError(f"corrupt gzip container: {exc}") from exc
    header = read_header(raw)
    offset = int(header.vox_offset)
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {header.vox_offset} lies inside the header")
    count = int(np.prod(header.shape))
    nbytes = count * header.dtype.itemsize
    if len(raw) < offset + nbytes:
        raise TruncationError(
            f"payload needs {nbytes} bytes at offset {offset}, stream has {len(raw) - offset}")
    stored = np.frombuffer(raw, dtype=header.dtype, count=count, offset=offset)
    data = stored.astype(header.dtype.newbyteorder("=")).reshape(header.shape, order="F")
    if header.scaled:
        data = data.astype(np.float64) * float(header.scl_slope) + float(header.scl_inter)
    return NiftiImage(header, data)


def _pack_header(h: NiftiHeader) -> bytes:
    dtype_char, bitpix = DATATYPES[h.datatype_code]
    values = [
        HEADER_SIZE, b"", b"", 0, 0, b"r", 0,
        *h.dims,
        0.0, 0.0, 0.0, 0,
        h.datatype_code, bitpix, 0,
        *h.pixdim,
        float(CANONICAL_VOX_OFFSET), h.scl_slope, h.scl_inter,
        0, 0, h.xyzt_units,
        0.0, 0.0, 0.0, 0.0, 0, 0,
        h.descrip[:80], b"",
        h.qform_code, h.sform_code,
        *h.quatern, *h.qoffset,
        *h.srow_x, *h.srow_y, *h.srow_z,
        b"", MAGIC_SINGLE,
    ]
    return struct.pack("<" + _FORMAT, *values)


def write_nifti(image: NiftiImage, compress: bool = False) -> bytes:
    """Serialize to the canonical form: single file, little-endian, vox_offset 352."""
    h = image.header
    h.validate()
    data = np.asarray(image.data)
    if data.shape != h.shape:
        raise ConsistencyError(f"payload shape {data.shape} does not match header dims {h.shape}")
    target = np.dtype("<" + DATATYPES[h.datatype_code][0])
    if h.scaled:
        data = (data.astype(np.float64) - float(h.scl_inter)) / float(h.scl_slope)
    if target.kind in "iu":
        if data.dtype.kind == "f":
            data = np.rint(data)
        info = np.iinfo(target)
        if data.size and (data.min() < info.min or data.max() > info.max):
            raise ConsistencyError(f"voxel values exceed the range of {target}")
    payload = data.astype(target).tobytes(order="F")
    out = _pack_header(replace(h, vox_offset=float(CANONICAL_VOX_OFFSET)))
    out += b"\x00" * (CANONICAL_VOX_OFFSET - HEADER_SIZE) + payload
    if compress:
        # mtime pinned so identical volumes give identical bytes
        out = gzip.compress(out, mtime=0)
    return out


def load_nifti(path) -> NiftiImage:
    with open(path, "rb") as fh:
        return read_nifti(fh.read())


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_nifti(path, image: NiftiImage, compress: bool | None = None) -> None:
    if compress is None:
        compress = os.fspath(path).endswith(".gz")
    atomic_write_bytes(path, write_nifti(image, compress=compress))
