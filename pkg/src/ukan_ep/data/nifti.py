"""Single-file NIfTI-1 (``.nii``) reader and writer, uncompressed only."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
_FORMAT = "i10s18sihsB8h3f4h8f3fhBB4f2i80s24s2h3f3f4f4f4f16s4s"
_FIELDS = (
    "sizeof_hdr", "data_type", "db_name", "extents", "session_error", "regular", "dim_info",
    *(f"dim{i}" for i in range(8)),
    "intent_p1", "intent_p2", "intent_p3", "intent_code", "datatype", "bitpix", "slice_start",
    *(f"pixdim{i}" for i in range(8)),
    "vox_offset", "scl_slope", "scl_inter", "slice_end", "slice_code", "xyzt_units",
    "cal_max", "cal_min", "slice_duration", "toffset", "glmax", "glmin", "descrip", "aux_file",
    "qform_code", "sform_code", "quatern_b", "quatern_c", "quatern_d",
    "qoffset_x", "qoffset_y", "qoffset_z",
    *(f"srow_x{i}" for i in range(4)), *(f"srow_y{i}" for i in range(4)), *(f"srow_z{i}" for i in range(4)),
    "intent_name", "magic",
)

DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_CODES = {np.dtype(v): k for k, v in DATATYPES.items()}


class NiftiError(ValueError):
    pass


@dataclass
class NiftiHeader:
    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 16
    bitpix: int = 32
    vox_offset: float = float(VOX_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    pixdim: tuple = (1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    srow_x: tuple = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple = (0.0, 0.0, 1.0, 0.0)
    qform_code: int = 0
    sform_code: int = 1
    xyzt_units: int = 2
    descrip: bytes = b""
    magic: bytes = b"n+1\x00"
    sizeof_hdr: int = HEADER_SIZE
    endian: str = field(default="<", compare=False)

    @property
    def shape(self):
        return tuple(int(n) for n in self.dim[1 : 1 + self.dim[0]])

    @property
    def spacing(self):
        return tuple(float(p) for p in self.pixdim[1 : 1 + self.dim[0]])


def _detect_endian(raw):
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            return endian
    raise NiftiError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")


def read_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(raw)} bytes")
    endian = _detect_endian(raw)
    values = dict(zip(_FIELDS, struct.unpack(endian + _FORMAT, raw[:HEADER_SIZE])))
    magic = values["magic"]
    if magic == b"ni1\x00":
        raise NiftiError("detached header/image pairs (magic 'ni1') are not supported")
    if magic != b"n+1\x00":
        raise NiftiError(f"bad magic {magic!r}")
    hdr = NiftiHeader(
        dim=tuple(values[f"dim{i}"] for i in range(8)),
        datatype=values["datatype"],
        bitpix=values["bitpix"],
        vox_offset=values["vox_offset"],
        scl_slope=values["scl_slope"],
        scl_inter=values["scl_inter"],
        pixdim=tuple(values[f"pixdim{i}"] for i in range(8)),
        srow_x=tuple(values[f"srow_x{i}"] for i in range(4)),
        srow_y=tuple(values[f"srow_y{i}"] for i in range(4)),
        srow_z=tuple(values[f"srow_z{i}"] for i in range(4)),
        qform_code=values["qform_code"],
        sform_code=values["sform_code"],
        xyzt_units=values["xyzt_units"],
        descrip=values["descrip"].rstrip(b"\x00"),
        magic=magic,
        sizeof_hdr=values["sizeof_hdr"],
        endian=endian,
    )
    if hdr.datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {hdr.datatype}")
    if hdr.vox_offset < VOX_OFFSET:
        raise NiftiError(f"vox_offset {hdr.vox_offset} < {VOX_OFFSET}")
    if not 1 <= hdr.dim[0] <= 7:
        raise NiftiError(f"invalid rank dim[0]={hdr.dim[0]}")
    return hdr


def read_nifti(path):
    """Return ``(volume, header)``; ``volume`` axes follow ``dim[1..]`` order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raise NiftiError("gzip-compressed NIfTI is not supported; decompress first")
    hdr = read_header(raw)
    dtype = np.dtype(DATATYPES[hdr.datatype]).newbyteorder(hdr.endian)
    shape = hdr.shape
    count = int(np.prod(shape))
    start = int(hdr.vox_offset)
    if len(raw) < start + count * dtype.itemsize:
        raise NiftiError(f"truncated image data: need {start + count * dtype.itemsize} bytes, have {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape, order="F")
    data = np.ascontiguousarray(data.astype(dtype.newbyteorder("="), copy=True))
    # drop trailing singleton axes beyond the first three
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if hdr.scl_slope != 0 and not (hdr.scl_slope == 1 and hdr.scl_inter == 0):
        data = data.astype(np.float64) * hdr.scl_slope + hdr.scl_inter
    return data, hdr


def encode_nifti(volume, header: NiftiHeader | None = None, endian="<", **overrides) -> bytes:
    """Serialize a rank-3 volume; header fields may be overridden by keyword."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise NiftiError(f"expected a rank-3 volume, got shape {volume.shape}")
    code = overrides.pop("datatype", None)
    if code is None:
        if volume.dtype not in _CODES:
            raise NiftiError(f"unsupported dtype {volume.dtype}")
        code = _CODES[volume.dtype]
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = np.dtype(DATATYPES[code])
    hdr = NiftiHeader() if header is None else replace(header)
    known = {f.name for f in fields(NiftiHeader)}
    for key, value in overrides.items():
        if key not in known:
            raise NiftiError(f"unknown header field {key!r}")
        setattr(hdr, key, value)
    hdr.datatype = code
    hdr.bitpix = dtype.itemsize * 8
    hdr.dim = (3,) + tuple(volume.shape) + (1, 1, 1, 1)
    hdr.vox_offset = float(VOX_OFFSET)
    hdr.magic = b"n+1\x00"
    values = {name: 0 for name in _FIELDS}
    values.update(
        sizeof_hdr=HEADER_SIZE, data_type=b"", db_name=b"", regular=b"r", descrip=hdr.descrip,
        aux_file=b"", intent_name=b"", magic=hdr.magic, datatype=code, bitpix=hdr.bitpix,
        vox_offset=hdr.vox_offset, scl_slope=hdr.scl_slope, scl_inter=hdr.scl_inter,
        qform_code=hdr.qform_code, sform_code=hdr.sform_code, xyzt_units=hdr.xyzt_units,
    )
    for i in range(8):
        values[f"dim{i}"] = hdr.dim[i]
        values[f"pixdim{i}"] = hdr.pixdim[i]
    for i in range(4):
        values[f"srow_x{i}"] = hdr.srow_x[i]
        values[f"srow_y{i}"] = hdr.srow_y[i]
        values[f"srow_z{i}"] = hdr.srow_z[i]
    head = struct.pack(endian + _FORMAT, *(values[name] for name in _FIELDS))
    payload = volume.astype(dtype.newbyteorder(endian), copy=False).tobytes(order="F")
    return head + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(volume, path, header: NiftiHeader | None = None, **overrides):
    data = encode_nifti(volume, header, "<", **overrides)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
