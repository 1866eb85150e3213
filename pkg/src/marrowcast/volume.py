"""Volumes, masks and single-file NIfTI-1 I/O.

Arrays are indexed ``[x, y, z]``; on disk the voxel order is x-fastest
(Fortran order), as NIfTI requires. Voxel data is held as float32 so that
a save/load roundtrip is bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (GeometryError, NiftiFormatError, NiftiIOError,
                     UnsupportedDataError)

# NIfTI-1 header, 348 bytes, little-endian.
NIFTI1_HEADER = np.dtype([
    ("sizeof_hdr", "<i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "<i4"),
    ("session_error", "<i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "<i2", (8,)),
    ("intent_p1", "<f4"), ("intent_p2", "<f4"), ("intent_p3", "<f4"), ("intent_code", "<i2"),
    ("datatype", "<i2"), ("bitpix", "<i2"), ("slice_start", "<i2"), ("pixdim", "<f4", (8,)),
    ("vox_offset", "<f4"), ("scl_slope", "<f4"), ("scl_inter", "<f4"), ("slice_end", "<i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "<f4"), ("cal_min", "<f4"),
    ("slice_duration", "<f4"), ("toffset", "<f4"), ("glmax", "<i4"), ("glmin", "<i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "<i2"), ("sform_code", "<i2"),
    ("quatern_b", "<f4"), ("quatern_c", "<f4"), ("quatern_d", "<f4"),
    ("qoffset_x", "<f4"), ("qoffset_y", "<f4"), ("qoffset_z", "<f4"),
    ("srow_x", "<f4", (4,)), ("srow_y", "<f4", (4,)), ("srow_z", "<f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert NIFTI1_HEADER.itemsize == 348

DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"


def _f32(values):
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True, eq=False)
class Volume:
    """3-D scalar image on a regular grid.

    ``spacing`` is millimetres per voxel along x, y, z. ``meta`` is free-form
    provenance that does not travel through NIfTI files.
    """
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume data must be 3-D with all dims >= 1, got {data.shape}")
        data = np.array(data, dtype=np.float32, order="C")
        if not np.all(np.isfinite(data)):
            raise GeometryError("volume contains non-finite values")
        spacing = _f32(self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise GeometryError(f"spacing must be three positive numbers, got {self.spacing}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        self._validate()

    def _validate(self):
        pass

    @property
    def dims(self):
        return self.data.shape

    @property
    def geometry(self):
        return Geometry(self.dims, self.spacing)

    def with_data(self, data, **meta):
        """Same geometry and kind, new voxel values."""
        return type(self)(data, self.spacing, {**self.meta, **meta})

    def same_geometry(self, other):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing)


class MaskVolume(Volume):
    """Volume whose values lie in [0, 1] (bone masks, annotations, risk maps)."""

    def _validate(self):
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise GeometryError("mask values must lie in [0, 1]")

    def binary(self, threshold=0.5):
        return self.data >= threshold


@dataclass(frozen=True)
class Geometry:
    dims: tuple
    spacing: tuple


def check_same_geometry(*vols):
    first = vols[0]
    for v in vols[1:]:
        if not first.same_geometry(v):
            raise GeometryError(
                f"geometry mismatch: {first.dims}/{first.spacing} vs {v.dims}/{v.spacing}")


# -- NIfTI ------------------------------------------------------------------

def save_nifti(vol, path):
    """Write a single-file ``.nii`` (float32, vox_offset 352, magic ``n+1``)."""
    hdr = np.zeros((), dtype=NIFTI1_HEADER)
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, nx, ny, nz, 1, 1, 1, 1]
    hdr["datatype"] = DT_FLOAT32
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, sx, sy, sz, 0, 0, 0, 0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # millimetres
    hdr["sform_code"] = 1
    hdr["srow_x"] = [sx, 0, 0, 0]
    hdr["srow_y"] = [0, sy, 0, 0]
    hdr["srow_z"] = [0, 0, sz, 0]
    hdr["descrip"] = b"mask" if isinstance(vol, MaskVolume) else b"intensity"
    hdr["magic"] = MAGIC_SINGLE
    payload = vol.data.astype("<f4").tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(b"\x00" * (VOX_OFFSET - 348))
            fh.write(payload)
    except OSError as exc:
        raise NiftiIOError(f"cannot write {path}: {exc}") from exc


def load_nifti(path, kind=None):
    """Read a little-endian NIfTI-1 volume (int16 or float32, 3-D).

    Returns a :class:`MaskVolume` when the header was written as a mask by
    :func:`save_nifti` (or ``kind="mask"``), else a :class:`Volume`.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise NiftiIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 348:
        raise NiftiIOError(f"{path}: file shorter than the 348-byte header")
    hdr = np.frombuffer(raw[:348], dtype=NIFTI1_HEADER)[0]
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    if int(hdr["sizeof_hdr"]) != 348:
        raise UnsupportedDataError(f"{path}: sizeof_hdr={int(hdr['sizeof_hdr'])}, only little-endian NIfTI-1 is supported")
    dim = [int(d) for d in hdr["dim"]]
    if dim[0] != 3:
        raise UnsupportedDataError(f"{path}: dim[0]={dim[0]}, only 3-D volumes are supported")
    dtype = _DTYPES.get(int(hdr["datatype"]))
    if dtype is None:
        raise UnsupportedDataError(f"{path}: unsupported datatype code {int(hdr['datatype'])}")
    shape = tuple(dim[1:4])
    if min(shape) < 1:
        raise NiftiFormatError(f"{path}: non-positive dims {shape}")
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if magic == MAGIC_SINGLE:
        offset = int(hdr["vox_offset"])
        body = raw[offset:offset + nbytes]
    else:
        img = path.with_suffix(".img")
        try:
            body = img.read_bytes()[int(hdr["vox_offset"]):][:nbytes]
        except OSError as exc:
            raise NiftiIOError(f"cannot read image file {img}: {exc}") from exc
    if len(body) < nbytes:
        raise NiftiIOError(f"{path}: truncated data, expected {nbytes} bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dtype).reshape(shape, order="F")
    if dtype == _DTYPES[DT_INT16]:
        slope = float(hdr["scl_slope"]) or 1.0
        data = data.astype(np.float64) * slope + float(hdr["scl_inter"])
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    is_mask = kind == "mask" or (kind is None and bytes(hdr["descrip"]).rstrip(b"\x00") == b"mask")
    cls = MaskVolume if is_mask else Volume
    return cls(data, spacing, {"source": str(path)})


# -- slicing and intensity --------------------------------------------------

def axial_slice(vol, k):
    """Copy of the (nx, ny) plane at z = k."""
    nz = vol.dims[2]
    if not 0 <= k < nz:
        raise IndexError(f"slice index {k} outside [0, {nz})")
    return vol.data[:, :, k].copy()


def stack_slices(slices, spacing=(1.0, 1.0, 1.0), cls=Volume):
    return cls(np.stack(slices, axis=2), spacing)


def normalize_intensity(vol, low=1.0, high=99.0):
    """Map the ``low``/``high`` intensity percentiles to 0/1 and clamp.

    Percentiles use the nearest-rank definition (rank = ceil(p/100 * N)).
    A constant volume has no usable range and maps to all zeros.
    """
    data = vol.data.astype(np.float64)
    lo, hi = np.percentile(data, [low, high], method="inverted_cdf")
    if hi <= lo:
        return vol.with_data(np.zeros_like(data), normalized=True)
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return vol.with_data(out, normalized=True)
