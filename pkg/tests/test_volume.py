import struct

import numpy as np
import pytest

from marrowcast.errors import GeometryError, NiftiFormatError, NiftiIOError, UnsupportedDataError
from marrowcast.volume import (MaskVolume, Volume, axial_slice, check_same_geometry, load_nifti,
                               normalize_intensity, save_nifti, stack_slices)


def handmade_nifti(path, data, spacing, datatype=16, slope=1.0, inter=0.0, magic=b"n+1\x00", dim0=3):
    """Byte-by-byte NIfTI-1 writer, independent of the package's header dtype."""
    nx, ny, nz = data.shape
    bitpix = {4: 16, 16: 32}[datatype]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, dim0, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    hdr[344:348] = magic
    dtype = "<i2" if datatype == 4 else "<f4"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.astype(dtype).tobytes(order="F"))


class TestNiftiRead:
    def test_reads_handmade_float32(self, tmp_path, rng):
        data = rng.standard_normal((5, 4, 3)).astype(np.float32)
        handmade_nifti(tmp_path / "a.nii", data, (1.5, 2.0, 6.0))
        vol = load_nifti(tmp_path / "a.nii")
        assert vol.data.tobytes() == data.tobytes()
        assert vol.spacing == (1.5, 2.0, 6.0)

    def test_reads_int16_with_scaling(self, tmp_path):
        raw = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
        handmade_nifti(tmp_path / "a.nii", raw, (1, 1, 1), datatype=4, slope=2.0, inter=-3.0)
        vol = load_nifti(tmp_path / "a.nii")
        assert np.array_equal(vol.data, raw * 2.0 - 3.0)

    def test_zero_slope_means_unscaled(self, tmp_path):
        raw = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
        handmade_nifti(tmp_path / "a.nii", raw, (1, 1, 1), datatype=4, slope=0.0)
        assert np.array_equal(load_nifti(tmp_path / "a.nii").data, raw)

    def test_fortran_order(self, tmp_path):
        data = np.zeros((3, 2, 2), dtype=np.float32)
        data[2, 0, 0] = 7.0  # third value on disk when x varies fastest
        handmade_nifti(tmp_path / "a.nii", data, (1, 1, 1))
        body = (tmp_path / "a.nii").read_bytes()[352:]
        assert struct.unpack_from("<f", body, 8)[0] == 7.0
        assert load_nifti(tmp_path / "a.nii").data[2, 0, 0] == 7.0

    def test_bad_magic(self, tmp_path):
        handmade_nifti(tmp_path / "a.nii", np.zeros((2, 2, 2)), (1, 1, 1), magic=b"xxxx")
        with pytest.raises(NiftiFormatError):
            load_nifti(tmp_path / "a.nii")

    def test_4d_unsupported(self, tmp_path):
        handmade_nifti(tmp_path / "a.nii", np.zeros((2, 2, 2)), (1, 1, 1), dim0=4)
        with pytest.raises(UnsupportedDataError):
            load_nifti(tmp_path / "a.nii")

    def test_truncated_data(self, tmp_path):
        handmade_nifti(tmp_path / "a.nii", np.zeros((4, 4, 4)), (1, 1, 1))
        p = tmp_path / "a.nii"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(NiftiIOError):
            load_nifti(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(NiftiIOError):
            load_nifti(tmp_path / "nope.nii")

    def test_big_endian_unsupported(self, tmp_path):
        handmade_nifti(tmp_path / "a.nii", np.zeros((2, 2, 2)), (1, 1, 1))
        p = tmp_path / "a.nii"
        raw = bytearray(p.read_bytes())
        raw[0:4] = struct.pack(">i", 348)
        p.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedDataError):
            load_nifti(p)


class TestNiftiRoundtrip:
    def test_volume_bit_exact(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((7, 5, 3)) * 1000, (0.7, 1.3, 6.0))
        save_nifti(vol, tmp_path / "v.nii")
        back = load_nifti(tmp_path / "v.nii")
        assert type(back) is Volume
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.spacing == vol.spacing

    def test_mask_kind_survives(self, tmp_path):
        m = MaskVolume(np.eye(4)[:, :, None].repeat(2, axis=2), (1, 1, 1))
        save_nifti(m, tmp_path / "m.nii")
        assert isinstance(load_nifti(tmp_path / "m.nii"), MaskVolume)

    def test_header_fields(self, tmp_path):
        save_nifti(Volume(np.zeros((3, 4, 5)), (2, 3, 4)), tmp_path / "v.nii")
        raw = (tmp_path / "v.nii").read_bytes()
        assert struct.unpack_from("<i", raw, 0)[0] == 348
        assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 3, 4, 5)
        assert struct.unpack_from("<f", raw, 108)[0] == 352.0
        assert raw[344:348] == b"n+1\x00"
        assert len(raw) == 352 + 3 * 4 * 5 * 4

    def test_unwritable(self, tmp_path):
        with pytest.raises(NiftiIOError):
            save_nifti(Volume(np.zeros((2, 2, 2))), tmp_path / "no" / "such" / "dir.nii")


class TestVolume:
    def test_data_is_read_only(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1

    def test_rejects_non_3d(self):
        with pytest.raises(GeometryError):
            Volume(np.zeros((2, 2)))

    def test_rejects_nan(self):
        with pytest.raises(GeometryError):
            Volume(np.full((2, 2, 2), np.nan))

    def test_mask_range(self):
        with pytest.raises(GeometryError):
            MaskVolume(np.full((2, 2, 2), 1.5))

    def test_geometry_check(self):
        with pytest.raises(GeometryError):
            check_same_geometry(Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3))))
        with pytest.raises(GeometryError):
            check_same_geometry(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), Volume(np.zeros((2, 2, 2)), (1, 1, 2)))

    def test_slices_roundtrip(self, rng):
        v = Volume(rng.standard_normal((4, 3, 5)), (1, 2, 3))
        back = stack_slices([axial_slice(v, k) for k in range(5)], v.spacing)
        assert back.data.tobytes() == v.data.tobytes()

    def test_slice_out_of_range(self):
        with pytest.raises(IndexError):
            axial_slice(Volume(np.zeros((2, 2, 3))), 3)


class TestNormalize:
    def test_nearest_rank_anchors(self):
        # 1000 values 0..999: nearest rank ceil(0.01 * 1000) = 10 -> value 9, rank 990 -> value 989
        v = Volume(np.arange(1000, dtype=np.float64).reshape(10, 10, 10))
        out = normalize_intensity(v).data
        flat = np.sort(out.ravel())
        assert flat[9] == 0.0 and flat[10] > 0.0
        assert flat[989] == 1.0 and flat[988] < 1.0
        assert np.isclose(out.ravel()[500], (500 - 9) / (989 - 9))

    def test_constant_volume(self):
        assert np.all(normalize_intensity(Volume(np.full((3, 3, 3), 5.0))).data == 0)

    def test_output_range(self, rng):
        out = normalize_intensity(Volume(rng.standard_normal((8, 8, 8)) * 100)).data
        assert out.min() == 0.0 and out.max() == 1.0
