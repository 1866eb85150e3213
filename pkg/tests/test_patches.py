import numpy as np
import pytest

from marrowcast import patches
from marrowcast.errors import ShapeError
from marrowcast.evaluation import roc_auc


class TestDilation:
    def test_disk_r2_has_13_pixels(self):
        offsets = [(dx, dy) for dx in range(-2, 3) for dy in range(-2, 3) if dx * dx + dy * dy <= 4]
        assert len(offsets) == 13
        d = patches.disk(2)
        assert d.sum() == 13
        assert {(int(x) - 2, int(y) - 2) for x, y in np.argwhere(d)} == set(offsets)

    def test_single_pixel_grows_to_disk(self):
        prob = np.zeros((9, 9))
        prob[4, 4] = 0.6
        mask = patches.binarize_and_dilate(prob, 0.5, 2)
        assert mask.sum() == 13
        assert np.array_equal(mask[2:7, 2:7], patches.disk(2))

    def test_threshold_is_inclusive(self):
        prob = np.zeros((5, 5))
        prob[2, 2] = 0.5
        assert patches.binarize_and_dilate(prob, 0.5, 0)[2, 2]

    def test_empty_map(self):
        assert not patches.binarize_and_dilate(np.zeros((6, 6))).any()

    def test_defaults(self):
        assert patches.BONE_THRESHOLD == 0.5
        assert patches.DILATION_RADIUS_PX == 2
        assert patches.PATCH_SIZE == 64


class TestMaskCrop:
    def test_checkerboard(self, rng):
        img = rng.random((6, 6))
        mask = (np.indices((6, 6)).sum(axis=0) % 2).astype(bool)
        out = patches.mask_crop(img, mask)
        assert np.all(out[~mask] == 0) and np.array_equal(out[mask], img[mask])

    def test_full_and_empty(self, rng):
        img = rng.random((4, 4))
        assert np.array_equal(patches.mask_crop(img, np.ones((4, 4), bool)), img)
        assert not patches.mask_crop(img, np.zeros((4, 4), bool)).any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            patches.mask_crop(np.zeros((3, 3)), np.zeros((3, 4)))


class TestExtraction:
    def test_full_mask_lattice_count(self):
        grid, _ = patches.extract_patches(np.zeros((384, 384), np.float32), np.ones((384, 384), bool), 1, 2)
        assert len(grid) == 192 * 192 == 36864

    def test_empty_mask(self):
        grid, px = patches.extract_patches(np.zeros((10, 10)), np.zeros((10, 10), bool), 4, 2)
        assert len(grid) == 0 and px.shape == (0, 1, 4, 4)

    def test_centres_inside_mask_and_on_lattice(self, rng):
        mask = rng.random((20, 30)) < 0.3
        grid, _ = patches.extract_patches(rng.random((20, 30)), mask, 8, 3)
        assert np.all(mask[grid.centers[:, 0], grid.centers[:, 1]])
        assert np.all(grid.centers % 3 == 0)
        expected = sum(mask[x, y] for x in range(0, 20, 3) for y in range(0, 30, 3))
        assert len(grid) == expected

    def test_window_contents(self, rng):
        img = rng.random((16, 16))
        mask = np.zeros((16, 16), bool)
        mask[8, 6] = True
        grid, px = patches.extract_patches(img, mask, 4, 2)
        # window of centre (8, 6) starts at (6, 4)
        assert np.array_equal(px[0, 0], img[6:10, 4:8])


class TestReconstruction:
    def _grid(self, centers, size, dims):
        return patches.PatchGrid(size, 1, dims, np.array(centers, dtype=np.int64))

    def test_constant_predictions(self):
        grid = self._grid([(4, 4), (10, 10)], 4, (16, 16))
        rs = patches.reconstruct_risk_map(grid, np.full((2, 1, 4, 4), 0.3))
        assert np.allclose(rs.risk[rs.coverage > 0], 0.3)
        assert np.all(rs.risk[rs.coverage == 0] == 0)

    def test_single_patch_verbatim(self, rng):
        p = rng.random((1, 1, 4, 4))
        rs = patches.reconstruct_risk_map(self._grid([(5, 5)], 4, (12, 12)), p)
        assert np.array_equal(rs.risk[3:7, 3:7], p[0, 0])

    def test_half_overlap_averages(self):
        # windows of size 4 at centres (4, 4) and (4, 6) overlap on columns 4..5
        grid = self._grid([(4, 4), (4, 6)], 4, (10, 12))
        preds = np.stack([np.full((1, 4, 4), 0.2), np.full((1, 4, 4), 0.6)])
        risk = patches.reconstruct_risk_map(grid, preds).risk
        assert np.allclose(risk[2:6, 2:4], 0.2)
        assert np.allclose(risk[2:6, 4:6], (0.2 + 0.6) / 2)
        assert np.allclose(risk[2:6, 6:8], 0.6)

    def test_max_and_center_fusion(self):
        grid = self._grid([(4, 4), (4, 6)], 4, (10, 12))
        preds = np.stack([np.full((1, 4, 4), 0.2), np.full((1, 4, 4), 0.6)])
        assert np.isclose(patches.reconstruct_risk_map(grid, preds, "max").risk[3, 5], 0.6)
        c = patches.reconstruct_risk_map(grid, preds, "center")
        assert c.coverage.sum() == 2 and np.isclose(c.risk[4, 6], 0.6)

    def test_windows_clipped_at_border(self):
        rs = patches.reconstruct_risk_map(self._grid([(0, 0)], 4, (5, 5)), np.ones((1, 1, 4, 4)))
        assert rs.coverage[:2, :2].all() and rs.coverage.sum() == 4

    def test_prediction_count_mismatch(self):
        with pytest.raises(ShapeError):
            patches.reconstruct_risk_map(self._grid([(2, 2)], 4, (8, 8)), np.zeros((2, 1, 4, 4)))

    def test_unknown_fusion(self):
        with pytest.raises(ValueError):
            patches.reconstruct_risk_map(self._grid([(2, 2)], 4, (8, 8)), np.zeros((1, 1, 4, 4)), "median")

    @pytest.mark.parametrize("seed", range(5))
    def test_ground_truth_windows_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        target = (rng.random((40, 40)) < 0.2).astype(np.float64)
        mask = patches.binarize_and_dilate(rng.random((40, 40)) < 0.05, 0.5, 2)
        grid, _ = patches.extract_patches(np.zeros((40, 40)), mask, 8, 2)
        oracle = patches.extract_windows(target, grid.centers, 8)
        for fusion in ("mean", "max"):
            rs = patches.reconstruct_risk_map(grid, oracle, fusion)
            covered = rs.coverage > 0
            assert np.array_equal(rs.risk[covered], target[covered])
            assert roc_auc(rs.risk[covered], target[covered]) == 1.0
