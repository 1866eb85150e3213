import numpy as np
import pytest

from marrowcast import cascade, patches, unet
from marrowcast.errors import GeometryError
from marrowcast.evaluation import roc_auc
from marrowcast.phantom import generate_case
from marrowcast.volume import Volume

from conftest import small_params


class StubBoneNet:
    """Looks like a trained BoneNet but returns fixed maps (padded like the real one)."""

    def __init__(self, maps, input_size):
        self.maps = maps
        self.config = unet.UNetConfig(input_size=input_size, depth=1)

    def predict(self, x, batch_size=None):
        s = self.config.input_size
        out = np.stack([cascade.pad_to(self.maps[:, :, z], s)[0] for z in range(self.maps.shape[2])])
        return out[:, None]


@pytest.fixture(scope="module")
def case():
    return generate_case(small_params(seed=21), "P021")


@pytest.fixture(scope="module")
def trained(case):
    bone_cfg = unet.UNetConfig(input_size=48, depth=2, base_channels=2, lr=3e-3, epochs=1, batch_size=4)
    les_cfg = unet.UNetConfig(input_size=16, depth=2, base_channels=2, lr=1e-3, epochs=1, batch_size=16,
                              loss_kind="weighted_bce")
    bonenet = cascade.train_bonenet([case], bone_cfg, seed=0)
    lesionnet, stats = cascade.train_lesionnet([case], les_cfg, seed=0, stride=4)
    return bonenet, lesionnet, stats


class TestPadding:
    def test_roundtrip(self, rng):
        img = rng.random((5, 7))
        padded, off = cascade.pad_to(img, 12)
        assert padded.shape == (12, 12) and off == (3, 2)
        assert np.array_equal(cascade.unpad(padded, off, img.shape), img)
        assert padded.sum() == pytest.approx(img.sum())

    def test_too_large(self):
        with pytest.raises(GeometryError):
            cascade.pad_to(np.zeros((10, 10)), 8)


class TestBoneDataset:
    def test_one_pair_per_slice(self, case):
        ds = cascade.build_bone_dataset([case, case], 48)
        assert len(ds) == 2 * case.dims[2]
        assert ds.inputs.shape == (24, 1, 48, 48)
        assert all(o == ds.offsets[0] for o in ds.offsets)
        ox, oy = ds.offsets[0]
        assert np.array_equal(ds.targets[3, 0, ox:ox + 48, oy:oy + 48], case.B_t.data[:, :, 3])

    def test_empty(self):
        with pytest.raises(ValueError):
            cascade.build_bone_dataset([], 48)


class TestLesionDataset:
    def test_no_lesions_no_targets(self):
        c = generate_case(small_params(seed=2, n_emerging_lesions=0, n_stable_lesions=0))
        ds = cascade.build_lesion_dataset([c], 16, stride=4)
        assert len(ds) > 0 and not ds.targets.any()

    def test_centres_in_dilated_bone(self, case):
        ds = cascade.build_lesion_dataset([case], 16, stride=2)
        for z, (cx, cy) in zip(ds.slices, ds.centers):
            assert patches.binarize_and_dilate(case.B_t.data[:, :, z])[cx, cy]

    def test_imbalance_statistic(self, case):
        ds = cascade.build_lesion_dataset([case], 16, stride=4)
        n_pos = int((ds.targets >= 0.5).sum())
        n_neg = ds.targets.size - n_pos
        assert ds.stats["n_pos_pixels"] == n_pos and ds.stats["n_neg_pixels"] == n_neg
        assert ds.stats["imbalance"] == n_neg / n_pos
        assert ds.stats["w_pos"] == min(max(n_neg / n_pos, 1.0), 100.0)

    def test_target_windows_match_annotation(self, case):
        ds = cascade.build_lesion_dataset([case], 16, stride=4)
        i = int(np.argmax(ds.targets.reshape(len(ds), -1).sum(axis=1)))
        expected = patches.extract_windows(case.A_t1.data[:, :, ds.slices[i]], ds.centers[i:i + 1], 16)
        assert np.array_equal(ds.targets[i], expected[0])

    def test_negative_subsampling_keeps_positives(self, case):
        full = cascade.build_lesion_dataset([case], 16, stride=2)
        sub = cascade.build_lesion_dataset([case], 16, stride=2, max_negatives_per_case=10, seed=1)
        pos_full = (full.targets.reshape(len(full), -1).max(axis=1) >= 0.5).sum()
        pos_sub = (sub.targets.reshape(len(sub), -1).max(axis=1) >= 0.5).sum()
        assert pos_sub == pos_full
        assert len(sub) == pos_full + min(10, len(full) - pos_full)

    def test_perfect_bonenet_equals_ground_truth(self, case):
        gt = cascade.build_lesion_dataset([case], 16, stride=4)
        stub = StubBoneNet(case.B_t.data, 48)
        pred = cascade.build_lesion_dataset([case], 16, stride=4, bone_source="bonenet", bonenet=stub)
        assert np.array_equal(gt.inputs, pred.inputs) and np.array_equal(gt.centers, pred.centers)

    def test_bone_map_difference_is_exactly_accounted(self, case):
        maps = case.B_t.data.copy()
        z_drop = int(np.argmax(maps.sum(axis=(0, 1))))
        maps[:, :, z_drop] = 0
        gt = cascade.build_lesion_dataset([case], 16, stride=4)
        pred = cascade.build_lesion_dataset([case], 16, stride=4, bone_source="bonenet",
                                            bonenet=StubBoneNet(maps, 48))
        keep = gt.slices != z_drop
        assert len(pred) == keep.sum()
        assert np.array_equal(pred.inputs, gt.inputs[keep])

    def test_bonenet_source_needs_model(self, case):
        with pytest.raises(ValueError):
            cascade.build_lesion_dataset([case], 16, bone_source="bonenet")


class TestPredictRisk:
    def test_dims_and_support(self, case, trained):
        bonenet, lesionnet, _ = trained
        pipe = cascade.CascadePipeline(bonenet, lesionnet, patch_size=16, stride=4)
        bone, risk = cascade.predict_risk_volume(pipe, case.I_t)
        assert bone.dims == risk.dims == case.dims
        assert np.all(risk.data[~risk.meta["dilated_bone"]] == 0)

    def test_deterministic(self, case, trained):
        bonenet, lesionnet, _ = trained
        pipe = cascade.CascadePipeline(bonenet, lesionnet, patch_size=16, stride=4)
        a = cascade.predict_risk_volume(pipe, case.I_t)[1].data
        b = cascade.predict_risk_volume(pipe, case.I_t)[1].data
        assert a.tobytes() == b.tobytes()

    def test_background_volume_gives_zero_risk(self, trained):
        _, lesionnet, _ = trained
        pipe = cascade.CascadePipeline(lesionnet=lesionnet, patch_size=16,
                                       bone_predict=lambda img: np.zeros(img.dims))
        _, risk = cascade.predict_risk_volume(pipe, Volume(np.zeros((48, 48, 3)), (8, 8, 12)))
        assert not risk.data.any()

    def test_oracle_lesion_predictor(self, case):
        target = case.A_t1.data

        def oracle(px, grid, z):
            return patches.extract_windows(target[:, :, z], grid.centers, grid.patch_size)

        pipe = cascade.CascadePipeline(patch_size=16, stride=2, bone_predict=lambda img: case.B_t.data,
                                       lesion_predict=oracle)
        _, risk = cascade.predict_risk_volume(pipe, case.I_t)
        covered = risk.meta["coverage"] > 0
        bone = case.B_t.data >= 0.5
        assert np.all(covered[bone])
        assert roc_auc(risk.data[bone], target[bone]) == 1.0

    def test_patch_size_mismatch(self, trained):
        with pytest.raises(GeometryError):
            cascade.CascadePipeline(lesionnet=trained[1], patch_size=32)

    def test_training_stats_feed_weight(self, trained):
        _, lesionnet, stats = trained
        assert lesionnet.config.w_pos == stats["w_pos"]
