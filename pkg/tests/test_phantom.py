import json

import numpy as np
import pytest
from scipy import ndimage

from marrowcast.errors import ConfigError
from marrowcast.evaluation import emerging_lesion_targets
from marrowcast.phantom import (LEGS, THORAX, PhantomParams, body_part_labels, generate_case,
                                generate_cohort, load_cohort, patient_seed)

from conftest import small_params


def n_components(mask):
    return ndimage.label(mask, structure=np.ones((3, 3, 3)))[1]


def case_bytes(case):
    return b"".join(getattr(case, k).data.tobytes() for k in ("I_t", "I_t1", "B_t", "A_t", "A_t1"))


class TestGenerateCase:
    def test_deterministic(self):
        a = generate_case(small_params(seed=4))
        b = generate_case(small_params(seed=4))
        assert case_bytes(a) == case_bytes(b)
        assert a.provenance == b.provenance

    def test_seeds_differ(self):
        assert case_bytes(generate_case(small_params(seed=1))) != case_bytes(generate_case(small_params(seed=2)))

    @pytest.mark.parametrize("seed", range(8))
    def test_component_counts(self, seed):
        case = generate_case(PhantomParams(seed=seed))
        assert n_components(case.A_t.data >= 0.5) == 2
        assert n_components(case.A_t1.data >= 0.5) == 5
        assert n_components(emerging_lesion_targets(case).data >= 0.5) == 3

    def test_no_lesions_means_empty_annotations(self):
        case = generate_case(small_params(n_emerging_lesions=0, n_stable_lesions=0))
        assert not case.A_t1.data.any() and not case.A_t.data.any()

    def test_anomalies_are_never_annotated(self):
        case = generate_case(PhantomParams(seed=5, n_emerging_lesions=0, n_stable_lesions=0, n_anomalies=3))
        assert not case.A_t1.data.any()
        kinds = [s["kind"] for s in case.provenance["spots"]]
        assert kinds.count("anomaly") == 3

    def test_lesions_sit_in_bone(self, desk_case):
        bone = desk_case.B_t.data >= 0.5
        lesions = desk_case.A_t1.data >= 0.5
        assert np.all(bone[lesions])

    def test_background_exactly_zero(self, desk_case):
        corner = desk_case.I_t.data[:3, :3, :]
        assert np.all(corner == 0)

    def test_emerging_lesions_visible_only_at_follow_up(self, desk_case):
        em = emerging_lesion_targets(desk_case).data >= 0.5
        bone = desk_case.B_t.data >= 0.5
        marrow_t = desk_case.I_t.data[bone & ~em & (desk_case.A_t.data < 0.5)].mean()
        # precursor is darker than marrow at t and darker still at t+1
        assert desk_case.I_t.data[em].mean() < marrow_t
        assert desk_case.I_t1.data[em].mean() < desk_case.I_t.data[em].mean()

    def test_zero_precursor_contrast(self):
        p = PhantomParams(seed=2, precursor_contrast=0.0, noise_sigma=0.0)
        case = generate_case(p)
        em = emerging_lesion_targets(case).data >= 0.5
        assert np.allclose(case.I_t.data[em], 1000.0)

    def test_emerging_lesions_cover_both_body_parts(self, desk_case):
        em = emerging_lesion_targets(desk_case).data >= 0.5
        parts = {desk_case.body_part_map[z] for z in np.nonzero(em.any(axis=(0, 1)))[0]}
        assert parts == {LEGS, THORAX}

    def test_bias_field_changes_image(self):
        a = generate_case(small_params(seed=3))
        b = generate_case(small_params(seed=3, bias_field=True))
        assert not np.array_equal(a.I_t.data, b.I_t.data)
        assert np.array_equal(a.A_t1.data, b.A_t1.data)

    @pytest.mark.parametrize("bad", [dict(precursor_contrast=1.5), dict(n_bones=-1), dict(legs_fraction=0.0),
                                     dict(noise_sigma=-0.1)])
    def test_invalid_params(self, bad):
        with pytest.raises(ConfigError):
            small_params(**bad).validate()

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            PhantomParams.from_dict({"n_bonez": 3})


class TestBodyParts:
    def test_labels_contiguous(self):
        labels = body_part_labels(30, 0.5)
        assert labels[:15] == (LEGS,) * 15 and labels[15:] == (THORAX,) * 15

    def test_fraction(self):
        assert body_part_labels(10, 0.3).count(LEGS) == 3


class TestCohort:
    def test_ids_and_seeds(self):
        cases = generate_cohort(7, 4, small_params())
        assert [c.patient_id for c in cases] == ["P000", "P001", "P002", "P003"]
        assert len({c.provenance["seed"] for c in cases}) == 4
        assert cases[2].provenance["seed"] == patient_seed(7, 2)

    def test_regeneration_bit_identical(self):
        a = generate_cohort(7, 2, small_params())
        b = generate_cohort(7, 2, small_params())
        assert [case_bytes(c) for c in a] == [case_bytes(c) for c in b]

    def test_written_manifest_matches_files(self, tmp_path):
        cases = generate_cohort(1, 3, small_params(), out_dir=tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert len(manifest["cases"]) == 3
        on_disk = sorted(str(p.relative_to(tmp_path)) for p in tmp_path.rglob("*.nii"))
        listed = sorted(e[k] for e in manifest["cases"] for k in ("I_t", "I_t1", "B_t", "A_t", "A_t1"))
        assert on_disk == listed
        back = load_cohort(tmp_path)
        assert [case_bytes(c) for c in back] == [case_bytes(c) for c in cases]
        assert back[0].body_part_map == cases[0].body_part_map

    def test_parallel_matches_serial(self):
        a = generate_cohort(3, 2, small_params(), jobs=1)
        b = generate_cohort(3, 2, small_params(), jobs=2)
        assert [case_bytes(c) for c in a] == [case_bytes(c) for c in b]

    def test_zero_patients(self):
        with pytest.raises(ConfigError):
            generate_cohort(0, 0, small_params())

    def test_twelve_distinct_ids(self):
        cases = generate_cohort(0, 12, small_params())
        assert len({c.patient_id for c in cases}) == 12
