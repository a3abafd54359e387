import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petslice.phantom import (
    PatientVolume,
    RaterMaskSet,
    RaterNoise,
    TumorSpec,
    bccv_like,
    cohort_stats,
    generate_cohort,
    plant_tumor,
    simulate_raters,
    slice_ground_truth,
    smhs_like,
    staple_fuse,
    tmtv,
)
from petslice.phantom.staple import staple_e_step, staple_m_step
from petslice.phantom.volio import load_patient, read_manifest, read_volume, write_cohort, write_volume
from petslice.phantom.volume import SHOULDER_K

FIXTURES = Path(__file__).parent / "fixtures"


def uniform_volume(shape=(40, 40, 40), spacing=(2.0, 2.0, 2.0), suv=1.0, body=None):
    return PatientVolume("U-000", "U", np.full(shape, suv, dtype=np.float32), np.zeros(shape, np.float32),
                         spacing, np.zeros(shape, np.uint8), body_mask=body)


@pytest.fixture(scope="module")
def bccv_small():
    return generate_cohort(bccv_like(6), seed=3)


class TestProfile:
    def test_zero_tumors_rejected(self):
        with pytest.raises(ValueError, match="at least one tumor"):
            bccv_like(5, tumor_count_dist=(0.0, 0))

    @pytest.mark.parametrize("kw", [dict(target_positive_fraction=0.0), dict(target_positive_fraction=1.0),
                                    dict(tmtv_target_ml=(10.0, (-1.0, 20.0))),
                                    dict(tmtv_target_ml=(50.0, (60.0, 90.0))),
                                    dict(tumor_count_dist=(5.0, 3)), dict(n_patients=0)])
    def test_invalid(self, kw):
        kw = {"n_patients": 5, **kw}
        with pytest.raises(ValueError):
            bccv_like(**kw)

    def test_tumor_volume_exceeding_body_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            bccv_like(5, tmtv_target_ml=(20000.0, (1.0, 50000.0)))

    def test_ct_grid_must_tile(self):
        with pytest.raises(ValueError, match="tile"):
            bccv_like(5, ct_spacing_mm=(3.0, 2.0, 4.0))

    def test_presets(self):
        a, b = bccv_like(), smhs_like()
        assert (a.target_positive_fraction, a.tmtv_target_ml[0], a.tumor_count_dist[0]) == (0.08, 119.25, 3.0)
        assert (b.target_positive_fraction, b.tmtv_target_ml[0], b.tumor_count_dist) == (0.21, 488.43, (11.0, 128))


class TestCohort:
    def test_deterministic(self, bccv_small):
        again = generate_cohort(bccv_like(6), seed=3)
        for a, b in zip(bccv_small, again):
            assert a.pet.tobytes() == b.pet.tobytes()
            assert a.ct.tobytes() == b.ct.tobytes()
            assert a.tumor_mask.tobytes() == b.tumor_mask.tobytes()

    def test_seed_changes_cohort(self, bccv_small):
        other = generate_cohort(bccv_like(6), seed=4)
        assert other[0].pet.tobytes() != bccv_small[0].pet.tobytes()

    def test_invariants(self, bccv_small):
        for v in bccv_small:
            assert v.pet.shape == (96, 64, 64) and v.ct.shape == (96, 128, 128)
            assert v.pet.min() >= 0.0
            assert set(np.unique(v.tumor_mask)) <= {0, 1}
            assert 1 <= len(v.tumors)
            assert v.center_id == "BCCV" and v.patient_id.startswith("BCCV-")

    def test_patient_unique_anatomy(self, bccv_small):
        bodies = [v.body_mask.tobytes() for v in bccv_small]
        assert len(set(bodies)) == len(bodies)

    def test_stats_near_targets(self, bccv_small):
        s = cohort_stats(bccv_small)
        assert abs(s["positive_fraction"] - 0.08) <= 0.02
        assert abs(s["mean_tmtv_ml"] - 119.25) <= 0.2 * 119.25

    def test_ground_truth_consistent(self, bccv_small):
        for v in bccv_small:
            gmax = float(v.pet.max())
            for k, (lab, suv) in enumerate(slice_ground_truth(v)):
                assert lab == int(v.tumor_mask[k].any())
                if lab:
                    assert suv == float(v.pet[k][v.tumor_mask[k] > 0].max())
                    assert suv <= gmax
                else:
                    assert suv is None


class TestPlant:
    def test_peak_value(self):
        vol = plant_tumor(uniform_volume(), TumorSpec((20, 20, 20), (6.0, 6.0, 6.0), 10.0))
        peak = vol.pet[vol.tumor_mask > 0].max()
        assert abs(peak - 10.0) <= 0.1
        gt = slice_ground_truth(vol)
        assert gt[20][0] == 1 and abs(gt[20][1] - 10.0) <= 0.1
        assert gt[0] == (0, None)

    def test_copy_leaves_original(self):
        vol = uniform_volume()
        plant_tumor(vol, TumorSpec((20, 20, 20), (4.0, 4.0, 4.0), 5.0))
        assert not vol.tumor_mask.any() and not vol.tumors

    def test_disjoint_tumors_add(self):
        a = TumorSpec((10, 10, 10), (4.0, 4.0, 4.0), 6.0)
        b = TumorSpec((30, 30, 30), (5.0, 3.0, 4.0), 8.0)
        both = plant_tumor(plant_tumor(uniform_volume(), a), b)
        na = plant_tumor(uniform_volume(), a).tumor_mask.sum()
        nb = plant_tumor(uniform_volume(), b).tumor_mask.sum()
        assert both.tumor_mask.sum() == na + nb

    def test_analytic_volume(self):
        spec = TumorSpec((20, 20, 20), (10.0, 10.0, 10.0), 10.0, falloff_mm=2.0)
        vol = plant_tumor(uniform_volume(), spec)
        r = 10.0 + SHOULDER_K * 2.0  # radius where the shoulder falls to the mask threshold
        analytic = 4.0 / 3.0 * math.pi * r ** 3 / 1000.0
        assert abs(tmtv(vol.tumor_mask, vol.spacing_mm) - analytic) <= 0.15 * analytic

    def test_mask_threshold(self):
        spec = TumorSpec((20, 20, 20), (4.0, 4.0, 4.0), 11.0, falloff_mm=3.0)
        vol = plant_tumor(uniform_volume(), spec)
        # blend weight f = (pet - bg) / (suv_max - bg); mask <=> f >= 0.41
        f = (vol.pet.astype(np.float64) - 1.0) / 10.0
        inside = vol.tumor_mask > 0
        assert f[inside].min() >= 0.41 - 1e-6
        assert f[~inside].max() < 0.41 + 1e-6

    def test_out_of_body_rejected(self):
        body = np.zeros((40, 40, 40), bool)
        body[5:35, 5:35, 5:35] = True
        with pytest.raises(ValueError, match="outside the body"):
            plant_tumor(uniform_volume(body=body), TumorSpec((8, 20, 20), (10.0, 4.0, 4.0), 5.0))

    def test_center_outside_grid(self):
        with pytest.raises(ValueError):
            plant_tumor(uniform_volume(), TumorSpec((45, 20, 20), (4.0, 4.0, 4.0), 5.0))

    def test_suv_not_above_background(self):
        with pytest.raises(ValueError):
            plant_tumor(uniform_volume(suv=3.0), TumorSpec((20, 20, 20), (4.0, 4.0, 4.0), 2.0))

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            TumorSpec((1, 1, 1), (0.0, 1.0, 1.0), 5.0)


class TestTmtv:
    def test_empty(self):
        assert tmtv(np.zeros((4, 4, 4)), (1, 1, 1)) == 0.0

    def test_unit_conversion(self):
        assert tmtv(np.ones((10, 10, 10)), (1, 1, 1)) == 1.0
        assert tmtv(np.ones((2, 2, 2)), (4, 4, 4)) == 0.512


class TestVolumeFiles:
    def test_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
        head = write_volume(tmp_path, "x_pet", arr, (2, 3, 4), "PET")
        back, header = read_volume(head)
        np.testing.assert_array_equal(back, arr)
        assert header["dims"] == [5, 4, 3] and header["dtype"] == "f32le" and header["modality"] == "PET"
        # x varies fastest in the raw payload
        raw = np.fromfile(tmp_path / "x_pet.vol.raw", dtype="<f4")
        assert raw[1] == arr[0, 0, 1]

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "nope.vol.json")

    def test_cohort_manifest(self, tmp_path, small_cohort):
        write_cohort(tmp_path, small_cohort)
        recs = read_manifest(tmp_path / "cohort.json")
        assert [r["patient_id"] for r in recs] == [v.patient_id for v in small_cohort]
        back = load_patient(recs[1], tmp_path)
        np.testing.assert_array_equal(back.pet, small_cohort[1].pet)
        assert recs[1]["slices"][30]["label"] == int(small_cohort[1].tumor_mask[30].any())


class TestRaters:
    def test_zero_noise(self):
        mask = np.zeros((6, 6, 6), np.uint8)
        mask[2:4, 2:4, 2:4] = 1
        rs = simulate_raters(mask, RaterNoise(), 4, seed=0)
        assert len(rs) == 4
        assert all(np.array_equal(m, mask) for m in rs.masks)

    def test_flip_rate_hamming(self):
        mask = np.zeros((10, 10, 10), np.uint8)
        counts = [int((simulate_raters(mask, RaterNoise(flip_rate=0.1), 1, seed=s).masks[0] != mask).sum())
                  for s in range(20)]
        assert all(abs(c - 100) <= 30 for c in counts)

    def test_jitter_moves_boundary(self):
        mask = np.zeros((12, 12, 12), np.uint8)
        mask[4:8, 4:8, 4:8] = 1
        rs = simulate_raters(mask, RaterNoise(boundary_jitter_mm=3.0), 6, seed=1)
        sizes = {int(m.sum()) for m in rs.masks}
        assert len(sizes) > 1

    def test_deterministic(self):
        mask = np.zeros((8, 8, 8), np.uint8)
        mask[3:5, 3:5, 3:5] = 1
        a = simulate_raters(mask, RaterNoise(1.0, 0.05), 4, seed=9)
        b = simulate_raters(mask, RaterNoise(1.0, 0.05), 4, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))

    @pytest.mark.parametrize("rate", [-0.1, 0.5, 0.7])
    def test_bad_flip_rate(self, rate):
        with pytest.raises(ValueError):
            RaterNoise(flip_rate=rate)

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            simulate_raters(np.zeros((2, 2, 2)), RaterNoise(), 0, seed=0)
        with pytest.raises(ValueError):
            RaterMaskSet([np.zeros((2, 2)), np.zeros((3, 3))], [])


class TestStaple:
    def test_unanimous(self):
        mask = (np.random.default_rng(0).random((5, 5, 5)) < 0.3).astype(np.uint8)
        res = staple_fuse([mask] * 4)
        np.testing.assert_array_equal(res.fused, mask)
        assert res.iterations == 1 and res.converged
        np.testing.assert_array_equal(res.sensitivity, 0.99)
        np.testing.assert_array_equal(res.specificity, 0.99)

    def test_single_rater(self):
        mask = (np.random.default_rng(1).random((4, 4, 4)) < 0.5).astype(np.uint8)
        fused, (p, q) = staple_fuse([mask])
        np.testing.assert_array_equal(fused, mask)
        assert p.shape == (1,) and q.shape == (1,)

    def test_hand_computed_iteration(self):
        fx = json.loads((FIXTURES / "staple_one_iteration.json").read_text())
        d = np.array(fx["decisions"], dtype=np.float64)
        prior = float(Fraction(fx["prior"]))
        init = float(Fraction(fx["init"]))

        def frac(xs):
            return np.array([float(Fraction(x)) for x in xs])

        w0, _ = staple_e_step(d, np.full(3, init), np.full(3, init), prior)
        np.testing.assert_allclose(w0, frac(fx["e_step_0"]["posterior"]), rtol=1e-12, atol=1e-15)
        p1, q1 = staple_m_step(d, w0)
        np.testing.assert_allclose(p1, frac(fx["m_step_1"]["sensitivity"]), rtol=1e-12)
        np.testing.assert_allclose(q1, frac(fx["m_step_1"]["specificity"]), rtol=1e-12)
        res = staple_fuse([row.reshape(2, 2) for row in d], max_iters=1)
        np.testing.assert_allclose(res.posterior.reshape(-1), frac(fx["e_step_1"]["posterior"]), rtol=1e-12)
        assert res.prior == prior
        np.testing.assert_array_equal(res.fused.reshape(-1), [1, 1, 0, 0])

    def test_degenerate_rater_warns(self, caplog):
        mask = np.zeros((3, 3, 3), np.uint8)
        mask[1, 1, 1] = 1
        with caplog.at_level("WARNING"):
            res = staple_fuse([mask, mask, np.ones_like(mask)])
        assert "rater 2" in caplog.text
        assert res.sensitivity.min() >= 0.01 and res.specificity.max() <= 0.99

    def test_bad_args(self):
        with pytest.raises(ValueError):
            staple_fuse([])
        with pytest.raises(ValueError):
            staple_fuse([np.zeros((2, 2))], max_iters=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.floats(0.0, 0.3), st.integers(0, 10_000))
    def test_monotone_and_bounded(self, n, rate, seed):
        truth = np.zeros((8, 8, 8), np.uint8)
        truth[2:6, 2:6, 3:7] = 1
        raters = simulate_raters(truth, RaterNoise(1.0, rate), n, seed=seed)
        res = staple_fuse(raters)
        ll = res.log_likelihood
        assert all(b >= a - 1e-9 * abs(a) for a, b in zip(ll, ll[1:]))
        assert res.posterior.min() >= 0.0 and res.posterior.max() <= 1.0
