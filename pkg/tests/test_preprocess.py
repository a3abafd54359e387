import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from petslice.phantom.volio import write_cohort
from petslice.preprocess import (
    assemble_input,
    build_slice_dataset,
    load_dataset,
    median_filter_3d,
    normalize_ct_slice,
    normalize_pet_slice,
    preprocess_volume,
    read_packed,
    resample_ct_to_pet,
    resize_slice,
    write_packed,
)


class TestResample:
    def test_identical_geometry_is_identity(self):
        ct = np.random.default_rng(0).normal(size=(4, 5, 6))
        out = resample_ct_to_pet(ct, (2, 2, 3), (6, 5, 4), (2, 2, 3))
        np.testing.assert_allclose(out, ct, atol=1e-12)

    def test_constant_preserved(self):
        out = resample_ct_to_pet(np.full((6, 8, 8), -300.0), (1, 1, 2), (3, 5, 4), (2.7, 1.6, 3))
        np.testing.assert_allclose(out, -300.0)

    def test_downsample_linear_ramp(self):
        # HU = 3x + 2y - z + 5 in mm; a linear field is reproduced exactly by
        # linear interpolation wherever no edge clamping occurs
        n, s = 16, 1.0
        c = (np.arange(n) + 0.5) * s
        z, y, x = np.meshgrid(c, c, c, indexing="ij")
        ct = 3 * x + 2 * y - z + 5
        out = resample_ct_to_pet(ct, (s, s, s), (8, 8, 8), (2 * s, 2 * s, 2 * s))
        pc = (np.arange(8) + 0.5) * 2 * s
        zz, yy, xx = np.meshgrid(pc, pc, pc, indexing="ij")
        np.testing.assert_allclose(out, 3 * xx + 2 * yy - zz + 5, atol=1e-4)
        assert out.shape == (8, 8, 8)

    def test_upsample_edges_clamp(self):
        ct = np.arange(4, dtype=float).reshape(1, 1, 4) * np.ones((2, 2, 1))
        out = resample_ct_to_pet(ct, (2, 2, 2), (8, 4, 4), (1, 1, 1))
        assert out[0, 0, 0] == 0.0 and out[0, 0, -1] == 3.0
        np.testing.assert_allclose(out[0, 0, 1:7], [0.25, 0.75, 1.25, 1.75, 2.25, 2.75])

    def test_no_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            resample_ct_to_pet(np.zeros((2, 2, 2)), (1, 1, 1), (2, 2, 2), (1, 1, 1), pet_origin_mm=(10, 0, 0))


def brute_median(vol, w):
    r = w // 2
    nz, ny, nx = vol.shape
    out = np.empty_like(vol)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                vals = []
                for dk in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        for di in range(-r, r + 1):
                            kk = min(max(k + dk, 0), nz - 1)
                            jj = min(max(j + dj, 0), ny - 1)
                            ii = min(max(i + di, 0), nx - 1)
                            vals.append(vol[kk, jj, ii])
                vals.sort()
                out[k, j, i] = vals[len(vals) // 2]
    return out


class TestMedian:
    def test_constant(self):
        v = np.full((6, 6, 6), 40.0)
        np.testing.assert_array_equal(median_filter_3d(v), v)

    def test_outlier_removed(self):
        v = np.zeros((7, 7, 7))
        v[3, 3, 3] = 3000.0
        assert median_filter_3d(v, 5)[3, 3, 3] == 0.0

    def test_matches_sort_oracle(self):
        v = np.random.default_rng(1).integers(-1000, 3000, size=(9, 9, 9)).astype(np.float64)
        np.testing.assert_array_equal(median_filter_3d(v, 5), brute_median(v, 5))

    def test_matches_sort_oracle_window3(self):
        v = np.random.default_rng(2).normal(size=(5, 6, 7))
        np.testing.assert_array_equal(median_filter_3d(v, 3), brute_median(v, 3))

    @pytest.mark.parametrize("w", [0, 2, 4])
    def test_bad_window(self, w):
        with pytest.raises(ValueError):
            median_filter_3d(np.zeros((3, 3, 3)), w)


class TestNormalize:
    @pytest.mark.parametrize("suv,expect", [(75.0, 1.0), (0.0, 0.0), (25.0, 0.5), (50.0, 1.0)])
    def test_pet(self, suv, expect):
        assert normalize_pet_slice(np.array([[suv]]))[0, 0] == expect

    def test_pet_negative_rejected(self):
        with pytest.raises(ValueError):
            normalize_pet_slice(np.array([[1.0, -0.1]]))

    @pytest.mark.parametrize("hu,expect", [(-1024.0, 0.0), (1024.0, 1.0), (2000.0, 1.0), (0.0, 0.5), (-3000, 0.0)])
    def test_ct(self, hu, expect):
        assert normalize_ct_slice(np.array([[hu]]))[0, 0] == expect

    @settings(max_examples=100)
    @given(arrays(np.float64, 20, elements=st.floats(0, 200)))
    def test_pet_monotone_bounded(self, x):
        x = np.sort(x)
        y = normalize_pet_slice(x)
        assert np.all(np.diff(y) >= 0)
        assert y.min() >= 0 and y.max() <= 1

    @settings(max_examples=100)
    @given(arrays(np.float64, 20, elements=st.floats(-5000, 5000)))
    def test_ct_monotone_bounded(self, x):
        x = np.sort(x)
        y = normalize_ct_slice(x)
        assert np.all(np.diff(y) >= 0)
        assert y.min() >= 0 and y.max() <= 1

    @settings(max_examples=100)
    @given(arrays(np.float64, 10, elements=st.floats(0, 1)))
    def test_idempotent_round_trip(self, u):
        # denormalize then normalize gives back the normalized values
        np.testing.assert_allclose(normalize_pet_slice(u * 50.0), u, atol=1e-15)
        np.testing.assert_allclose(normalize_ct_slice(u * 2048.0 - 1024.0), u, atol=1e-15)


class TestResize:
    def test_identity(self):
        img = np.random.default_rng(0).random((5, 7))
        np.testing.assert_array_equal(resize_slice(img, (5, 7)), img)

    def test_constant(self):
        np.testing.assert_allclose(resize_slice(np.full((4, 6), 0.3), (11, 3)), 0.3)

    def test_ramp_matches_analytic_bilinear(self):
        img = np.fromfunction(lambda r, c: 2 * r + 3 * c + 0.5 * r * c, (4, 4))
        out = resize_slice(img, (7, 7))
        u = np.arange(7) * 3 / 6  # corner-aligned source coordinates
        r, c = np.meshgrid(u, u, indexing="ij")
        np.testing.assert_allclose(out, 2 * r + 3 * c + 0.5 * r * c, atol=1e-5)
        assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]

    def test_target_too_small(self):
        with pytest.raises(ValueError):
            resize_slice(np.zeros((4, 4)), (1, 4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(2, 12), st.integers(2, 12), st.integers(0, 1000))
    def test_within_input_range(self, h, w, H, W, seed):
        img = np.random.default_rng(seed).random((h, w))
        out = resize_slice(img, (H, W))
        assert out.shape == (H, W)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestAssemble:
    def test_ppp_channels_equal(self):
        p = np.random.default_rng(0).random((4, 4))
        x = assemble_input(p, None, "PPP")
        assert x.shape == (3, 4, 4) and x.dtype == np.float32
        assert np.array_equal(x[0], x[1]) and np.array_equal(x[1], x[2])

    def test_ppc_third_channel_is_ct(self):
        rng = np.random.default_rng(1)
        p, c = rng.random((4, 4)), rng.random((4, 4))
        x = assemble_input(p, c, "PPC")
        np.testing.assert_array_equal(x[2], c.astype(np.float32))
        np.testing.assert_array_equal(x[:2], assemble_input(p, np.zeros((4, 4)), "PPC")[:2])
        np.testing.assert_array_equal(x[:2], assemble_input(p, None, "PPP")[:2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            assemble_input(np.zeros((4, 4)), np.zeros((4, 5)), "PPC")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            assemble_input(np.zeros((4, 4)), None, "CCC")


class TestVolume:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["PPP", "PPC"]))
    def test_values_in_unit_interval(self, seed, mode):
        rng = np.random.default_rng(seed)
        pet = rng.exponential(10.0, size=(3, 8, 8))
        ct = rng.normal(0, 2000, size=(3, 4, 4))
        x = preprocess_volume(pet, ct, (4, 4, 2), (2, 2, 2), mode, size=(6, 6), median_window=3)
        assert x.shape == (3, 3, 6, 6)
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_ppp_ignores_ct(self):
        rng = np.random.default_rng(0)
        pet = rng.random((2, 8, 8)) * 10
        a = preprocess_volume(pet, rng.random((2, 4, 4)), (4, 4, 2), (2, 2, 2), "PPP", (8, 8))
        b = preprocess_volume(pet, None, (4, 4, 2), (2, 2, 2), "PPP", (8, 8))
        np.testing.assert_array_equal(a, b)


class TestDataset:
    def test_packed_round_trip(self, tmp_path):
        arr = np.random.default_rng(0).random((3, 3, 4, 4)).astype(np.float32)
        write_packed(tmp_path / "x.f32", arr)
        np.testing.assert_array_equal(read_packed(tmp_path / "x.f32"), arr)

    def test_build(self, tmp_path, small_cohort):
        write_cohort(tmp_path / "cohort", small_cohort)
        man = build_slice_dataset(tmp_path / "cohort" / "cohort.json", tmp_path / "ds", "PPC", (8, 8), 3)
        assert len(man["samples"]) == 5 * 96
        truth = [(v.patient_id, k, int(v.tumor_mask[k].any())) for v in small_cohort for k in range(96)]
        got = [(s["patient_id"], s["slice_index"], s["label"]) for s in man["samples"]]
        assert got == truth
        summ = man["summary"]
        assert summ["A"]["n_slices"] == 288 and summ["B"]["n_patients"] == 2
        pos_a = sum(int(v.tumor_mask[k].any()) for v in small_cohort[:3] for k in range(96))
        assert summ["A"]["n_positive"] == pos_a
        assert summ["A"]["positive_fraction"] == pos_a / 288

        x, samples, _ = load_dataset(tmp_path / "ds")
        assert x.shape == (480, 3, 8, 8)
        # offsets address the same bytes that load_dataset stacked
        s = samples[100]
        with open(tmp_path / "ds" / s["file"], "rb") as fh:
            fh.seek(s["offset"])
            one = np.frombuffer(fh.read(3 * 8 * 8 * 4), dtype="<f4").reshape(3, 8, 8)
        np.testing.assert_array_equal(one, x[100])
        pos = [r for r in samples if r["label"] == 1]
        assert all(r["tumor_suvmax"] > 1.1 for r in pos)

    def test_rebuild_bit_identical(self, tmp_path, small_cohort):
        write_cohort(tmp_path / "c", small_cohort)
        build_slice_dataset(tmp_path / "c" / "cohort.json", tmp_path / "d1", "PPC", (8, 8), 3)
        build_slice_dataset(tmp_path / "c" / "cohort.json", tmp_path / "d2", "PPC", (8, 8), 3)
        for f in sorted((tmp_path / "d1").iterdir()):
            assert f.read_bytes() == (tmp_path / "d2" / f.name).read_bytes()

    def test_missing_volume(self, tmp_path, small_cohort):
        write_cohort(tmp_path / "c", small_cohort[:1])
        (tmp_path / "c" / "A-000_ct.vol.raw").unlink()
        (tmp_path / "c" / "A-000_ct.vol.json").unlink()
        with pytest.raises(FileNotFoundError, match="A-000"):
            build_slice_dataset(tmp_path / "c" / "cohort.json", tmp_path / "d")
