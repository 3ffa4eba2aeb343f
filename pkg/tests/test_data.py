import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcga.data import (
    PairedSample,
    apply_patch_permutation,
    band_means,
    default_response,
    gamma_perturb,
    hsi_to_rgb,
    invert_permutation,
    make_pairs,
    metrics,
    mrae,
    patch_permutation,
    patch_shuffle,
    psnr,
    rmse,
    synth_hsi,
    write_metrics_csv,
)
from mcga.errors import ArgumentError, DimensionError

unit = st.floats(0, 1, allow_nan=False, width=32)


class TestMetrics:
    def test_perfect(self, rng):
        y = rng.uniform(size=(4, 3, 3))
        assert rmse(y, y) == 0.0 and mrae(y, y) == 0.0 and psnr(y, y) == math.inf

    def test_hand_values(self):
        y = np.array([0.5, 1.0])
        y_hat = np.array([0.25, 1.0])
        assert rmse(y, y_hat) == math.sqrt(0.0625 / 2)
        assert mrae(y, y_hat) == 0.25
        assert abs(psnr(y, y_hat) - 20 * math.log10(1 / math.sqrt(0.03125))) < 1e-12

    def test_zero_denominator_floored(self):
        assert mrae(np.array([0.0]), np.array([1e-6])) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            rmse(np.zeros(3), np.zeros(4))

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        y, y_hat = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
        perm = rng.permutation(16)
        shuffle = lambda a: a.reshape(3, 16)[:, perm].reshape(3, 4, 4)
        assert metrics(y, y_hat) == metrics(shuffle(y), shuffle(y_hat))

    @given(arrays(np.float64, 6, elements=st.floats(1e-6, 1)), arrays(np.float64, 6, elements=st.floats(0, 1)))
    def test_mrae_non_negative(self, y, y_hat):
        assert mrae(y, y_hat) >= 0
        assert (mrae(y, y_hat) == 0) == bool(np.all(y == y_hat))

    def test_csv(self, tmp_path):
        write_metrics_csv(tmp_path / "m.csv", [{"id": "a", "rmse": 0.0, "mrae": 0.0, "psnr": math.inf}])
        assert (tmp_path / "m.csv").read_text().splitlines() == ["id,rmse,mrae,psnr", "a,0.0,0.0,inf"]


class TestSynthetic:
    def test_range_and_determinism(self):
        a, b = synth_hsi(3, 16, 8, 8), synth_hsi(3, 16, 8, 8)
        assert a.tobytes() == b.tobytes()
        assert a.min() >= 0 and a.max() <= 1 and a.shape == (16, 8, 8)

    def test_pairs(self):
        pairs = make_pairs(2, 5, c=8, h=8, w=8)
        assert [p.id for p in pairs] == ["syn0005", "syn0006"]
        assert pairs[0].rgb.shape == (3, 8, 8)
        np.testing.assert_allclose(pairs[0].rgb, hsi_to_rgb(pairs[0].hsi), atol=0)

    def test_response_rows(self):
        assert np.allclose(default_response(16).sum(axis=1), 1)

    def test_pair_shape_check(self):
        with pytest.raises(DimensionError):
            PairedSample(np.zeros((3, 4, 4)), np.zeros((8, 4, 5)))

    def test_band_means(self):
        cube = np.arange(8.0).reshape(2, 2, 2)
        np.testing.assert_array_equal(band_means([cube]), [[1.5, 5.5]])


class TestPatchShuffle:
    def test_inverse_bitwise(self, rng):
        cube = rng.standard_normal((3, 32, 32)).astype(np.float32)
        perm = patch_permutation(4, seed=7)
        shuffled = apply_patch_permutation(cube, perm, 16)
        assert not np.array_equal(shuffled, cube)
        assert apply_patch_permutation(shuffled, invert_permutation(perm), 16).tobytes() == cube.tobytes()

    def test_identity_seed(self, rng):
        cube = rng.standard_normal((2, 32, 16))
        np.testing.assert_array_equal(apply_patch_permutation(cube, patch_permutation(2, None), 16), cube)

    def test_patch_moves_whole(self):
        cube = np.zeros((1, 32, 32))
        cube[0, :16, :16] = 1.0
        out = apply_patch_permutation(cube, np.array([3, 2, 1, 0]), 16)
        assert out[0, 16:, 16:].all() and out.sum() == 256

    def test_indivisible(self):
        with pytest.raises(ArgumentError):
            apply_patch_permutation(np.zeros((1, 30, 32)), np.arange(4), 16)

    def test_pair_shares_permutation(self):
        pair = make_pairs(1, 0, c=8, h=32, w=32)[0]
        out = patch_shuffle(pair, 16, seed=3)
        np.testing.assert_allclose(out.rgb, hsi_to_rgb(out.hsi), atol=0)


class TestGamma:
    def test_value(self):
        assert abs(gamma_perturb(np.array([0.5]), 0.9)[0] - 0.5 ** 0.9) < 1e-15
        assert abs(0.5 ** 0.9 - 0.5359) < 1e-4

    def test_identity_and_fixed_points(self, rng):
        x = rng.uniform(size=10)
        np.testing.assert_array_equal(gamma_perturb(x, 1.0), x)
        assert gamma_perturb(np.array([0.0, 1.0]), 0.7).tolist() == [0.0, 1.0]

    @given(arrays(np.float64, 5, elements=unit), st.floats(0.1, 3))
    def test_monotone(self, x, gamma):
        order = np.argsort(x)
        assert np.all(np.diff(gamma_perturb(x, gamma)[order]) >= 0)

    def test_bad_gamma(self):
        with pytest.raises(ArgumentError):
            gamma_perturb(np.ones(2), 0.0)
