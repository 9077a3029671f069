import numpy as np
import pytest

from forgenet.srm import KV_CENTER, SrmFilterBank, apply_srm, build_bank, truncate


class TestBank:
    def test_kernels_sum_to_zero(self):
        for k in build_bank().kernels:
            assert k.sum() == 0.0

    def test_build_is_deterministic(self):
        a, b = build_bank(), build_bank()
        assert a.q == b.q and a.truncation == b.truncation
        for ka, kb in zip(a.kernels, b.kernels):
            np.testing.assert_array_equal(ka, kb)

    def test_kv_center_matches_committed_constant(self):
        kv = build_bank().kernels[2]
        assert kv.shape == (5, 5)
        assert kv[2, 2] == KV_CENTER

    def test_kernel_shapes_and_normalizers(self):
        bank = build_bank()
        assert [k.shape for k in bank.kernels] == [(3, 3), (3, 3), (5, 5)]
        assert bank.q == (2.0, 4.0, 12.0)
        assert bank.truncation == 2.0


class TestTruncate:
    def test_clamps_above(self):
        assert truncate(np.array(5.0), 2.0) == 2.0

    def test_interior_point_untouched(self):
        assert truncate(np.array(-0.5), 2.0) == -0.5

    def test_symmetric_clamp(self):
        np.testing.assert_array_equal(
            truncate(np.array([-9.0, 0.0, 9.0]), 2.0), [-2.0, 0.0, 2.0]
        )

    def test_nonpositive_limit_rejected(self):
        with pytest.raises(ValueError):
            truncate(np.zeros(1), 0.0)


class TestApplySrm:
    def test_constant_image_gives_exact_zero(self):
        for value in (0.0, 0.25, 1.0):
            out = apply_srm(np.full((3, 16, 16), value))
            np.testing.assert_array_equal(out, np.zeros((3, 16, 16)))

    def test_impulse_response_matches_flipped_kernels(self):
        # white pixel on black: each channel contributes the kernel, the
        # channel average cancels the factor 3, so the response around the
        # impulse is flip(kernel) * 255 / q, truncated then rescaled
        bank = build_bank()
        img = np.zeros((3, 17, 17))
        img[:, 8, 8] = 1.0
        out = apply_srm(img, bank)
        for k, (kernel, q) in enumerate(zip(bank.kernels, bank.q)):
            kh, kw = kernel.shape
            expected = np.clip(kernel[::-1, ::-1] * 255.0 / q, -2.0, 2.0) / 2.0
            got = out[k, 8 - kh // 2 : 8 + kh // 2 + 1, 8 - kw // 2 : 8 + kw // 2 + 1]
            np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_output_bounded_by_one(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            out = apply_srm(rng.uniform(size=(3, 12, 12)))
            assert np.abs(out).max() <= 1.0

    def test_invariant_to_constant_shift(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0.1, 0.5, size=(3, 10, 10))
        np.testing.assert_allclose(
            apply_srm(img), apply_srm(img + 0.3), rtol=0, atol=1e-12
        )

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(ValueError, match=r"\[3,H,W\]"):
            apply_srm(np.zeros((1, 8, 8)))
