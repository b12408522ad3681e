import numpy as np
import pytest

from cacconv import InvalidArgument, conv2d, im2col, im2col_batch, kernel_matrix, vec2mat
from cacconv.oracle import conv2d_naive
from cacconv.tensor import channel_mean, col2im_batch


class TestIm2col:
    def test_row_order_is_channel_major_then_kernel_position(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        cols = im2col_batch(x, 3)
        assert cols.shape == (2 * 9, 25)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for ci in range(2):
            for ky in range(3):
                for kx in range(3):
                    r = ci * 9 + ky * 3 + kx
                    for y in range(5):
                        for xo in range(5):
                            assert cols[r, y * 5 + xo] == xp[0, ci, y + ky, xo + kx]

    def test_single_sample_wrapper_validates_pad(self):
        x = np.zeros((2, 4, 4), dtype=np.float32)
        cm = im2col(x, 3)
        assert cm.pad == 1 and cm.k == 3 and cm.n == 4
        with pytest.raises(InvalidArgument):
            im2col(x, 3, pad=2)
        with pytest.raises(InvalidArgument):
            im2col(x, 4)

    def test_kernel_matrix_matches_row_convention(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
        wm = kernel_matrix(w)
        assert wm.shape == (18, 4)
        for ci in range(2):
            for ky in range(3):
                for kx in range(3):
                    assert np.array_equal(wm[ci * 9 + ky * 3 + kx], w[ky, kx, ci])


class TestVec2Mat:
    def test_row_major_round_trip(self):
        v = np.arange(9.0)
        m = vec2mat(v, 3)
        assert m[1, 2] == 5.0
        with pytest.raises(InvalidArgument):
            vec2mat(v, 4)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 1, 4, 4)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        assert np.allclose(conv2d(x, w), x)

    def test_constant_input_all_ones_kernel(self):
        # zero padding: interior windows see 9 taps, corners only 4
        c = 0.7
        x = np.full((1, 1, 5, 5), c, dtype=np.float32)
        w = np.ones((3, 3, 1, 1), dtype=np.float32)
        y = conv2d(x, w)
        assert np.allclose(y[0, 0, 2, 2], 9 * c, rtol=1e-6)
        assert np.allclose(y[0, 0, 0, 0], 4 * c, rtol=1e-6)
        assert np.allclose(y[0, 0, 0, 2], 6 * c, rtol=1e-6)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            n = int(rng.integers(3, 10))
            k = int(rng.choice([1, 3, 5]))
            if k > n:
                k = 1
            ci, co = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = rng.standard_normal((2, ci, n, n)).astype(np.float32)
            w = rng.standard_normal((k, k, ci, co)).astype(np.float32)
            b = rng.standard_normal(co).astype(np.float32)
            ref = conv2d_naive(x, w, b)
            got = conv2d(x, w, b)
            assert np.max(np.abs(got - ref)) <= 1e-5 * np.max(np.abs(ref))

    def test_channel_mismatch_rejected(self):
        x = np.zeros((1, 3, 4, 4), dtype=np.float32)
        w = np.zeros((3, 3, 2, 4), dtype=np.float32)
        with pytest.raises(InvalidArgument):
            conv2d(x, w)


class TestCol2Im:
    def test_adjoint_identity(self):
        # <im2col(x), C> == <x, col2im(C)> for random C characterizes the adjoint
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 6, 6))
        cols = im2col_batch(x, 3)
        c = rng.standard_normal(cols.shape)
        lhs = float((cols * c).sum())
        rhs = float((x * col2im_batch(c, 2, 3, 6, 3)).sum())
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


class TestChannelMean:
    def test_two_constant_channels(self):
        x = np.stack([np.full((4, 4), 1.0), np.full((4, 4), 3.0)])[None].astype(np.float32)
        assert np.array_equal(channel_mean(x), np.full((1, 1, 4, 4), 2.0, dtype=np.float32))

    def test_single_channel_unchanged(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        assert np.array_equal(channel_mean(x), x)

    def test_matches_scalar_accumulation_loop(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 8, 5, 5)).astype(np.float32)
        got = channel_mean(x)
        for y in range(5):
            for xo in range(5):
                acc = np.float32(0.0)
                for ci in range(8):
                    acc = acc + x[0, ci, y, xo]
                assert got[0, 0, y, xo] == acc / 8
