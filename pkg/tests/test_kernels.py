import numpy as np
import pytest

from slak.conv import conv2d_reference, depthwise_spec
from slak.kernels import dw_direct, tap_lists
from slak.tensor import rel_err


class TestTapLists:
    def test_skip_zeros_counts(self, gen):
        w = gen.standard_normal((3, 1, 5, 5)).astype(np.float32)
        w[0, 0, :2] = 0
        w[2] = 0
        ptr, ii, jj, ww = tap_lists(w, 1, skip_zeros=True)
        assert list(np.diff(ptr)) == [15, 25, 0]
        assert np.all(ww != 0)

    def test_all_taps_kept(self, gen):
        w = np.zeros((2, 1, 3, 3), np.float32)
        ptr, *_ = tap_lists(w, 1, skip_zeros=False)
        assert ptr[-1] == 18

    def test_dilation_scales_offsets(self, gen):
        w = np.ones((1, 1, 3, 3), np.float32)
        _, ii, jj, _ = tap_lists(w, 2, skip_zeros=False)
        assert sorted(set(ii.tolist())) == [0, 2, 4]


class TestDirect:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_matches_reference(self, gen, dtype):
        spec = depthwise_spec(4, 11, 3)
        x = gen.standard_normal((2, 4, 9, 13)).astype(dtype)
        w = gen.standard_normal((4, 1, 11, 3)).astype(dtype)
        w[gen.random(w.shape) < 0.5] = 0
        ref = conv2d_reference(x.astype(np.float64), w.astype(np.float64), None, spec)
        tol = 1e-6 if dtype == np.float32 else 1e-12
        assert rel_err(dw_direct(x, w, spec), ref) < tol
        assert dw_direct(x, w, spec).dtype == dtype

    def test_precomputed_taps(self, gen):
        spec = depthwise_spec(2, 5)
        x = gen.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w = gen.standard_normal((2, 1, 5, 5)).astype(np.float32)
        taps = tap_lists(w, 1)
        assert np.array_equal(dw_direct(x, w, spec, taps=taps), dw_direct(x, w, spec))
