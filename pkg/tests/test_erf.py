import numpy as np
import pytest

from slak.config import ModelConfig, slak_micro
from slak.conv import depthwise_spec
from slak.erf import (ContributionMap, ConvStack, area_ratio, area_side, contribution_map, linear_stack_support,
                      map_csv, map_svg, summary)
from slak.errors import DegenerateError, InvalidShapeError
from slak.model import build
from slak.tensor import RngStream


def _bbox(mask):
    r = np.flatnonzero(mask.any(axis=1))
    c = np.flatnonzero(mask.any(axis=0))
    return r[-1] - r[0] + 1, c[-1] - c[0] + 1


class TestContributionMap:
    def test_one_by_one(self, gen):
        stack = ConvStack([(np.full((1, 1, 1, 1), 2.0), depthwise_spec(1, 1))])
        cmap = contribution_map(stack, gen.standard_normal((2, 1, 8, 8)))
        want = np.zeros((8, 8))
        want[4, 4] = 1.0
        assert np.array_equal(cmap.grid, want)

    def test_single_layer_is_flipped_kernel(self, gen):
        w = gen.standard_normal((1, 1, 5, 5))
        stack = ConvStack([(w, depthwise_spec(1, 5))])
        cmap = contribution_map(stack, gen.standard_normal((1, 1, 12, 12)))
        # correlation: output (c, c) reads x[c + i - 2, c + j - 2] with weight w[i, j]
        want = np.zeros((12, 12))
        want[4:9, 4:9] = np.abs(w[0, 0])
        assert np.allclose(cmap.grid, want / want.max(), rtol=0, atol=1e-15)

    def test_two_stacked_3x3(self, gen):
        stack = ConvStack.depthwise(2, [3, 3], RngStream(0), positive=True)
        cmap = contribution_map(stack, gen.standard_normal((1, 2, 16, 16)))
        assert _bbox(cmap.support()) == linear_stack_support([3, 3]) == (5, 5)
        assert cmap.support().sum() == 25

    @pytest.mark.parametrize("kernels,dil", [([(7, 3), (3, 7)], None), ([5, 3, 3], [1, 2, 3]), ([(9, 1)], None)])
    def test_linear_support_matches_oracle(self, gen, kernels, dil):
        stack = ConvStack.depthwise(1, kernels, RngStream(1), dilations=dil, positive=True)
        cmap = contribution_map(stack, gen.standard_normal((1, 1, 32, 32)))
        ks = [(k, k) if isinstance(k, int) else k for k in kernels]
        oracle = linear_stack_support([(kh, kw, 1 if dil is None else dil[i]) for i, (kh, kw) in enumerate(ks)])
        assert _bbox(cmap.support()) == oracle

    def test_decomposed_cross(self, gen):
        M, N = 11, 3
        stack_h = ConvStack.depthwise(1, [(M, N)], RngStream(2), positive=True)
        stack_w = ConvStack.depthwise(1, [(N, M)], RngStream(3), positive=True)

        class Parallel:
            def forward_features(self, x, mode="eval"):
                a, ca = stack_h.forward_features(x)
                b, cb = stack_w.forward_features(x)
                return a + b, (ca, cb)

            def backward(self, caches, dfeatures=None, return_input_grad=True, dlogits=None):
                return {}, stack_h.backward(caches[0], dfeatures)[1] + stack_w.backward(caches[1], dfeatures)[1]

        cmap = contribution_map(Parallel(), gen.standard_normal((1, 1, 20, 20)))
        c = 10
        want = np.zeros((20, 20), bool)
        want[c - M // 2:c + M // 2 + 1, c - N // 2:c + N // 2 + 1] = True
        want[c - N // 2:c + N // 2 + 1, c - M // 2:c + M // 2 + 1] = True
        assert np.array_equal(cmap.support(), want)
        assert linear_stack_support([(M, N)])[0] == M

    def test_normalised(self, gen):
        stack = ConvStack.depthwise(2, [5], RngStream(0))
        cmap = contribution_map(stack, gen.standard_normal((3, 2, 10, 10)))
        assert cmap.grid.max() == 1.0 and cmap.grid.min() >= 0.0

    def test_per_image_norm_flag(self, gen):
        stack = ConvStack.depthwise(1, [3, 3], RngStream(0), positive=True)
        x = gen.standard_normal((2, 1, 10, 10))
        a, b = contribution_map(stack, x), contribution_map(stack, x, per_image_norm=True)
        # a linear stack has the same map for every image, so both orders agree
        assert np.allclose(a.grid, b.grid)

    def test_bad_input(self):
        stack = ConvStack.depthwise(1, [3], RngStream(0))
        with pytest.raises(InvalidShapeError):
            contribution_map(stack, np.zeros((0, 1, 8, 8)))
        with pytest.raises(InvalidShapeError):
            contribution_map(stack, np.zeros((1, 1, 8, 6)))

    def test_model_map(self, gen):
        m = build(slak_micro(activation="identity"), RngStream(0), np.float64)
        cmap = contribution_map(m, gen.standard_normal((2, 3, 64, 64)))
        assert cmap.grid.shape == (64, 64) and cmap.grid.max() == 1.0


class TestAreaRatio:
    def test_uniform_full(self):
        assert area_ratio(np.ones((7, 7)), 1.0) == 1.0
        assert area_ratio(np.ones((8, 8)), 1.0) == 1.0

    def test_center_delta(self):
        g = np.zeros((8, 8))
        g[4, 4] = 1
        for t in (0.1, 0.5, 1.0):
            assert area_side(g, t) == 1 and area_ratio(g, t) == 1 / 64

    def test_uniform_quarter(self):
        assert area_side(np.ones((10, 10)), 0.25) == 5 and area_ratio(np.ones((10, 10)), 0.25) == 0.25

    def test_brute_force_windows(self, gen):
        g = gen.random((9, 9)) ** 4
        for t in (0.2, 0.3, 0.5, 0.99):
            a = area_side(g, t)
            masses = []
            for side in range(1, 10):
                lo = max(4 - side // 2, 0)
                masses.append(g[lo:lo + side, lo:lo + side].sum())
            want = next(i + 1 for i, m in enumerate(masses) if m >= t * g.sum() * (1 - 1e-12))
            assert a == want

    def test_monotone_in_t(self, gen):
        g = gen.random((16, 16))
        r = [area_ratio(g, t) for t in np.linspace(0.01, 1, 50)]
        assert all(a <= b for a, b in zip(r, r[1:]))

    def test_zero_mass(self):
        with pytest.raises(DegenerateError):
            area_ratio(np.zeros((4, 4)), 0.5)

    def test_t_range(self):
        with pytest.raises(ValueError):
            area_ratio(np.ones((4, 4)), 0.0)


class TestExports:
    def test_summary_keys(self):
        assert set(summary(ContributionMap(np.ones((8, 8))))) == {"0.2", "0.3", "0.5", "0.99"}

    def test_csv_shape(self):
        rows = map_csv(ContributionMap(np.eye(4))).splitlines()
        assert len(rows) == 4 and all(len(r.split(",")) == 4 for r in rows)

    def test_svg(self):
        svg = map_svg(ContributionMap(np.eye(224)))
        assert svg.startswith("<svg") and svg.count("<rect") == 112 * 112


class TestLinearStackSupport:
    def test_examples(self):
        assert linear_stack_support([3]) == (3, 3)
        assert linear_stack_support([3, 3]) == (5, 5)
        assert linear_stack_support([(51, 5, 1), (5, 51, 1)]) == (55, 55)
        assert linear_stack_support([(5, 5, 3)]) == (13, 13)

    def test_empty(self):
        with pytest.raises(ValueError):
            linear_stack_support([])


class TestKernelSizeOrdering:
    def test_single_stage_erf_grows_with_kernel(self):
        rs = []
        for M in (7, 15, 31):
            c = ModelConfig(stage_blocks=(2,), stage_dims=(16,), stage_kernels=(M,), activation="identity",
                            layer_scale_init=1.0, input_size=128, num_classes=2)
            m = build(c, RngStream(0), np.float64)
            x = RngStream(0).derive("img").generator.standard_normal((2, 3, 128, 128))
            rs.append(area_ratio(contribution_map(m, x), 0.2))
        assert rs[0] < rs[1] < rs[2]
