import numpy as np
import pytest

from slak.config import ModelConfig, convnext_tiny
from slak.counting import layer_table, sparse_param_counter
from slak.errors import DegenerateError, InvalidCountError, InvalidShapeError, ScheduleRangeError
from slak.sparsity import (AdaptationConfig, Mask, SparsityPlan, adaptation_step, apply_masks,
                           build_masks_global_topk, cosine_adaptation_rate, global_sparsity, magnitude_prune,
                           random_grow, snip_scores, width_plan)
from slak.tensor import RngStream


def _active(masks):
    return {(n, int(i)) for n, m in masks.items() for i in np.flatnonzero(m.occupancy)}


class TestMask:
    def test_nnz_cached(self):
        m = Mask([[1, 0], [1, 1]])
        assert m.nnz == 3 and m.density == 0.75

    def test_rejects_non_binary(self):
        with pytest.raises(InvalidShapeError):
            Mask([0, 2])

    def test_plan_totals(self):
        plan = SparsityPlan.uniform({"a": 10, "b": 30}, 0.5)
        assert plan.total_nnz == 20 and plan.total_size == 40


class TestSnip:
    def test_example(self):
        assert snip_scores([1.0, -2.0], [3.0, 0.5]).tolist() == [3.0, 1.0]

    def test_zero_gradient(self):
        assert not snip_scores(np.ones(4), np.zeros(4)).any()

    def test_random_matches_elementwise(self, gen):
        w, g = gen.standard_normal(1000), gen.standard_normal(1000)
        want = [abs(a * b) for a, b in zip(w, g)]
        assert np.array_equal(snip_scores(w, g), want)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            snip_scores(np.ones(3), np.ones(4))


class TestGlobalTopK:
    def test_example(self):
        masks = build_masks_global_topk({"A": np.array([3.0, 1.0]), "B": np.array([2.0, 0.0])}, 0.5)
        assert _active(masks) == {("A", 0), ("B", 0)}

    def test_zero_sparsity_keeps_all(self, gen):
        masks = build_masks_global_topk({"A": gen.random(5), "B": gen.random((2, 3))}, 0.0)
        assert all(m.nnz == m.size for m in masks.values())

    def test_ties_by_layer_then_index(self):
        masks = build_masks_global_topk({"A": np.ones(3), "B": np.ones(3)}, 0.5)
        assert _active(masks) == {("A", 0), ("A", 1), ("A", 2)}
        masks = build_masks_global_topk({"A": np.ones(3), "B": np.ones(3)}, 0.7)
        assert _active(masks) == {("A", 0), ("A", 1)}

    def test_degenerate(self):
        with pytest.raises(DegenerateError):
            build_masks_global_topk({"A": np.ones(3)}, 0.9)

    @pytest.mark.parametrize("s", [0.1, 0.4, 0.55, 0.8])
    def test_achieved_sparsity(self, gen, s):
        scores = {"a": gen.random((7, 13)), "b": gen.random(50), "c": gen.random((3, 3, 3))}
        masks = build_masks_global_topk(scores, s)
        n = sum(v.size for v in scores.values())
        assert sum(m.nnz for m in masks.values()) == round((1 - s) * n)
        assert abs(global_sparsity(masks) - s) <= 1.0 / n
        kept = np.concatenate([scores[k].ravel()[masks[k].occupancy.ravel() == 1] for k in scores])
        dropped = np.concatenate([scores[k].ravel()[masks[k].occupancy.ravel() == 0] for k in scores])
        assert kept.min() >= dropped.max()


class TestPruneGrow:
    def test_prune_example(self):
        m, pruned = magnitude_prune(np.array([0.5, -0.1, 0.3]), Mask.dense(3), 1)
        assert m.occupancy.tolist() == [1, 0, 1] and pruned.tolist() == [1]

    def test_prune_tie(self):
        m, _ = magnitude_prune(np.array([0.2, -0.2, 0.2]), Mask.dense(3), 1)
        assert m.occupancy.tolist() == [0, 1, 1]

    def test_prune_zero(self):
        mask = Mask([1, 0, 1])
        assert magnitude_prune(np.ones(3), mask, 0)[0] == mask

    def test_prune_too_many(self):
        with pytest.raises(InvalidCountError):
            magnitude_prune(np.ones(3), Mask([1, 0, 1]), 3)

    def test_prune_ignores_inactive(self):
        m, pruned = magnitude_prune(np.array([0.0, 5.0, 1.0, 2.0]), Mask([0, 1, 1, 1]), 1)
        assert pruned.tolist() == [2]

    def test_grow_zero(self, stream):
        mask = Mask([1, 0, 0])
        assert random_grow(mask, 0, stream)[0] == mask

    def test_grow_all(self, stream):
        m, grown = random_grow(Mask([0, 0, 0]), 3, stream)
        assert m.nnz == 3 and grown.tolist() == [0, 1, 2]

    def test_grow_replay(self):
        a = random_grow(Mask([1, 0, 0]), 1, RngStream(42))[1]
        b = random_grow(Mask([1, 0, 0]), 1, RngStream(42))[1]
        assert a.tolist() == b.tolist() and a[0] in (1, 2)

    def test_grow_too_many(self, stream):
        with pytest.raises(InvalidCountError):
            random_grow(Mask([1, 0, 0]), 3, stream)

    def test_grow_is_uniform(self):
        counts = np.zeros(6)
        for seed in range(3000):
            _, g = random_grow(Mask([1, 0, 0, 0, 0, 0]), 1, RngStream(seed))
            counts[g] += 1
        assert counts[0] == 0
        # five slots, 600 expected each; 5 sigma is about 110
        assert np.abs(counts[1:] - 600).max() < 110


class TestAdaptationStep:
    def test_zero_rate_unchanged(self, gen, stream):
        w = gen.standard_normal(20)
        mask = Mask((gen.random(20) < 0.5).astype(np.uint8))
        w *= mask.occupancy
        before = w.copy()
        new, pruned, grown = adaptation_step(w, mask, 0.0, stream)
        assert new == mask and np.array_equal(w, before) and pruned.size == grown.size == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_invariants(self, seed):
        g = np.random.default_rng(seed)
        w = g.standard_normal((4, 1, 7, 5))
        mask = Mask((g.random(w.shape) < g.uniform(0.2, 0.9)).astype(np.uint8))
        w *= mask.occupancy
        p = g.uniform(0.05, 0.6)
        new, pruned, grown = adaptation_step(w, mask, p, RngStream(seed))
        assert new.nnz == mask.nnz
        assert pruned.size == grown.size == min(int(np.floor(p * mask.nnz)), mask.size - mask.nnz)
        assert not set(pruned.tolist()) & set(grown.tolist())
        assert np.all(w.ravel()[grown] == 0)
        assert np.all(w[new.occupancy == 0] == 0)

    def test_small_pool_caps_count(self, stream):
        w = np.arange(1.0, 11.0)
        mask = Mask([1] * 9 + [0])
        w[9] = 0
        new, pruned, grown = adaptation_step(w, mask, 0.3, stream)
        assert new.nnz == 9 and pruned.tolist() == [0] and grown.tolist() == [9]

    def test_rate_range(self, stream):
        with pytest.raises(ValueError):
            adaptation_step(np.ones(3), Mask.dense(3), 1.5, stream)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_adaptation_rate(0.3, 0, 100) == 0.3
        assert abs(cosine_adaptation_rate(0.3, 100, 100)) < 1e-15
        assert abs(cosine_adaptation_rate(0.3, 50, 100) - 0.15) < 1e-15

    def test_out_of_range(self):
        with pytest.raises(ScheduleRangeError):
            cosine_adaptation_rate(0.3, 101, 100)
        with pytest.raises(ScheduleRangeError):
            cosine_adaptation_rate(0.3, -1, 100)

    def test_monotone(self):
        v = [cosine_adaptation_rate(0.3, t, 977) for t in range(978)]
        assert all(a >= b for a, b in zip(v, v[1:]))

    def test_config(self):
        c = AdaptationConfig(frequency=100, horizon=300)
        assert [t for t in range(1, 400) if c.adapts_at(t)] == [100, 200]
        with pytest.raises(ValueError):
            AdaptationConfig(frequency=0)
        with pytest.raises(ValueError):
            AdaptationConfig(initial_rate=0.0)


class TestApplyMasks:
    def test_ones_and_zeros(self, gen):
        w = gen.standard_normal((3, 4))
        keep = w.copy()
        apply_masks({"w": w}, {"w": Mask.dense(w.shape)})
        assert np.array_equal(w, keep)
        apply_masks({"w": w}, {"w": Mask(np.zeros(w.shape))})
        assert not w.any()

    def test_after_update(self, gen):
        w = gen.standard_normal(50)
        mask = Mask((gen.random(50) < 0.4).astype(np.uint8))
        w -= 0.1 * gen.standard_normal(50)
        apply_masks({"w": w}, {"w": mask})
        assert np.abs(w * (1 - mask.occupancy)).sum() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            apply_masks({"w": np.ones(3)}, {"w": Mask.dense(4)})


class TestWidthPlan:
    def test_dense_factor_one(self):
        cfg = convnext_tiny()
        f, dims, _ = width_plan(cfg.stage_dims, 0.0, sparse_param_counter(cfg))
        assert f == 1.0 and dims == list(cfg.stage_dims)

    def test_rounding_to_eight(self):
        f, dims, _ = width_plan([10, 20], 0.5, lambda d, s: sum(x * x for x in d) * (1 - s))
        assert all(d % 8 == 0 and d >= 8 for d in dims)

    @pytest.mark.parametrize("blocks,rates", [((3, 3, 9, 3), (0.2, 0.4, 0.55)),
                                              ((6, 6, 18, 6), (0.2, 0.4, 0.55, 0.7))])
    def test_pointwise_dominated_law(self, blocks, rates):
        # dense stem, downsampling and head layers widen too, so the law only holds
        # while they stay a small share of the sparse budget
        cfg = ModelConfig(stage_blocks=blocks, stage_kernels=(3, 3, 3, 3), dw_variant="full", num_classes=10)
        table = layer_table(cfg)
        pw = sum(r.params for r in table if ".pw" in r.name and r.name.endswith(".weight"))
        assert pw / sum(r.params for r in table) >= 0.9
        counter = sparse_param_counter(cfg)
        for s in rates:
            f, _, _ = width_plan(cfg.stage_dims, s, counter)
            assert abs(f - (1 - s) ** -0.5) <= 0.1 + 1e-9
