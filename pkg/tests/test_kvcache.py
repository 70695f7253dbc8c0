import numpy as np
import pytest

from laprox.attention import build_stack, decode_step, prefill_stack
from laprox.kvcache import (
    ConsistencyError, KvCache, PlanError, SelectionPlan, apply_plan, retention_stats, write_snapshot,
)
from laprox.linalg import make_rng
from laprox.policies import build_plan
from laprox.scoring import PolicyConfig


def plan_of(*heads, n_tokens=8, window=0):
    return SelectionPlan([[np.asarray(h) for h in heads]], n_tokens, window)


def test_from_prefill_shapes(small_model):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    assert cache.n_layers == 2 and cache.n_kv_heads == 2
    assert all(cache.n_entries(l, g) == 40 for l in range(2) for g in range(2))
    one = build_stack(1, 1, 1, 4, make_rng(0))
    c1 = KvCache.from_prefill(one, prefill_stack(one, make_rng(1).standard_normal((5, 4))))
    assert len(c1.keys) == 1 and len(c1.keys[0]) == 1 and c1.keys[0][0].shape == (5, 4)


def test_from_prefill_rejects_ragged_layers(rng):
    stack = build_stack(1, 2, 2, 4, rng)
    a = prefill_stack(stack, rng.standard_normal((5, 8)))
    b = prefill_stack(stack, rng.standard_normal((6, 8)))
    with pytest.raises(ConsistencyError):
        KvCache.from_prefill(stack, a + b)


def test_full_plan_view_is_identity(small_model):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    view = apply_plan(cache, SelectionPlan.full(2, 4, 40))
    for l in range(2):
        for h in range(4):
            k, v = view.head_kv(l, h)
            assert k is cache.head_kv(l, h)[0] and v is cache.head_kv(l, h)[1]


def test_full_retention_decode_is_bit_identical(small_model, rng):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    view = apply_plan(cache, SelectionPlan.full(2, 4, 40))
    x = rng.standard_normal((1, stack.model_dim))
    for l in range(2):
        assert np.array_equal(decode_step(stack, l, x, cache).out, decode_step(stack, l, x, view).out)


def test_window_only_view(small_model):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    window = [[np.arange(32, 40) for _ in range(4)] for _ in range(2)]
    view = apply_plan(cache, SelectionPlan(window, 40, 8))
    assert all(len(view.head_kv(l, h)[0]) == 8 for l in range(2) for h in range(4))
    assert np.array_equal(view.head_kv(1, 3)[0], acts[1].keys[1][32:])


def test_gqa_union_of_group(rng):
    stack = build_stack(1, 2, 1, 4, rng)
    cache = KvCache.from_prefill(stack, prefill_stack(stack, rng.standard_normal((8, 8))))
    view = apply_plan(cache, plan_of([1, 3], [3, 5]))
    assert np.array_equal(view.physical_indices(0, 0), [1, 3, 5])
    small = view.materialize()
    assert np.array_equal(small.positions[0][0], [1, 3, 5])
    assert np.array_equal(small.keys[0][0], cache.keys[0][0][[1, 3, 5]])


def test_materialize_is_idempotent(small_model):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    plan = build_plan(PolicyConfig("laprox", window=8), stack, acts, 16)
    once = apply_plan(cache, plan).materialize()
    twice = apply_plan(once, plan).materialize()
    for l in range(2):
        for g in range(2):
            assert np.array_equal(once.keys[l][g], twice.keys[l][g])
            assert np.array_equal(once.positions[l][g], twice.positions[l][g])


def test_view_preserves_token_order(small_model):
    stack, acts = small_model
    cache = KvCache.from_prefill(stack, acts)
    plan = build_plan(PolicyConfig("snapkv", window=8), stack, acts, 12)
    view = apply_plan(cache, plan)
    for h in range(4):
        want = plan.indices[0][h]
        assert np.array_equal(view.head_kv(0, h)[1], acts[0].values[h // 2][want])


@pytest.mark.parametrize("bad", [[0, 8], [-1, 2], [3, 3], [4, 2]])
def test_invalid_plans_raise(rng, bad):
    stack = build_stack(1, 1, 1, 4, rng)
    cache = KvCache.from_prefill(stack, prefill_stack(stack, rng.standard_normal((8, 4))))
    with pytest.raises(PlanError):
        apply_plan(cache, plan_of(bad))


def test_plan_missing_window_token_raises():
    with pytest.raises(PlanError):
        plan_of([0, 1, 6], window=2).validate()


def test_view_of_evicted_token_raises(rng):
    stack = build_stack(1, 1, 1, 4, rng)
    cache = KvCache.from_prefill(stack, prefill_stack(stack, rng.standard_normal((8, 4))))
    small = apply_plan(cache, plan_of([2, 4, 6])).materialize()
    with pytest.raises(PlanError):
        apply_plan(small, plan_of([2, 3]))


def test_retention_stats_examples():
    uniform = SelectionPlan([[np.arange(4), np.arange(2, 6)]], 8)
    assert retention_stats(uniform).head_variance == 0.0
    uneven = SelectionPlan([[np.arange(10), np.arange(2)]], 12)
    assert retention_stats(uneven).counts.tolist() == [[10, 2]]


def test_global_plan_layer_totals(small_model):
    stack, acts = small_model
    plan = build_plan(PolicyConfig("laprox", window=8), stack, acts, 12)
    stats = retention_stats(plan)
    assert stats.layer_totals.sum() == 2 * 4 * 12 == stats.total


def test_snapshot_csv(tmp_path):
    path = tmp_path / "snap.csv"
    write_snapshot(path, SelectionPlan([[np.array([0, 2])]], 3, 1))
    assert path.read_text().splitlines() == ["token,layer,head,retained", "0,0,0,1", "1,0,0,0", "2,0,0,1"]
