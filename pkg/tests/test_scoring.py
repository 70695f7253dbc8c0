import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laprox.attention import build_stack, prefill_stack
from laprox.linalg import ParameterError, col_l2_norms, make_rng, row_l2_norms
from laprox.scoring import (
    PolicyConfig, layer_preference, observation_attention, plan_sllm, score_cake, score_criticalkv,
    score_laprox, score_model, score_snapkv,
)

from conftest import single_head_acts


def causal_attention(rng, t, heads=1):
    logits = rng.normal(0, 1, (heads, t, t))
    logits[:, np.triu_indices(t, 1)[0], np.triu_indices(t, 1)[1]] = -np.inf
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def uniform_attention(t, rows):
    return np.full((1, rows, t), 1.0 / t)


def test_laprox_unit_values_reduce_to_column_norms(rng):
    attn = causal_attention(rng, 20)
    values = np.eye(4)[rng.integers(0, 4, 20)][None]
    stack, acts = single_head_acts(attn, values)
    s = score_laprox(acts, stack, 0, PolicyConfig(window=5))
    assert np.allclose(s.scores[0, 0, :15], col_l2_norms(attn[0, -5:])[:15])


def test_laprox_uniform_attention_ranks_by_value_norm(rng):
    values = rng.standard_normal((1, 12, 3))
    stack, acts = single_head_acts(uniform_attention(12, 12), values)
    s = score_laprox(acts, stack, 0, PolicyConfig(window=4)).scores[0, 0, :8]
    norms = row_l2_norms(values[0])[:8]
    assert np.array_equal(np.argsort(-s, kind="stable"), np.argsort(-norms, kind="stable"))


def test_laprox_uses_each_heads_output_block(rng):
    attn = causal_attention(rng, 10, heads=2)
    values = rng.standard_normal((2, 10, 2))
    w_o = np.diag([1.0, 1.0, 5.0, 5.0])
    stack, acts = single_head_acts(attn, values, w_o)
    s = score_laprox(acts, stack, 0, PolicyConfig(window=3)).scores[0]
    assert np.allclose(s[1, :7], 5 * col_l2_norms(attn[1, -3:])[:7] * row_l2_norms(values[1])[:7])


def test_window_tokens_flagged_whatever_the_inputs(rng):
    stack, acts = single_head_acts(causal_attention(rng, 10), 100 * rng.standard_normal((1, 10, 2)))
    for scorer in (lambda c: score_laprox(acts, stack, 0, c), lambda c: score_snapkv(acts, stack, c)):
        s = scorer(PolicyConfig(window=3))
        assert s.window == 3 and s.is_window().tolist() == [False] * 7 + [True] * 3
        assert not s.scores[0, 0, 7:].any()


def test_short_prompt_warns(rng):
    stack, acts = single_head_acts(causal_attention(rng, 4), rng.standard_normal((1, 4, 2)))
    with pytest.warns(UserWarning, match="nothing is evictable"):
        s = score_laprox(acts, stack, 0, PolicyConfig(window=8))
    assert s.n_evictable == 0


def test_snapkv_examples():
    stack, acts = single_head_acts(uniform_attention(10, 10), np.ones((1, 10, 2)))
    s = score_snapkv(acts, stack, PolicyConfig("snapkv", window=4))
    assert np.allclose(s.scores[0, 0, :6], 0.1)


def test_snapkv_kernel_one_is_column_mean(rng):
    attn = causal_attention(rng, 16)
    stack, acts = single_head_acts(attn, np.ones((1, 16, 2)))
    s = score_snapkv(acts, stack, PolicyConfig("snapkv", window=4, kernel=1))
    assert np.allclose(s.scores[0, 0, :12], attn[0, -4:, :12].mean(axis=0))


def test_snapkv_full_mass_column():
    attn = np.zeros((1, 6, 6))
    attn[0, :, 0] = 1.0
    stack, acts = single_head_acts(attn, np.ones((1, 6, 2)))
    s = score_snapkv(acts, stack, PolicyConfig("snapkv", window=3, kernel=1))
    assert s.scores[0, 0, 0] == 1.0


def test_pooling_never_reads_window_columns():
    attn = np.zeros((1, 8, 8))
    attn[0, :, 7] = 1.0  # all mass on the last window token
    stack, acts = single_head_acts(attn, np.ones((1, 8, 2)))
    s = score_snapkv(acts, stack, PolicyConfig("snapkv", window=2, kernel=7))
    assert not s.scores.any()


def test_cake_examples():
    attn = np.zeros((1, 2, 3))
    attn[0, :, 0] = [0.0, 1.0]
    stack, acts = single_head_acts(attn, np.ones((1, 3, 2)))
    s = score_cake(acts, stack, PolicyConfig("cake", window=2, kernel=1, gamma=1.0))
    assert s.scores[0, 0, 0] == pytest.approx(0.75)


def test_cake_constant_column_has_no_variance_term():
    stack, acts = single_head_acts(uniform_attention(10, 10), np.ones((1, 10, 2)))
    a = score_cake(acts, stack, PolicyConfig("cake", window=4, gamma=5.0))
    b = score_snapkv(acts, stack, PolicyConfig("snapkv", window=4))
    assert np.allclose(a.scores, b.scores)


def test_cake_gamma_zero_is_snapkv(small_model):
    stack, acts = small_model
    for a in acts:
        assert np.array_equal(score_cake(a, stack, PolicyConfig("cake", window=8, gamma=0.0)).scores,
                              score_snapkv(a, stack, PolicyConfig("snapkv", window=8)).scores)


def test_criticalkv_arithmetic():
    attn = np.zeros((1, 4, 4))
    attn[0, :, 1:] = 1 / 3
    values = np.zeros((1, 4, 2))
    values[0, 0] = [0.0, 2.0]
    stack, acts = single_head_acts(attn, values)
    s = score_criticalkv(acts, stack, 0, PolicyConfig("criticalkv", window=2, kernel=1, epsilon=0.01))
    assert s.scores[0, 0, 0] == pytest.approx(0.02)


def test_criticalkv_large_epsilon_ranks_by_value_norm(rng):
    attn = causal_attention(rng, 24)
    values = rng.standard_normal((1, 24, 3))
    stack, acts = single_head_acts(attn, values)
    s = score_criticalkv(acts, stack, 0, PolicyConfig("criticalkv", window=4, epsilon=1e6)).scores[0, 0, :20]
    norms = row_l2_norms(values[0])[:20]
    assert np.array_equal(np.argsort(-s, kind="stable"), np.argsort(-norms, kind="stable"))


def test_criticalkv_zero_epsilon_unit_values_is_snapkv(rng):
    values = np.eye(3)[rng.integers(0, 3, 20)][None]
    stack, acts = single_head_acts(causal_attention(rng, 20), values)
    a = score_criticalkv(acts, stack, 0, PolicyConfig("criticalkv", window=4, epsilon=0.0))
    b = score_snapkv(acts, stack, PolicyConfig("snapkv", window=4))
    assert np.array_equal(a.scores, b.scores)


def test_gqa_scores_use_group_mean(small_model):
    stack, acts = small_model
    obs = observation_attention(acts[0], stack, 8)
    assert np.allclose(obs[0], acts[0].attn[:2, -8:].mean(axis=0))
    assert np.array_equal(obs[0], obs[1])
    s = score_snapkv(acts[0], stack, PolicyConfig("snapkv", window=8)).scores[0]
    assert np.array_equal(s[2], s[3])


def test_group_of_one_is_plain_attention(rng):
    stack = build_stack(1, 3, 3, 4, rng)
    acts = prefill_stack(stack, rng.standard_normal((20, 12)))
    assert np.array_equal(observation_attention(acts[0], stack, 5), acts[0].attn[:, -5:])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scores_are_scale_covariant(seed, c):
    rng = make_rng(seed)
    attn = causal_attention(rng, 16)
    values = rng.standard_normal((1, 16, 3))
    cfg = PolicyConfig(window=4)
    stack, acts = single_head_acts(attn, values)
    s1 = score_laprox(acts, stack, 0, cfg).scores
    stack, acts = single_head_acts(attn, c * values)
    s2 = score_laprox(acts, stack, 0, cfg).scores
    assert np.allclose(s2, c * s1, rtol=1e-9, atol=1e-300)


def test_dominant_value_row_ranks_first(rng):
    attn = causal_attention(rng, 16)
    values = rng.standard_normal((1, 16, 3))
    values[0, 5] *= 1e4
    stack, acts = single_head_acts(attn, values)
    assert np.argmax(score_laprox(acts, stack, 0, PolicyConfig(window=4)).scores[0, 0]) == 5


def test_score_model_stacks_layers(small_model):
    stack, acts = small_model
    s = score_model(PolicyConfig(window=8), acts, stack)
    assert s.scores.shape == (2, 4, 40) and s.window == 8


def test_sllm_examples():
    p = plan_sllm(100, PolicyConfig("sllm"), 10)
    assert p.indices[0][0].tolist() == [0, 1, 2, 3, 94, 95, 96, 97, 98, 99]
    assert plan_sllm(8, PolicyConfig("sllm"), 8).indices[0][0].tolist() == list(range(8))
    assert plan_sllm(6, PolicyConfig("sllm"), 50).indices[0][0].tolist() == list(range(6))
    with pytest.raises(ParameterError):
        plan_sllm(100, PolicyConfig("sllm"), 4)


def test_layer_preference_infinite_temperatures_collapse(rng):
    obs = causal_attention(rng, 12, heads=2)[:, -4:]
    assert layer_preference(obs, float("inf"), float("inf")) == 1.0


@pytest.mark.parametrize("kwargs", [dict(policy="nope"), dict(window=0), dict(kernel=4),
                                    dict(safeguard=1.5), dict(allocation="weird"), dict(tau1=0)])
def test_policy_config_validation(kwargs):
    with pytest.raises(ParameterError):
        PolicyConfig(**kwargs)


def test_score_csv(tmp_path, small_model):
    stack, acts = small_model
    path = tmp_path / "scores.csv"
    score_model(PolicyConfig(window=8), acts, stack).write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,head,token,score,is_window"
    assert len(lines) == 1 + 2 * 4 * 40
    assert lines[40].endswith(",inf,1") and lines[1].endswith(",0")
