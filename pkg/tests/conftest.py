import numpy as np
import pytest

from laprox.attention import build_stack, prefill_stack
from laprox.linalg import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture
def small_model():
    """Two-layer GQA stack (H=4, H_kv=2) prefilled on a 40-token prompt."""
    r = make_rng(7)
    stack = build_stack(2, 4, 2, 8, r, head_spread=0.5)
    x = r.standard_normal((40, stack.model_dim))
    return stack, prefill_stack(stack, x)


def single_head_acts(attn, values, w_o=None):
    """Hand-built one-layer activations for ``attn`` (H, S, T) and ``values`` (H_kv, T, d)."""
    from laprox.attention import AttentionStack, LayerActivations

    attn = np.asarray(attn, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n_heads, n_kv, d = attn.shape[0], values.shape[0], values.shape[2]
    dim = n_heads * d
    w_o = np.eye(dim) if w_o is None else np.asarray(w_o, dtype=np.float64)
    zeros_q = np.zeros((1, dim, dim))
    zeros_kv = np.zeros((1, dim, n_kv * d))
    stack = AttentionStack(1, n_heads, n_kv, d, zeros_q, zeros_kv, zeros_kv, w_o[None])
    s, t = attn.shape[1], attn.shape[2]
    blank = np.zeros((s, dim))
    acts = LayerActivations(0, blank, np.zeros((n_heads, s, d)), np.zeros((n_kv, t, d)), values, attn,
                            blank, blank, blank)
    return stack, acts


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
