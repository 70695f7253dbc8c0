"""Synthetic multi-head attention stacks: prefill, decode and the exact decompositions.

Layers have no feed-forward block and no positional encoding; causal masking is the
only positional signal. Layer ``l + 1`` consumes layer ``l``'s residual output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .linalg import Matrix, ParameterError, ShapeError, matmul, softmax_rows

RMS_EPS = 1e-6


@dataclass(frozen=True)
class AttentionStack:
    """Per-layer projection weights.

    ``w_q`` is (L, D, H*d_h), ``w_k``/``w_v`` are (L, D, H_kv*d_h) and ``w_o`` is
    (L, D, D) with rows ``[h*d_h, (h+1)*d_h)`` forming head ``h``'s output block.
    """

    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_head(self, head: int) -> int:
        return head // self.group_size

    def group(self, kv_head: int) -> range:
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)

    def o_block(self, layer: int, head: int) -> Matrix:
        d = self.head_dim
        return self.w_o[layer, head * d:(head + 1) * d, :]

    def head_slice(self, w: np.ndarray, layer: int, head: int) -> Matrix:
        d = self.head_dim
        return w[layer, :, head * d:(head + 1) * d]

    def with_weights(self, **weights) -> "AttentionStack":
        fields = dict(
            n_layers=self.n_layers, n_heads=self.n_heads, n_kv_heads=self.n_kv_heads,
            head_dim=self.head_dim, w_q=self.w_q, w_k=self.w_k, w_v=self.w_v, w_o=self.w_o,
        )
        fields.update({k: _frozen(v) for k, v in weights.items()})
        return AttentionStack(**fields)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def build_stack(n_layers: int, n_heads: int, n_kv_heads: int, head_dim: int,
                rng: np.random.Generator, head_spread: float = 0.0) -> AttentionStack:
    """Draw every weight i.i.d. from N(0, 1/D).

    ``head_spread > 0`` then multiplies each query head's W_Q block and each KV
    head's W_V block by independent log-normal gains exp(head_spread * z), so heads
    differ in attention sharpness and value magnitude the way trained heads do.
    ``head_spread = 0`` leaves the plain i.i.d. weights untouched.
    """
    if min(n_layers, n_heads, n_kv_heads, head_dim) < 1:
        raise ParameterError("stack dimensions must be positive")
    if n_heads % n_kv_heads:
        raise ParameterError(f"kv heads ({n_kv_heads}) must divide heads ({n_heads})")
    d_model = n_heads * head_dim
    std = 1.0 / math.sqrt(d_model)
    w_q = rng.normal(0.0, std, (n_layers, d_model, n_heads * head_dim))
    w_k = rng.normal(0.0, std, (n_layers, d_model, n_kv_heads * head_dim))
    w_v = rng.normal(0.0, std, (n_layers, d_model, n_kv_heads * head_dim))
    w_o = rng.normal(0.0, std, (n_layers, d_model, d_model))
    if head_spread < 0:
        raise ParameterError(f"head_spread must be >= 0, got {head_spread}")
    q_gain = np.exp(head_spread * rng.standard_normal((n_layers, n_heads)))
    v_gain = np.exp(head_spread * rng.standard_normal((n_layers, n_kv_heads)))
    w_q *= np.repeat(q_gain, head_dim, axis=1)[:, None, :]
    w_v *= np.repeat(v_gain, head_dim, axis=1)[:, None, :]
    return AttentionStack(n_layers, n_heads, n_kv_heads, head_dim,
                          _frozen(w_q), _frozen(w_k), _frozen(w_v), _frozen(w_o))


def rms_norm(x: Matrix) -> Matrix:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


@dataclass(frozen=True)
class LayerActivations:
    layer: int
    x: Matrix            # (S, D) layer input
    queries: np.ndarray  # (H, S, d_h)
    keys: np.ndarray     # (H_kv, T, d_h)
    values: np.ndarray   # (H_kv, T, d_h)
    attn: np.ndarray     # (H, S, T)
    av: Matrix           # (S, D) concatenated head outputs
    out: Matrix          # (S, D) attention output after W_O
    resid: Matrix        # (S, D) Norm(out + x)

    @property
    def n_tokens(self) -> int:
        return self.attn.shape[-1]


def _causal_logits(q: Matrix, k: Matrix, offset: int = 0) -> Matrix:
    logits = matmul(q, k.T) / math.sqrt(q.shape[1])
    s, t = logits.shape
    mask = np.arange(t)[None, :] > (np.arange(s)[:, None] + offset)
    logits[mask] = -np.inf
    return logits


def prefill_layer(stack: AttentionStack, layer: int, x: Matrix) -> LayerActivations:
    if x.ndim != 2 or x.shape[1] != stack.model_dim:
        raise ShapeError(f"layer input {x.shape} does not match model dim {stack.model_dim}")
    n_heads, d = stack.n_heads, stack.head_dim
    keys = np.stack([matmul(x, stack.head_slice(stack.w_k, layer, g))
                     for g in range(stack.n_kv_heads)])
    values = np.stack([matmul(x, stack.head_slice(stack.w_v, layer, g))
                       for g in range(stack.n_kv_heads)])
    queries = np.stack([matmul(x, stack.head_slice(stack.w_q, layer, h)) for h in range(n_heads)])
    attn = np.empty((n_heads, x.shape[0], x.shape[0]))
    av = np.empty_like(x)
    for h in range(n_heads):
        g = stack.kv_head(h)
        attn[h] = softmax_rows(_causal_logits(queries[h], keys[g]))
        av[:, h * d:(h + 1) * d] = matmul(attn[h], values[g])
    out = matmul(av, stack.w_o[layer])
    return LayerActivations(layer, x, queries, keys, values, attn, av, out, rms_norm(out + x))


def prefill_stack(stack: AttentionStack, x: Matrix) -> list[LayerActivations]:
    acts = []
    for layer in range(stack.n_layers):
        a = prefill_layer(stack, layer, x)
        acts.append(a)
        x = a.resid
    return acts


class DecodeOutput(NamedTuple):
    out: Matrix    # (1, D) attention output
    resid: Matrix  # (1, D) Norm(out + x), the next layer's input


def decode_step(stack: AttentionStack, layer: int, x: Matrix, cache) -> DecodeOutput:
    """Attend one new token over the retained cache entries plus its own K/V.

    ``cache`` is anything with ``head_kv(layer, head) -> (keys, values)``, i.e. a
    ``KvCache`` or a compressed ``CacheView``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != stack.model_dim:
        raise ShapeError(f"decode input {x.shape} does not match model dim {stack.model_dim}")
    d = stack.head_dim
    av = np.empty_like(x)
    for h in range(stack.n_heads):
        g = stack.kv_head(h)
        k_cached, v_cached = cache.head_kv(layer, h)
        if len(k_cached) == 0:
            raise ShapeError(f"head {h} of layer {layer} has no retained cache entries")
        q = matmul(x, stack.head_slice(stack.w_q, layer, h))
        k = np.vstack([k_cached, matmul(x, stack.head_slice(stack.w_k, layer, g))])
        v = np.vstack([v_cached, matmul(x, stack.head_slice(stack.w_v, layer, g))])
        a = softmax_rows(matmul(q, k.T) / math.sqrt(d))
        av[:, h * d:(h + 1) * d] = matmul(a, v)
    out = matmul(av, stack.w_o[layer])
    return DecodeOutput(out, rms_norm(out + x))


def head_outputs(acts: LayerActivations, stack: AttentionStack) -> list[Matrix]:
    """Per-head A^h V^h, recomputed from the attention maps (not sliced from ``av``)."""
    return [matmul(acts.attn[h], acts.values[stack.kv_head(h)]) for h in range(stack.n_heads)]


def head_decomposition_residual(acts: LayerActivations, stack: AttentionStack, layer: int) -> float:
    """Relative Frobenius gap between Concat(H^1..H^H) W_O and sum_h H^h W_O^h."""
    heads = head_outputs(acts, stack)
    whole = matmul(np.hstack(heads), stack.w_o[layer])
    summed = sum(matmul(hh, stack.o_block(layer, h)) for h, hh in enumerate(heads))
    gap = np.linalg.norm(whole - summed)
    scale = np.linalg.norm(whole)
    return float(gap / scale) if scale > 0 else float(gap)


def token_contribution(acts: LayerActivations, stack: AttentionStack, layer: int,
                       query_pos: int, token_pos: int) -> Matrix:
    """Contribution of cached token ``token_pos`` to the output row at ``query_pos``."""
    if not 0 <= token_pos <= query_pos < acts.attn.shape[1]:
        raise IndexError(f"token {token_pos} is not visible from query {query_pos}")
    row = np.zeros((1, stack.model_dim))
    for h in range(stack.n_heads):
        v = acts.values[stack.kv_head(h), token_pos][None, :]
        row += acts.attn[h, query_pos, token_pos] * matmul(v, stack.o_block(layer, h))
    return row
