"""Hybrid sequence model: recurrent and self-attention pipelines in series,
with every block's intermediate output added into the final vector.

The attention blocks see sinusoidal position information; the recurrent
blocks carry state forward, so the two pipelines capture global and
local temporal structure respectively.  Either pipeline can be disabled
to study its contribution.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    concat,
    constant,
    dropout,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    swapaxes,
    tanh,
)
from .layers import MLP, LayerNorm, Linear, Module, xavier_uniform

__all__ = [
    "GruLayer",
    "TransformerBlock",
    "GruTransformer",
    "gru_step",
    "select_heads",
    "attention",
    "positional_encoding",
    "gru_transformer_forward",
]


def select_heads(n_i, max_heads=12):
    """Largest head count in 1..max_heads that divides the input dim."""
    if n_i < 1:
        raise ValueError("input dimension must be positive")
    return max(n for n in range(1, max_heads + 1) if n_i % n == 0)


class GruLayer(Module):
    """Standard gated recurrent cell (update/reset gates, tanh candidate)."""

    def __init__(self, in_dim, hidden_dim, rng):
        def w(rows, cols):
            return Tensor(xavier_uniform(rng, rows, cols), requires_grad=True)

        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.w_update = w(in_dim, hidden_dim)
        self.u_update = w(hidden_dim, hidden_dim)
        self.b_update = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.w_reset = w(in_dim, hidden_dim)
        self.u_reset = w(hidden_dim, hidden_dim)
        self.b_reset = Tensor(np.zeros(hidden_dim), requires_grad=True)
        self.w_cand = w(in_dim, hidden_dim)
        self.u_cand = w(hidden_dim, hidden_dim)
        self.b_cand = Tensor(np.zeros(hidden_dim), requires_grad=True)


def gru_step(layer, x_t, h_prev):
    """One recurrence step: h_t = (1 - z) * candidate + z * h_prev."""
    if x_t.shape[-1] != layer.in_dim or h_prev.shape[-1] != layer.hidden_dim:
        raise DimensionError(
            f"gru_step: got x {x_t.shape}, h {h_prev.shape} for dims "
            f"({layer.in_dim}, {layer.hidden_dim})"
        )
    z = sigmoid(add(add(matmul(x_t, layer.w_update), matmul(h_prev, layer.u_update)),
                    layer.b_update))
    r = sigmoid(add(add(matmul(x_t, layer.w_reset), matmul(h_prev, layer.u_reset)),
                    layer.b_reset))
    n = tanh(add(add(matmul(x_t, layer.w_cand), matmul(mul(r, h_prev), layer.u_cand)),
                 layer.b_cand))
    one = constant(1.0)
    return add(mul(add(one, mul(constant(-1.0), z)), n), mul(z, h_prev))


def _run_gru(layer, seq):
    """Apply a GRU layer over (batch, positions, dim); zero initial state."""
    b, p, _ = seq.shape
    h = Tensor(np.zeros((b, layer.hidden_dim)))
    outs = []
    for t in range(p):
        h = gru_step(layer, seq[:, t, :], h)
        outs.append(h)
    return stack(outs, axis=1)


def positional_encoding(length, dim):
    """Sinusoidal position table, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return pe


class TransformerBlock(Module):
    """Multi-head self-attention with position preprocessing, then an MLP."""

    def __init__(self, dim, hidden, rng, max_heads=12):
        self.dim = dim
        self.n_heads = select_heads(dim, max_heads)
        head_dim = dim // self.n_heads
        self.q_proj = [
            Tensor(xavier_uniform(rng, dim, head_dim), requires_grad=True)
            for _ in range(self.n_heads)
        ]
        self.k_proj = [
            Tensor(xavier_uniform(rng, dim, head_dim), requires_grad=True)
            for _ in range(self.n_heads)
        ]
        self.v_proj = [
            Tensor(xavier_uniform(rng, dim, head_dim), requires_grad=True)
            for _ in range(self.n_heads)
        ]
        self.out_proj = Linear(dim, dim, rng)
        self.mlp = MLP([dim, hidden, dim], rng, activation="relu")
        self._head_dim = head_dim


def attention(block, seq):
    """Self-attention over a sequence; accepts (P, dim) or (B, P, dim)."""
    squeeze = False
    if seq.ndim == 2:
        seq = reshape(seq, (1,) + seq.shape)
        squeeze = True
    if seq.ndim != 3 or seq.shape[-1] != block.dim:
        raise DimensionError(
            f"attention: expected (batch, positions, {block.dim}), got {seq.shape}"
        )
    _, p, _ = seq.shape
    x = add(seq, constant(positional_encoding(p, block.dim)))
    scale = constant(1.0 / np.sqrt(block._head_dim))
    heads = []
    for wq, wk, wv in zip(block.q_proj, block.k_proj, block.v_proj):
        q = matmul(x, wq)
        k = matmul(x, wk)
        v = matmul(x, wv)
        scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
        weights = softmax(scores, axis=-1)
        heads.append(matmul(weights, v))
    merged = concat(heads, axis=-1)
    out = block.mlp(block.out_proj(merged))
    return reshape(out, out.shape[1:]) if squeeze else out


def attention_weights(block, seq):
    """Per-head attention weight tensors (diagnostic; no MLP applied)."""
    if seq.ndim == 2:
        seq = reshape(seq, (1,) + seq.shape)
    p = seq.shape[1]
    x = add(seq, constant(positional_encoding(p, block.dim)))
    scale = constant(1.0 / np.sqrt(block._head_dim))
    out = []
    for wq, wk in zip(block.q_proj, block.k_proj):
        q = matmul(x, wq)
        k = matmul(x, wk)
        out.append(softmax(mul(matmul(q, swapaxes(k, -1, -2)), scale), axis=-1))
    return out


class GruTransformer(Module):
    """Attention and recurrent blocks in series, merged by skip sums.

    Layout: attention block, single GRU layer + layer normalization,
    attention block, four stacked GRU layers.  Every block's output is
    added to the model output, so removing a pipeline removes exactly
    its parameters.
    """

    def __init__(
        self,
        in_dim,
        model_dim=None,
        transformer_hidden=64,
        use_gru=True,
        use_transformer=True,
        max_heads=12,
        rng=None,
    ):
        if not (use_gru or use_transformer):
            raise ValueError("at least one pipeline must stay enabled")
        rng = rng if rng is not None else np.random.default_rng(0)
        dim = in_dim if not model_dim else model_dim
        self.in_dim = in_dim
        self.dim = dim
        self.use_gru = use_gru
        self.use_transformer = use_transformer
        self.in_proj = Linear(in_dim, dim, rng) if dim != in_dim else None
        if use_transformer:
            self.block1 = TransformerBlock(dim, transformer_hidden, rng, max_heads)
            self.block2 = TransformerBlock(dim, transformer_hidden, rng, max_heads)
        if use_gru:
            self.gru1 = GruLayer(dim, dim, rng)
            self.norm1 = LayerNorm(dim)
            self.gru2 = [GruLayer(dim, dim, rng) for _ in range(4)]


def gru_transformer_forward(model, seq, dropout_p=0.0, rng=None):
    """Run the hybrid model over (positions, dim) or (batch, positions, dim)."""
    squeeze = False
    if seq.ndim == 2:
        seq = reshape(seq, (1,) + seq.shape)
        squeeze = True
    if seq.shape[-1] != model.in_dim:
        raise DimensionError(
            f"forward: expected feature dim {model.in_dim}, got {seq.shape}"
        )
    x = model.in_proj(seq) if model.in_proj is not None else seq

    def drop(t):
        return dropout(t, dropout_p, rng) if dropout_p > 0 else t

    outputs = []
    h = drop(x)
    if model.use_transformer:
        h = attention(model.block1, h)
        outputs.append(h)
        h = drop(h)
    if model.use_gru:
        h = model.norm1(_run_gru(model.gru1, h))
        outputs.append(h)
        h = drop(h)
    if model.use_transformer:
        h = attention(model.block2, h)
        outputs.append(h)
        h = drop(h)
    if model.use_gru:
        for layer in model.gru2:
            h = _run_gru(layer, h)
        outputs.append(h)
    total = outputs[0]
    for o in outputs[1:]:
        total = add(total, o)
    return reshape(total, total.shape[1:]) if squeeze else total
