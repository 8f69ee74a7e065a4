"""Hierarchical vector-quantized autoencoder over fixed-length windows.

Two codebook levels: the bottom level encodes the window directly, the
top level encodes a stride-2 averaged view of the bottom latents.
Quantization snaps each latent row to its nearest prototype; gradients
cross the snap through the straight-through estimator.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    constant,
    concat,
    getitem,
    mul,
    no_grad,
    reshape,
    sub,
    tmean,
    tsum,
)
from .layers import MLP, Adam, Module

__all__ = [
    "Codebook",
    "VqVae2",
    "quantize",
    "straight_through",
    "vq_loss",
    "encode",
    "decode",
    "codebook_perplexity",
    "pretrain_vqvae",
]


class Codebook(Module):
    """Prototype vectors with usage statistics for one hierarchy level."""

    def __init__(self, size, dim, rng, level="bottom"):
        if size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.entries = Tensor(rng.uniform(-0.5, 0.5, (size, dim)), requires_grad=True)
        self.usage_counts = np.zeros(size, dtype=np.int64)
        self.level = level

    @property
    def size(self):
        return self.entries.shape[0]

    @property
    def dim(self):
        return self.entries.shape[1]

    def reset_usage(self):
        self.usage_counts[:] = 0

    def lookup(self, indices):
        """Rows of the codebook; differentiable w.r.t. the entries."""
        return getitem(self.entries, np.asarray(indices, dtype=np.intp))


def quantize(z_e, codebook):
    """Snap each latent row to its nearest entry (squared Euclidean).

    Ties break toward the lowest index.  Returns (indices, selected
    entries); selection gradients flow to the codebook entries only.
    """
    if codebook.size == 0:
        raise DimensionError("quantize: empty codebook")
    z = z_e.data if isinstance(z_e, Tensor) else np.asarray(z_e, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError(f"quantize: expected (rows, dim), got {z.shape}")
    if z.shape[1] != codebook.dim:
        raise DimensionError(
            f"quantize: latent dim {z.shape[1]} != codebook dim {codebook.dim}"
        )
    entries = codebook.entries.data
    d2 = (
        np.sum(z * z, axis=1, keepdims=True)
        - 2.0 * z @ entries.T
        + np.sum(entries * entries, axis=1)
    )
    indices = np.argmin(d2, axis=1)
    np.add.at(codebook.usage_counts, indices, 1)
    return indices, codebook.lookup(indices)


def straight_through(z_e, z_q):
    """Forward value z_q; backward passes the gradient to z_e unchanged."""
    if z_e.shape != z_q.shape:
        raise DimensionError(
            f"straight_through: shapes {z_e.shape} and {z_q.shape} differ"
        )
    zq = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q)
    return add(z_e, constant(zq - z_e.data))


def _row_sq_norm_mean(a, b):
    d = sub(a, b)
    return tmean(tsum(mul(d, d), axis=-1))


def vq_loss(x, x_hat, z_e, z_q, alpha):
    """Reconstruction + codebook + commitment terms, mean over the batch.

    The codebook term sees a stopped copy of z_e, the commitment term a
    stopped copy of z_q, so each trains exactly one side of the snap.
    """
    if x.shape != x_hat.shape:
        raise DimensionError(f"vq_loss: x {x.shape} vs x_hat {x_hat.shape}")
    if z_e.shape != z_q.shape:
        raise DimensionError(f"vq_loss: z_e {z_e.shape} vs z_q {z_q.shape}")
    recon = _row_sq_norm_mean(x, x_hat)
    codebook_term = _row_sq_norm_mean(constant(z_e.data), z_q)
    commit_term = mul(constant(alpha), _row_sq_norm_mean(constant(z_q.data), z_e))
    return add(add(recon, codebook_term), commit_term)


def codebook_perplexity(usage_counts):
    """exp(entropy) of the normalized usage distribution; in [1, C]."""
    counts = np.asarray(usage_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("usage counts must be non-negative")
    total = counts.sum()
    if total == 0:
        raise ValueError("perplexity undefined for all-zero usage counts")
    p = counts / total
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


class VqVae2(Module):
    """Two-level quantized autoencoder over flattened windows."""

    def __init__(
        self,
        window_dim,
        latent_dim=8,
        bottom_rows=4,
        top_rows=2,
        hidden=64,
        codebook_size=512,
        alpha=0.25,
        pool_stride=1,
        rng=None,
    ):
        if bottom_rows % 2:
            raise ValueError("bottom_rows must be even (stride-2 top view)")
        if pool_stride > 1 and window_dim % pool_stride:
            raise ValueError("window_dim must be divisible by pool_stride")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.window_dim = window_dim
        self.latent_dim = latent_dim
        self.bottom_rows = bottom_rows
        self.top_rows = top_rows
        self.alpha = alpha
        self.pool_stride = pool_stride
        in_dim = window_dim // pool_stride
        d = latent_dim
        self.encoder_bottom = MLP([in_dim, hidden, hidden, bottom_rows * d], rng)
        self.encoder_top = MLP([(bottom_rows // 2) * d, hidden, hidden, top_rows * d], rng)
        self.decoder = MLP([(top_rows + bottom_rows) * d, hidden, hidden, window_dim], rng)
        self.codebook_top = Codebook(codebook_size, d, rng, level="top")
        self.codebook_bottom = Codebook(codebook_size, d, rng, level="bottom")

    def reset_usage(self):
        self.codebook_top.reset_usage()
        self.codebook_bottom.reset_usage()

    def _front(self, x):
        if self.pool_stride == 1:
            return x
        b = x.shape[0]
        s = self.pool_stride
        pooled = tmean(reshape(x, (b, self.window_dim // s, s)), axis=2)
        return pooled

    def encode_latents(self, x):
        """Pre-quantization latents (z_e_top, z_e_bottom) as row matrices."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.window_dim:
            raise DimensionError(
                f"encode: expected (batch, {self.window_dim}), got {x.shape}"
            )
        b = x.shape[0]
        d = self.latent_dim
        hb = self.encoder_bottom(self._front(x))
        z_e_bottom = reshape(hb, (b * self.bottom_rows, d))
        rows = reshape(hb, (b, self.bottom_rows, d))
        halved = mul(
            add(rows[:, 0::2, :], rows[:, 1::2, :]), constant(0.5)
        )
        ht = self.encoder_top(reshape(halved, (b, (self.bottom_rows // 2) * d)))
        z_e_top = reshape(ht, (b * self.top_rows, d))
        return z_e_top, z_e_bottom


def encode(model, x):
    """Deterministic latents and codebook indices for a window batch."""
    z_e_top, z_e_bottom = model.encode_latents(x)
    with no_grad():
        idx_top, _ = quantize(z_e_top, model.codebook_top)
        idx_bottom, _ = quantize(z_e_bottom, model.codebook_bottom)
    b = z_e_top.shape[0] // model.top_rows
    return (
        z_e_top,
        z_e_bottom,
        idx_top.reshape(b, model.top_rows),
        idx_bottom.reshape(b, model.bottom_rows),
    )


def decode(model, z_q_top, z_q_bottom):
    """Reconstruct a window batch from quantized latent rows."""
    d = model.latent_dim
    if z_q_top.shape[-1] != d or z_q_bottom.shape[-1] != d:
        raise DimensionError("decode: latent dim mismatch")
    bt = z_q_top.size // (model.top_rows * d)
    bb = z_q_bottom.size // (model.bottom_rows * d)
    if bt != bb:
        raise DimensionError("decode: top/bottom batches differ")
    flat = concat(
        [
            reshape(z_q_top, (bt, model.top_rows * d)),
            reshape(z_q_bottom, (bb, model.bottom_rows * d)),
        ],
        axis=1,
    )
    return model.decoder(flat)


def forward_training(model, x):
    """One full pass with straight-through latents, for training loops.

    Returns (x_hat, z_e, z_q) with the two levels' latent rows stacked,
    so a single vq_loss call covers both hierarchy levels.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    z_e_top, z_e_bottom = model.encode_latents(x)
    _, z_q_top = quantize(z_e_top, model.codebook_top)
    _, z_q_bottom = quantize(z_e_bottom, model.codebook_bottom)
    st_top = straight_through(z_e_top, z_q_top)
    st_bottom = straight_through(z_e_bottom, z_q_bottom)
    x_hat = decode(model, st_top, st_bottom)
    z_e = concat([z_e_top, z_e_bottom], axis=0)
    z_q = concat([z_q_top, z_q_bottom], axis=0)
    return x_hat, z_e, z_q


def reconstruct(model, x):
    """decode(encode(x)) through the discrete codes."""
    _, _, idx_top, idx_bottom = encode(model, x)
    with no_grad():
        z_q_top = model.codebook_top.lookup(idx_top.reshape(-1))
        z_q_bottom = model.codebook_bottom.lookup(idx_bottom.reshape(-1))
        out = decode(model, z_q_top, z_q_bottom)
    return out.data


def pretrain_vqvae(model, windows_train, windows_val, *, adv, critic, epochs,
                   batch_size, lr, rng, betas=(0.9, 0.999), adam_eps=1e-8,
                   log_cb=None):
    """Adversarially train a VqVae2; restores the best-validation weights.

    ``adv`` is an AdvConfig; ``critic`` scores flattened windows.  One
    critic step then one generator step per batch.
    """
    from . import adversarial as gan

    gen_params = model.named_parameters()
    critic_params = critic.named_parameters()
    opt_g = Adam(gen_params, beta1=betas[0], beta2=betas[1], eps=adam_eps)
    opt_c = Adam(critic_params, beta1=betas[0], beta2=betas[1], eps=adam_eps)
    n = windows_train.shape[0]
    best_val = np.inf
    best_state = model.state_dict()
    history = []
    for epoch in range(epochs):
        model.reset_usage()
        order = rng.permutation(n)
        epoch_vq = 0.0
        steps = 0
        for start in range(0, n, batch_size):
            xb = Tensor(windows_train[order[start : start + batch_size]])
            # critic step on detached reconstructions
            with no_grad():
                fake, _, _ = forward_training(model, xb)
            c_loss = gan.critic_loss(critic, xb, fake, adv, rng=rng)
            c_grads = [g for g in _grads_of(c_loss, critic_params)]
            opt_c.step(c_grads, lr)
            # generator step
            x_hat, z_e, z_q = forward_training(model, xb)
            l_vq = vq_loss(xb, x_hat, z_e, z_q, model.alpha)
            l_adv = gan.generator_adv_loss(critic, x_hat, adv)
            total = gan.vq_generator_total(l_vq, l_adv, adv)
            g_grads = [g for g in _grads_of(total, gen_params)]
            opt_g.step(g_grads, lr)
            epoch_vq += l_vq.item()
            steps += 1
        with no_grad():
            xv = Tensor(windows_val)
            xh, ze, zq = forward_training(model, xv)
            val = vq_loss(xv, xh, ze, zq, model.alpha).item()
        record = {
            "epoch": epoch,
            "train_vq": epoch_vq / max(1, steps),
            "val_vq": val,
            "perplexity_top": codebook_perplexity(model.codebook_top.usage_counts),
            "perplexity_bottom": codebook_perplexity(
                model.codebook_bottom.usage_counts
            ),
        }
        history.append(record)
        if log_cb:
            log_cb(record)
        if val < best_val:
            best_val = val
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return history


def _grads_of(loss, named_params):
    from .autodiff import gradients

    return gradients(loss, [p for _, p in named_params])


def freeze_vqvae(model):
    """Mark the autoencoder read-only; downstream encoders require this."""
    model.freeze()
    return model


def assert_frozen(model, who):
    if not model.frozen:
        raise ContractError(f"{who}: quantizer must be frozen before use")
