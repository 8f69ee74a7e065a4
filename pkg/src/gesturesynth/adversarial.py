"""Wasserstein critic with a divergence penalty on interpolated samples.

The critic is an unbounded scalar scorer.  Its objective, as configured
here, is minimized as written: mean score of real minus mean score of
fake plus delta times the mean p-th power of the input-gradient norm at
random interpolates.  ``flip_sign`` negates the Wasserstein terms of
both the critic and generator objectives for the conventional
orientation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    DomainError,
    Tensor,
    add,
    constant,
    gradients,
    mul,
    neg,
    reshape,
    sqrt,
    sub,
    tmean,
    tpow,
    tsum,
)
from .layers import MLP, Module

__all__ = [
    "AdvConfig",
    "Critic",
    "critic_loss",
    "generator_adv_loss",
    "vq_generator_total",
    "penalty_gradient_norm",
    "interpolate_samples",
]


@dataclass
class AdvConfig:
    delta: float = 2.0
    p: float = 6.0
    beta: float = 1.0
    gamma: float = 1.0
    flip_sign: bool = False

    def __post_init__(self):
        if self.delta < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("adversarial weights must be non-negative")
        if self.p < 1:
            raise ValueError("penalty exponent must be >= 1")


class Critic(Module):
    """MLP mapping a flattened sample to one unbounded real score."""

    def __init__(self, in_dim, hidden=(128, 128), leak=0.2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = MLP(
            [in_dim, *hidden, 1], rng, activation="leaky_relu" if hidden else None
        )
        self._leak = leak
        self.in_dim = in_dim

    def score(self, x):
        """Per-sample scores, shape (batch,)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"critic: expected (batch, {self.in_dim}), got {x.shape}"
            )
        from .autodiff import leaky_relu

        h = x
        layers = self.net.layers
        for layer in layers[:-1]:
            h = leaky_relu(layer(h), slope=self._leak)
        out = layers[-1](h)
        return reshape(out, (x.shape[0],))


def interpolate_samples(x_real, x_fake, u):
    """Per-sample convex mix u*x_real + (1-u)*x_fake as a fresh leaf."""
    xr = x_real.data if isinstance(x_real, Tensor) else np.asarray(x_real)
    xf = x_fake.data if isinstance(x_fake, Tensor) else np.asarray(x_fake)
    if xr.shape != xf.shape:
        raise DimensionError(f"interpolate: shapes {xr.shape} vs {xf.shape}")
    u = np.asarray(u, dtype=np.float64).reshape(-1, 1)
    return Tensor(u * xr + (1.0 - u) * xf, requires_grad=True)


def penalty_gradient_norm(critic, x_hat):
    """Per-sample L2 norms of the critic's input gradient.

    Differentiable w.r.t. critic parameters through a nested backward
    pass over the score graph.
    """
    if not isinstance(x_hat, Tensor):
        x_hat = Tensor(x_hat, requires_grad=True)
    if not x_hat.requires_grad or x_hat.node is not None:
        x_hat = Tensor(x_hat.data.copy(), requires_grad=True)
    scores = critic.score(x_hat)
    (gx,) = gradients(tsum(scores), [x_hat], create_graph=True)
    if not np.all(np.isfinite(gx.data)):
        raise DomainError("penalty: non-finite critic input gradient")
    return sqrt(tsum(mul(gx, gx), axis=1))


def _penalty_term(critic, x_hat, cfg):
    if not isinstance(x_hat, Tensor):
        x_hat = Tensor(x_hat, requires_grad=True)
    scores = critic.score(x_hat)
    (gx,) = gradients(tsum(scores), [x_hat], create_graph=True)
    if not np.all(np.isfinite(gx.data)):
        raise DomainError("penalty: non-finite critic input gradient")
    sq = tsum(mul(gx, gx), axis=1)
    return tmean(tpow(sq, cfg.p / 2.0))


def critic_loss(critic, x_real, x_fake, cfg, rng=None, u=None):
    """Critic objective with interpolated-sample divergence penalty."""
    xr = x_real if isinstance(x_real, Tensor) else Tensor(x_real)
    xf = x_fake if isinstance(x_fake, Tensor) else Tensor(x_fake)
    if xr.shape != xf.shape:
        raise DimensionError(f"critic_loss: shapes {xr.shape} vs {xf.shape}")
    if xr.shape[0] < 1:
        raise DimensionError("critic_loss: empty batch")
    if u is None:
        if rng is None:
            raise ValueError("critic_loss: provide rng or explicit u")
        u = rng.uniform(0.0, 1.0, size=xr.shape[0])
    x_hat = interpolate_samples(xr, xf, u)
    wass = sub(tmean(critic.score(xr)), tmean(critic.score(xf)))
    if cfg.flip_sign:
        wass = neg(wass)
    loss = add(wass, mul(constant(cfg.delta), _penalty_term(critic, x_hat, cfg)))
    if not np.isfinite(loss.data):
        raise DomainError("critic_loss: non-finite value")
    return loss


def generator_adv_loss(critic, x_fake, cfg=None):
    """Mean critic score of generated samples (the generator minimizes it)."""
    scores = critic.score(x_fake)
    if not np.all(np.isfinite(scores.data)):
        raise DomainError("generator_adv_loss: non-finite critic score")
    loss = tmean(scores)
    if cfg is not None and cfg.flip_sign:
        loss = neg(loss)
    return loss


def vq_generator_total(vq_loss_value, adv_loss_value, cfg):
    """beta * reconstruction-objective + gamma * adversarial objective."""
    return add(
        mul(constant(cfg.beta), vq_loss_value),
        mul(constant(cfg.gamma), adv_loss_value),
    )
