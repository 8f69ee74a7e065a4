import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturesynth import autodiff as ad
from gesturesynth.autodiff import DimensionError, Tensor, grad_check, gradients
from gesturesynth.quantize import (
    Codebook,
    VqVae2,
    codebook_perplexity,
    decode,
    encode,
    forward_training,
    quantize,
    reconstruct,
    straight_through,
    vq_loss,
)


def brute_force_nearest(z, entries):
    """Exhaustive nearest-neighbor oracle with lowest-index tie break."""
    out = np.empty(z.shape[0], dtype=np.intp)
    for i, row in enumerate(z):
        d = np.sum((entries - row) ** 2, axis=1)
        out[i] = int(np.argmin(d))
    return out


def make_codebook(entries, rng=None):
    cb = Codebook(len(entries), len(entries[0]), np.random.default_rng(0))
    cb.entries.data[...] = np.asarray(entries, dtype=np.float64)
    return cb


class TestQuantize:
    def test_nearest_entry(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        idx, z_q = quantize(Tensor([[0.1, 0.1]]), cb)
        assert idx.tolist() == [0]
        np.testing.assert_array_equal(z_q.data, [[0.0, 0.0]])

    def test_exact_match_returns_entry(self):
        entries = np.random.default_rng(2).uniform(-1, 1, (8, 3))
        cb = make_codebook(entries)
        idx, z_q = quantize(Tensor(entries[5:6]), cb)
        assert idx.tolist() == [5]
        np.testing.assert_array_equal(z_q.data, entries[5:6])

    def test_tie_breaks_to_lowest_index(self):
        cb = make_codebook([[5.0], [1.0], [9.0], [-1.0]])
        idx, _ = quantize(Tensor([[0.0]]), cb)  # equidistant to entries 1 and 3
        assert idx.tolist() == [1]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(11)
        entries = rng.uniform(-1, 1, (512, 32))
        cb = make_codebook(entries)
        z = rng.uniform(-1, 1, (400, 32))
        idx, _ = quantize(Tensor(z), cb)
        np.testing.assert_array_equal(idx, brute_force_nearest(z, entries))

    def test_usage_counts_incremented(self):
        cb = make_codebook([[0.0], [1.0]])
        quantize(Tensor([[0.1], [0.9], [1.2]]), cb)
        assert cb.usage_counts.tolist() == [1, 2]

    def test_dimension_mismatch(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(DimensionError):
            quantize(Tensor([[1.0, 2.0, 3.0]]), cb)


class TestStraightThrough:
    def test_forward_is_quantized_value(self):
        z_e = Tensor([[1.0, 2.0]], requires_grad=True)
        z_q = Tensor([[0.5, 2.5]])
        st = straight_through(z_e, z_q)
        np.testing.assert_array_equal(st.data, z_q.data)

    def test_identity_gradient_to_encoder_side(self):
        z_e = Tensor([[1.0, 2.0]], requires_grad=True)
        z_q = Tensor([[0.5, 2.5]], requires_grad=True)
        (g,) = gradients(ad.tsum(straight_through(z_e, z_q)), [z_e])
        np.testing.assert_array_equal(g.data, np.ones((1, 2)))
        (gq,) = gradients(ad.tsum(straight_through(z_e, z_q)), [z_q])
        np.testing.assert_array_equal(gq.data, np.zeros((1, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            straight_through(Tensor([[1.0]]), Tensor([[1.0, 2.0]]))


class TestVqLoss:
    def test_zero_when_exact(self):
        x = Tensor([[1.0, -2.0]])
        z = Tensor([[0.3, 0.4]])
        assert vq_loss(x, x, z, z, 0.25).item() == 0.0

    def test_direct_formula_case(self):
        # oracle: ||x-x||^2 + ||[1,0]-[0,0]||^2 + 0.25*||[0,0]-[1,0]||^2
        x = Tensor([[2.0, 3.0]])
        z_e = Tensor([[1.0, 0.0]])
        z_q = Tensor([[0.0, 0.0]])
        assert vq_loss(x, x, z_e, z_q, 0.25).item() == pytest.approx(1.25)

    def test_commitment_gradient_skips_codebook(self):
        z_e = Tensor([[1.0, 0.0]], requires_grad=True)
        z_q = Tensor([[0.0, 0.0]], requires_grad=True)
        x = Tensor([[2.0, 3.0]])
        loss = vq_loss(x, x, z_e, z_q, 0.25)
        g_q, g_e = gradients(loss, [z_q, z_e])
        # codebook gets only the codebook term, encoder only the commitment term
        np.testing.assert_allclose(g_q.data, [[-2.0, 0.0]])
        np.testing.assert_allclose(g_e.data, [[0.5, 0.0]])

    def test_terms_non_negative_and_zero_iff(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, (4, 5)))
        xh = Tensor(rng.uniform(-1, 1, (4, 5)))
        ze = Tensor(rng.uniform(-1, 1, (4, 3)))
        zq = Tensor(rng.uniform(-1, 1, (4, 3)))
        assert vq_loss(x, xh, ze, zq, 0.25).item() > 0.0
        assert vq_loss(x, x, ze, ze, 0.25).item() == 0.0


def tiny_model(seed=0, window_dim=12, codebook_size=8):
    return VqVae2(
        window_dim,
        latent_dim=3,
        bottom_rows=4,
        top_rows=2,
        hidden=16,
        codebook_size=codebook_size,
        alpha=0.25,
        rng=np.random.default_rng(seed),
    )


class TestEncodeDecode:
    def test_encode_deterministic(self):
        m = tiny_model()
        x = np.random.default_rng(1).uniform(-1, 1, (3, 12))
        _, _, i1t, i1b = encode(m, x)
        _, _, i2t, i2b = encode(m, x)
        np.testing.assert_array_equal(i1t, i2t)
        np.testing.assert_array_equal(i1b, i2b)

    def test_indices_in_bounds(self):
        m = tiny_model()
        x = np.random.default_rng(2).uniform(-1, 1, (5, 12))
        _, _, it, ib = encode(m, x)
        assert it.min() >= 0 and it.max() < 8
        assert ib.min() >= 0 and ib.max() < 8
        assert it.shape == (5, 2) and ib.shape == (5, 4)

    def test_wrong_window_shape(self):
        m = tiny_model()
        with pytest.raises(DimensionError):
            encode(m, np.zeros((2, 13)))

    def test_decode_zero_latents_finite_and_deterministic(self):
        m = tiny_model()
        zt = Tensor(np.zeros((2 * 2, 3)))
        zb = Tensor(np.zeros((2 * 4, 3)))
        out1 = decode(m, zt, zb)
        out2 = decode(m, zt, zb)
        assert np.all(np.isfinite(out1.data))
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_decode_gradient_check(self):
        m = tiny_model()
        rng = np.random.default_rng(5)
        zt = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
        zb = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        w = Tensor(np.cos(np.arange(12.0)).reshape(1, 12))

        def f():
            return ad.tsum(ad.mul(decode(m, zt, zb), w))

        err = grad_check(f, {"z_top": zt, "z_bottom": zb})
        assert err <= 1e-4

    def test_full_chain_gradient_check(self):
        # encoder -> quantize -> straight-through -> decode.  The snap is
        # treated as a constant offset (frozen at the base point) so the
        # chain is a differentiable function and finite differences apply.
        m = tiny_model()
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(-1, 1, (2, 12)))
        ze_t0, ze_b0, idx_top, idx_bottom = encode(m, x)
        off_t = m.codebook_top.entries.data[idx_top.reshape(-1)] - ze_t0.data
        off_b = m.codebook_bottom.entries.data[idx_bottom.reshape(-1)] - ze_b0.data
        zq_t0 = ze_t0.data + off_t
        zq_b0 = ze_b0.data + off_b
        params = dict(m.named_parameters()[:4])

        def f():
            z_e_top, z_e_bottom = m.encode_latents(x)
            st_t = ad.add(z_e_top, ad.constant(off_t))
            st_b = ad.add(z_e_bottom, ad.constant(off_b))
            x_hat = decode(m, st_t, st_b)
            z_e = ad.concat([z_e_top, z_e_bottom], axis=0)
            recon = ad.tmean(ad.tsum(ad.mul(ad.sub(x, x_hat), ad.sub(x, x_hat)), axis=1))
            zq0 = ad.constant(np.concatenate([zq_t0, zq_b0]))
            commit = ad.mul(
                ad.constant(m.alpha),
                ad.tmean(ad.tsum(ad.mul(ad.sub(zq0, z_e), ad.sub(zq0, z_e)), axis=1)),
            )
            return ad.add(recon, commit)

        err = grad_check(f, params)
        assert err <= 1e-4

    def test_codebook_entry_gradient_check(self):
        # the codebook term is an ordinary differentiable function of the
        # selected entries once the index choice is frozen
        m = tiny_model()
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-1, 1, (2, 12)))
        ze_t0, ze_b0, idx_top, idx_bottom = encode(m, x)

        def f():
            z_q = m.codebook_bottom.lookup(idx_bottom.reshape(-1))
            d = ad.sub(ad.constant(ze_b0.data), z_q)
            return ad.tmean(ad.tsum(ad.mul(d, d), axis=1))

        err = grad_check(f, {"entries": m.codebook_bottom.entries})
        assert err <= 1e-4


class TestPerplexity:
    def test_uniform_usage_is_size(self):
        assert codebook_perplexity(np.ones(512)) == pytest.approx(512.0)

    def test_single_entry_collapse(self):
        counts = np.zeros(16)
        counts[3] = 100
        assert codebook_perplexity(counts) == pytest.approx(1.0)

    def test_entropy_formula_oracle(self):
        # oracle: p = [.5,.5,0,0]; H = ln 2; exp(H) = 2
        assert codebook_perplexity([2, 2, 0, 0]) == pytest.approx(2.0)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            codebook_perplexity([0, 0])

    @given(st.lists(st.integers(0, 50), min_size=2, max_size=32).filter(
        lambda c: sum(1 for v in c if v > 0) >= 2))
    @settings(max_examples=30, deadline=None)
    def test_bounds_when_multiple_entries_used(self, counts):
        p = codebook_perplexity(counts)
        assert 1.0 < p <= len(counts) + 1e-9


def test_overfit_single_window_round_trip():
    # slow-ish: plain reconstruction training on one window, no critic
    from gesturesynth.layers import Adam

    m = tiny_model(seed=9, codebook_size=8)
    rng = np.random.default_rng(10)
    x = rng.uniform(-0.4, 0.4, (1, 12))
    xt = Tensor(x)
    params = m.named_parameters()
    opt = Adam(params)
    for _ in range(600):
        x_hat, z_e, z_q = forward_training(m, xt)
        loss = vq_loss(xt, x_hat, z_e, z_q, m.alpha)
        grads = gradients(loss, [p for _, p in params])
        opt.step(grads, 1e-2)
    out = reconstruct(m, x)
    assert np.max(np.abs(out - x)) < 0.05
