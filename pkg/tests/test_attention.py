import numpy as np
import numpy.testing as npt
import pytest

from aal.attention import (
    SpatialAttentionParams,
    backtrack,
    coupling_gain,
    descend_attention,
    rank_normalize,
    spatial_attention,
)
from aal.rng import keyed_rng
from aal.tensor import ShapeError, Tensor


def make_params(seed=0, k=7):
    return SpatialAttentionParams.init(keyed_rng(seed, 1), kernel_size=k, dtype=np.float64)


def straight_line_attention(features, weight, bias, k):
    """Independent reimplementation: mean/max -> pad -> correlate -> sigmoid."""
    n, c, h, w = features.shape
    pooled = np.stack([features.mean(axis=1), features.max(axis=1)], axis=1)
    pad = (k - 1) // 2
    padded = np.pad(pooled, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, 1, h, w))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                out[ni, 0, i, j] = (padded[ni, :, i : i + k, j : j + k] * weight[0]).sum() + bias[0]
    return 1.0 / (1.0 + np.exp(-out))


class TestSpatialAttention:
    def test_zero_params_give_half(self):
        params = make_params()
        params.weight.data[:] = 0.0
        params.bias.data[:] = 0.0
        f = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8, 8)), dtype=np.float64)
        m = spatial_attention(f, params)
        npt.assert_array_equal(m.data, np.full((2, 1, 8, 8), 0.5))

    def test_open_interval(self):
        params = make_params(1)
        f = Tensor(np.random.default_rng(1).normal(size=(2, 4, 10, 10)) * 5, dtype=np.float64)
        m = spatial_attention(f, params).data
        assert np.all(m > 0.0) and np.all(m < 1.0)

    def test_matches_straight_line_oracle(self):
        params = make_params(2)
        rng = np.random.default_rng(2)
        f = Tensor(rng.normal(size=(2, 3, 9, 9)), dtype=np.float64)
        m = spatial_attention(f, params)
        expected = straight_line_attention(f.data, params.weight.data, params.bias.data, 7)
        assert np.abs(m.data - expected).max() <= 1e-12

    def test_channel_permutation_invariance(self):
        params = make_params(3)
        rng = np.random.default_rng(3)
        f = rng.normal(size=(1, 5, 8, 8))
        m1 = spatial_attention(Tensor(f, dtype=np.float64), params).data
        m2 = spatial_attention(Tensor(f[:, ::-1], dtype=np.float64), params).data
        npt.assert_allclose(m1, m2, atol=1e-15)

    def test_non_square_rejected(self):
        with pytest.raises(ShapeError, match="square"):
            spatial_attention(Tensor(np.zeros((1, 2, 4, 6))), make_params())


class TestDescend:
    def test_arithmetic(self):
        m = np.full((1, 1, 2, 2), 0.5)
        g = np.full((1, 1, 2, 2), 0.2)
        npt.assert_allclose(descend_attention(m, g, 0.1), np.full((1, 1, 2, 2), 0.48))

    def test_zero_rate_is_identity(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(size=(2, 1, 3, 3))
        npt.assert_array_equal(descend_attention(m, rng.normal(size=m.shape), 0.0), m)

    def test_zero_gradient_is_identity(self):
        m = np.random.default_rng(1).uniform(size=(1, 1, 4, 4))
        npt.assert_array_equal(descend_attention(m, np.zeros_like(m), 0.3), m)

    def test_nonfinite_gradient_rejected(self):
        m = np.full((1, 1, 2, 2), 0.5)
        g = np.full((1, 1, 2, 2), np.nan)
        with pytest.raises(ValueError, match="non-finite"):
            descend_attention(m, g, 0.1)


class TestCouplingGain:
    def test_no_history_gives_zero_gamma(self):
        rng = np.random.default_rng(0)
        shape = (3, 1, 4, 4)
        _, gamma = coupling_gain(rng.normal(size=shape), rng.uniform(0.1, 1, size=shape), rng.normal(size=shape))
        npt.assert_array_equal(gamma, np.zeros((3, 4)))

    def test_one_by_one_arithmetic(self):
        g = np.full((1, 1, 1, 1), 0.2)
        m = np.full((1, 1, 1, 1), 0.5)
        delta = np.full((1, 1, 1, 1), 1.5)
        ghat, gamma = coupling_gain(g, m, delta, prev_delta=delta - 1.0, prev_M=m - 1.0)
        assert abs(ghat[0, 0, 0, 0] - 0.4) < 1e-15
        npt.assert_allclose(gamma, [[0.4]])

    def test_matches_full_matrix_trace_oracle(self):
        # explicit construction: one-nonzero-column Jacobian, outer-product
        # coupling matrix, literal trace; closed form must agree
        rng = np.random.default_rng(7)
        for trial in range(20):
            h = int(rng.integers(4, 9))
            g_vec = rng.normal(size=h)
            m_vec = rng.uniform(0.2, 1.0, size=h)
            d_full = rng.normal(size=(h, h))

            m_map = np.tile(m_vec[:, None], (1, h))[None, None]
            grad_delta = (g_vec[None, :] * m_vec[None, :])  # grad_delta[m,n] = g[n]*m_vec[n]
            grad_delta = np.tile(grad_delta, (h, 1))[None, None]
            delta = rng.normal(size=(1, 1, h, h))
            _, gamma = coupling_gain(
                grad_delta, m_map, delta, prev_delta=delta - d_full[None, None], prev_M=m_map - 1.0
            )

            for m_idx in range(h):
                jac = np.zeros((h, h))
                jac[:, m_idx] = d_full[:, m_idx]
                full_trace = np.trace(np.outer(m_vec, g_vec) @ jac)
                closed_form = m_vec[m_idx] * (g_vec * d_full[:, m_idx]).sum()
                efficient = m_vec[m_idx] * gamma[0, m_idx]
                assert abs(full_trace - closed_form) <= 1e-12
                assert abs(efficient - full_trace) <= 1e-12

    def test_division_clamp_handles_zero(self):
        shape = (1, 1, 2, 2)
        g = np.ones(shape)
        m = np.zeros(shape)  # denominator would vanish without the clamp
        ghat, _ = coupling_gain(g, m, np.ones(shape))
        assert np.all(np.isfinite(ghat))
        assert abs(ghat[0, 0, 0, 0] - 1e6) < 1.0

    def test_history_given_together(self):
        shape = (1, 1, 2, 2)
        with pytest.raises(ValueError, match="together"):
            coupling_gain(np.ones(shape), np.ones(shape), np.ones(shape), prev_delta=np.ones(shape))


class TestRankNormalize:
    def test_three_values(self):
        g = np.array([3.0, 1.0, 2.0]).reshape(1, 1, 1, 3)
        # only square maps are accepted; embed in a 3x3 with a padding row trick
        g = np.array([[3.0, 1.0, 2.0], [3.0, 1.0, 2.0], [3.0, 1.0, 2.0]]).reshape(1, 1, 3, 3)
        r = rank_normalize(g)
        # each distinct |value| appears 3 times; counts strictly below: 1->0, 2->3, 3->6
        npt.assert_allclose(r[0, 0, 0], [6 / 9, 0 / 9, 3 / 9])

    def test_constant_map_all_zero(self):
        r = rank_normalize(np.full((2, 1, 4, 4), 0.7))
        npt.assert_array_equal(r, np.zeros((2, 1, 4, 4)))

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(2, 1, 8, 8))
        r = rank_normalize(g)
        for n in range(2):
            flat = np.abs(g[n, 0]).ravel()
            for idx, val in enumerate(flat):
                expected = np.sum(flat < val) / flat.size
                assert abs(r[n, 0].ravel()[idx] - expected) < 1e-15

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        g = rng.normal(size=(1, 1, 5, 5))
        for c in (2.0, -3.5, 0.01):
            npt.assert_array_equal(rank_normalize(g), rank_normalize(c * g))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        g = rng.normal(size=(1, 1, 4, 4))
        r = rank_normalize(g)
        perm = rng.permutation(16)
        gp = g.reshape(-1)[perm].reshape(1, 1, 4, 4)
        rp = rank_normalize(gp)
        npt.assert_array_equal(rp.reshape(-1), r.reshape(-1)[perm])

    def test_codomain(self):
        rng = np.random.default_rng(9)
        r = rank_normalize(rng.normal(size=(3, 1, 6, 6)))
        assert np.all(r >= 0.0) and np.all(r < 1.0)


class TestBacktrack:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.shape = (2, 1, 4, 4)
        self.m = rng.uniform(0.1, 0.9, size=self.shape)
        self.m_hat = self.m + rng.normal(size=self.shape) * 0.2
        self.gd = rng.normal(size=self.shape)
        self.gamma = rng.normal(size=(2, 4))

    def test_zero_xi2_is_pure_clamp(self):
        out = backtrack(self.m_hat, self.m, self.gamma, self.gd, xi2=0.0, zeta=0.1)
        npt.assert_array_equal(out, np.clip(self.m_hat, 0, 1))

    def test_zeta_one_never_triggers(self):
        out = backtrack(self.m_hat, self.m, self.gamma, self.gd, xi2=0.5, zeta=1.0)
        npt.assert_array_equal(out, np.clip(self.m_hat, 0, 1))

    def test_triggered_element_arithmetic(self):
        m_hat = np.full((1, 1, 2, 2), 0.48)
        m = np.full((1, 1, 2, 2), 0.5)
        gamma = np.full((1, 2), 0.3)
        gd = np.array([[0.1, 0.2], [0.3, 4.0]]).reshape(1, 1, 2, 2)  # rank of 4.0 is 3/4
        out = backtrack(m_hat, m, gamma, gd, xi2=0.1, zeta=0.5)
        assert abs(out[0, 0, 1, 1] - 0.465) < 1e-12  # 0.48 - 0.1*0.3*0.5
        assert out[0, 0, 0, 0] == pytest.approx(0.48)

    def test_output_clamped(self):
        m_hat = np.full((1, 1, 2, 2), 1.4)
        m = np.full((1, 1, 2, 2), 0.5)
        out = backtrack(m_hat, m, np.zeros((1, 2)), np.zeros((1, 1, 2, 2)), xi2=0.1, zeta=0.0)
        assert np.all(out <= 1.0) and np.all(out >= 0.0)

    def test_monotone_in_zeta(self):
        # raising zeta can only shrink the set of projected elements
        prev_changed = None
        for zeta in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = backtrack(self.m_hat, self.m, self.gamma, self.gd, xi2=0.3, zeta=zeta)
            changed = out != np.clip(self.m_hat, 0, 1)
            if prev_changed is not None:
                assert np.all(changed <= prev_changed)
            prev_changed = changed

    def test_bad_zeta_rejected(self):
        with pytest.raises(ValueError, match="zeta"):
            backtrack(self.m_hat, self.m, self.gamma, self.gd, xi2=0.1, zeta=1.5)
