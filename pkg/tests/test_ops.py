import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from docparsenet.errors import ContractError, ShapeError
from docparsenet.ops import (
    AttentionParams,
    ConvParams,
    LinearParams,
    channel_linear,
    conv2d,
    cyclic_shift,
    dropout,
    dwconv,
    layernorm,
    linear,
    maxpool2,
    mish,
    multi_head_attention,
    shift_offsets,
    softmax,
    upsample2,
)
from docparsenet.tensor import Tensor, backward, finite_diff_check, sum_all

from conftest import rand, weighted_sum


def naive_conv(x, w, b, stride, pad, groups):
    """Direct seven-loop cross-correlation used as an independent oracle."""
    bsz, c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, c_out, ho, wo))
    per_group = c_out // groups
    for n in range(bsz):
        for o in range(c_out):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, g * cg : (g + 1) * cg, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def conv_params(c_in, c_out, k, seed=0, stride=1, padding=None, groups=1):
    rng = np.random.default_rng(seed)
    p = ConvParams.init(c_in, c_out, k, rng, stride=stride, padding=padding, groups=groups, dtype=np.float64)
    p.bias.data = rng.uniform(-0.5, 0.5, size=c_out)
    return p


CONV_CASES = [
    # c_in, c_out, k, stride, padding, groups, hw
    (3, 4, 3, 1, 1, 1, 6),  # small-channel im2col path
    (8, 5, 3, 1, 1, 1, 7),  # shifted-GEMM path
    (9, 4, 3, 1, 0, 1, 6),  # shifted-GEMM without padding
    (4, 6, 1, 1, 0, 1, 5),  # pointwise
    (3, 2, 3, 2, 1, 1, 7),  # strided
    (6, 6, 3, 1, 1, 6, 5),  # depthwise
    (4, 6, 3, 1, 1, 2, 5),  # grouped
    (4, 4, 3, 2, 1, 4, 6),  # strided depthwise
]


class TestConv2d:
    @pytest.mark.parametrize("c_in,c_out,k,stride,pad,groups,hw", CONV_CASES)
    def test_matches_naive_oracle(self, c_in, c_out, k, stride, pad, groups, hw):
        p = conv_params(c_in, c_out, k, stride=stride, padding=pad, groups=groups)
        x = rand((2, c_in, hw, hw), seed=1)
        got = conv2d(x, p).data
        want = naive_conv(x.data, p.weight.data, p.bias.data, stride, pad, groups)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("c_in,c_out,k,stride,pad,groups,hw", CONV_CASES)
    def test_gradients(self, c_in, c_out, k, stride, pad, groups, hw):
        p = conv_params(c_in, c_out, k, seed=2, stride=stride, padding=pad, groups=groups)
        x = rand((2, c_in, hw, hw), seed=3)

        def f(_):
            return weighted_sum(conv2d(x, p))

        for t in (x, p.weight, p.bias):
            assert finite_diff_check(f, t) < 1e-4

    def test_single_pixel_impulse(self):
        p = conv_params(1, 1, 3)
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        out = conv2d(Tensor(x), p).data[0, 0] - p.bias.data[0]
        # cross-correlation flips the kernel around the impulse
        np.testing.assert_allclose(out[1:4, 1:4], p.weight.data[0, 0, ::-1, ::-1])

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(rand((1, 3, 4, 4)), conv_params(4, 2, 3))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(rand((1, 2, 2, 2)), conv_params(2, 2, 5, padding=0))

    def test_param_validation(self):
        with pytest.raises(ShapeError):
            ConvParams(Tensor(np.zeros((2, 1, 3, 2))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            ConvParams(Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))

    def test_init_bounds(self):
        p = ConvParams.init(16, 32, 3, np.random.default_rng(0))
        bound = 1 / math.sqrt(16 * 9)
        assert np.abs(p.weight.data).max() <= bound
        assert not p.bias.data.any()
        assert p.padding == 1


class TestDwconv:
    def test_requires_depthwise(self):
        with pytest.raises(ContractError):
            dwconv(rand((1, 4, 5, 5)), conv_params(4, 4, 3))

    def test_requires_k3_pad1(self):
        with pytest.raises(ContractError):
            dwconv(rand((1, 4, 5, 5)), conv_params(4, 4, 5, groups=4))

    def test_identity_kernel(self):
        p = conv_params(3, 3, 3, groups=3)
        p.weight.data[:] = 0
        p.weight.data[:, 0, 1, 1] = 1
        p.bias.data[:] = 0
        x = rand((2, 3, 6, 6), seed=4)
        np.testing.assert_array_equal(dwconv(x, p).data, x.data)

    def test_no_cross_channel_mixing(self):
        p = conv_params(4, 4, 3, groups=4)
        x = np.zeros((1, 4, 5, 5))
        x[0, 2] = np.random.default_rng(0).uniform(size=(5, 5))
        out = dwconv(Tensor(x), p).data - p.bias.data[None, :, None, None]
        assert np.abs(out[0, [0, 1, 3]]).max() == 0


class TestLinear:
    def test_channel_linear_matches_einsum(self):
        rng = np.random.default_rng(0)
        p = LinearParams.init(4, 6, rng, dtype=np.float64)
        p.bias.data = rng.uniform(size=6)
        x = rand((2, 4, 3, 5), seed=1)
        want = np.einsum("oc,bchw->bohw", p.weight.data, x.data) + p.bias.data[None, :, None, None]
        np.testing.assert_allclose(channel_linear(x, p).data, want, rtol=1e-12)

    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(0)
        p = LinearParams.init(5, 3, rng, dtype=np.float64)
        x = rand((2, 4, 5), seed=2)
        np.testing.assert_allclose(linear(x, p).data, x.data @ p.weight.data.T + p.bias.data)

    @pytest.mark.parametrize("fn,shape", [(channel_linear, (2, 4, 3, 3)), (linear, (2, 3, 4))])
    def test_gradients(self, fn, shape):
        rng = np.random.default_rng(5)
        p = LinearParams.init(4, 3, rng, dtype=np.float64)
        p.bias.data = rng.uniform(size=3)
        x = rand(shape, seed=6)
        for t in (x, p.weight, p.bias):
            assert finite_diff_check(lambda _: weighted_sum(fn(x, p)), t) < 1e-4

    def test_feature_mismatch(self):
        p = LinearParams.init(4, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            channel_linear(rand((1, 5, 2, 2)), p)
        with pytest.raises(ShapeError):
            linear(rand((2, 5)), p)


def mish_oracle(x):
    return x * np.tanh(np.log1p(np.exp(x)))


class TestMish:
    def test_matches_closed_form(self):
        x = np.linspace(-15, 15, 301)
        np.testing.assert_allclose(mish(Tensor(x)).data, mish_oracle(x), rtol=1e-12, atol=1e-15)

    def test_known_values(self):
        assert mish(Tensor(np.array([0.0]))).data[0] == 0.0
        assert mish(Tensor(np.array([1.0]))).data[0] == pytest.approx(0.8650983882673103, abs=1e-12)

    def test_large_inputs_stay_finite(self):
        x = np.array([-1e4, -100.0, 100.0, 1e4])
        y = mish(Tensor(x, requires_grad=True))
        assert np.isfinite(y.data).all()
        np.testing.assert_allclose(y.data[2:], x[2:])
        backward(sum_all(y))
        assert np.isfinite(y.data).all()

    def test_gradient(self):
        assert finite_diff_check(lambda t: weighted_sum(mish(t)), rand((4, 5), scale=6.0)) < 1e-4

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
    def test_lower_bound(self, x):
        # mish has a global minimum of about -0.3088
        assert mish(Tensor(x)).data.min() >= -0.30885


class TestLayerNorm:
    def test_normalises_trailing_axis(self):
        x = rand((3, 4, 8), seed=1, scale=5.0)
        y = layernorm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-3)

    def test_gamma_beta(self):
        x = rand((2, 6), seed=2)
        gamma, beta = np.linspace(0.5, 2, 6), np.linspace(-1, 1, 6)
        y = layernorm(x, Tensor(gamma), Tensor(beta), eps=1e-5).data
        mu = x.data.mean(-1, keepdims=True)
        var = x.data.var(-1, keepdims=True)
        np.testing.assert_allclose(y, (x.data - mu) / np.sqrt(var + 1e-5) * gamma + beta, rtol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = rand((3, 5), seed=4)
        g, b = Tensor(rng.uniform(0.5, 1.5, 5)), Tensor(rng.uniform(-1, 1, 5))
        for t in (x, g, b):
            assert finite_diff_check(lambda _: weighted_sum(layernorm(x, g, b)), t) < 1e-4

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            layernorm(rand((2, 3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layernorm(rand((2, 3)), Tensor(np.ones(4)), Tensor(np.zeros(4)))


class TestSoftmax:
    def test_rows_sum_to_one(self):
        y = softmax(rand((3, 7), scale=50.0), axis=-1).data
        np.testing.assert_allclose(y.sum(-1), 1.0)

    def test_shift_invariance(self):
        x = rand((2, 5), seed=1)
        np.testing.assert_allclose(softmax(x).data, softmax(Tensor(x.data + 1000.0)).data, rtol=1e-12)

    def test_gradient(self):
        assert finite_diff_check(lambda t: weighted_sum(softmax(t, axis=0)), rand((4, 3), seed=2)) < 1e-4


class TestDropout:
    def test_eval_is_identity(self):
        x = rand((4, 4))
        assert dropout(x, 0.5, "eval", seed=0) is x

    def test_rate_zero_is_identity(self):
        x = rand((4, 4))
        assert dropout(x, 0.0, "train", seed=0) is x

    def test_seeded_mask_and_scaling(self):
        x = Tensor(np.ones((100, 100)))
        a = dropout(x, 0.25, "train", seed=3).data
        b = dropout(x, 0.25, "train", seed=3).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) == {0.0, 1 / 0.75}
        assert abs((a == 0).mean() - 0.25) < 0.02

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(ContractError):
            dropout(rand((2,)), rate, "train", seed=0)

    def test_bad_mode(self):
        with pytest.raises(ContractError):
            dropout(rand((2,)), 0.1, "infer", seed=0)

    def test_gradient(self):
        x = rand((5, 6), seed=1)
        assert finite_diff_check(lambda t: weighted_sum(dropout(t, 0.3, "train", seed=9)), x) < 1e-4


def shift_oracle(x, axis, offsets):
    out = np.empty_like(x)
    n = x.shape[axis]
    for c, s in enumerate(offsets):
        for i in range(n):
            src = [slice(None), c, slice(None), slice(None)]
            dst = [slice(None), c, slice(None), slice(None)]
            src[axis], dst[axis] = i, (i + s) % n
            out[tuple(dst)] = x[tuple(src)]
    return out


class TestCyclicShift:
    @pytest.mark.parametrize("axis,ax", [("height", 2), ("width", 3)])
    def test_matches_index_oracle(self, axis, ax):
        x = rand((2, 5, 4, 6), seed=1)
        offs = [-2, -1, 0, 1, 2]
        np.testing.assert_array_equal(cyclic_shift(x, axis, offs).data, shift_oracle(x.data, ax, offs))

    def test_offsets_grouping(self):
        assert shift_offsets(5) == [-2, -1, 0, 1, 2]
        assert shift_offsets(10) == [-2, -2, -1, -1, 0, 0, 1, 1, 2, 2]
        offs = shift_offsets(7)
        assert offs == sorted(offs) and min(offs) == -2 and max(offs) == 2

    def test_gradient(self):
        offs = [3, -1, 0, 2]
        x = rand((1, 4, 5, 5), seed=2)
        assert finite_diff_check(lambda t: weighted_sum(cyclic_shift(t, "width", offs)), x) < 1e-4

    def test_errors(self):
        x = rand((1, 2, 3, 3))
        with pytest.raises(ContractError):
            cyclic_shift(x, "depth", [0, 0])
        with pytest.raises(ContractError):
            cyclic_shift(x, "height", [0])
        with pytest.raises(ShapeError):
            cyclic_shift(rand((2, 3, 3)), "height", [0, 0])

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(1, 7),
        st.sampled_from(["height", "width"]),
        st.data(),
    )
    def test_inverse_and_multiset(self, c, n, axis, data):
        offs = data.draw(st.lists(st.integers(-10, 10), min_size=c, max_size=c))
        x = rand((1, c, n, n + 1), seed=c * 31 + n)
        y = cyclic_shift(x, axis, offs)
        back = cyclic_shift(y, axis, [-s for s in offs])
        np.testing.assert_array_equal(back.data, x.data)
        for ch in range(c):
            np.testing.assert_array_equal(np.sort(y.data[0, ch], axis=None), np.sort(x.data[0, ch], axis=None))


class TestPoolUpsample:
    def test_maxpool_values(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(maxpool2(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_maxpool_ties_go_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        backward(sum_all(maxpool2(x)))
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_maxpool_odd_rejected(self):
        with pytest.raises(ShapeError):
            maxpool2(rand((1, 1, 3, 4)))

    def test_upsample_nearest(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y = upsample2(Tensor(x)).data[0, 0]
        np.testing.assert_array_equal(y, np.kron(x[0, 0], np.ones((2, 2))))

    @pytest.mark.parametrize("fn", [maxpool2, upsample2])
    def test_gradients(self, fn):
        x = rand((2, 3, 4, 4), seed=8)
        assert finite_diff_check(lambda t: weighted_sum(fn(t)), x) < 1e-4


def attention_oracle(q_tok, kv_tok, heads, p):
    def lin(x, lp):
        return x @ lp.weight.data.T + lp.bias.data

    q, k, v = lin(q_tok, p.query), lin(kv_tok, p.key), lin(kv_tok, p.value)
    b, n, d = q.shape
    dh = d // heads
    out = np.zeros_like(q)
    for bi in range(b):
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = q[bi, :, sl] @ k[bi, :, sl].T / math.sqrt(dh)
            wts = np.exp(s - s.max(-1, keepdims=True))
            wts /= wts.sum(-1, keepdims=True)
            out[bi, :, sl] = wts @ v[bi, :, sl]
    return lin(out, p.out)


class TestAttention:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.p = AttentionParams.init(8, 6, rng, dtype=np.float64)
        for lp in (self.p.query, self.p.key, self.p.value, self.p.out):
            lp.bias.data = rng.uniform(-0.2, 0.2, lp.bias.shape)

    @pytest.mark.parametrize("heads,l_kv", [(1, 1), (2, 3), (4, 2)])
    def test_matches_oracle(self, heads, l_kv):
        q, kv = rand((2, 5, 8), seed=1), rand((2, l_kv, 6), seed=2)
        got = multi_head_attention(q, kv, heads, self.p).data
        np.testing.assert_allclose(got, attention_oracle(q.data, kv.data, heads, self.p), rtol=1e-10, atol=1e-12)

    def test_gradients(self):
        q, kv = rand((2, 4, 8), seed=3), rand((2, 3, 6), seed=4)

        def f(_):
            return weighted_sum(multi_head_attention(q, kv, 2, self.p))

        for t in (q, kv, self.p.query.weight, self.p.key.weight, self.p.value.bias, self.p.out.weight):
            assert finite_diff_check(f, t) < 1e-4

    def test_heads_must_divide(self):
        with pytest.raises(ContractError):
            multi_head_attention(rand((1, 2, 8)), rand((1, 1, 6)), 3, self.p)

    def test_kv_dim_mismatch(self):
        with pytest.raises(ShapeError):
            multi_head_attention(rand((1, 2, 8)), rand((1, 1, 7)), 2, self.p)
