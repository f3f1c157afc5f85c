import numpy as np
import pytest

from kfconformer import nn_blocks as nb
from kfconformer import tensor as tn
from kfconformer.tensor import Tensor

from _gradcheck import check_grads


def loss_of(out, r):
    return tn.tsum(tn.mul(out, Tensor(r)))


def tiny_block(rng, d=4, heads=2, ffn=8, kernel=3):
    return nb.ConformerBlockParams.init(rng, d, heads, ffn, kernel, np.float64)


def zero_weights(named):
    for name, p in named:
        if not name.split(".")[-1].startswith("ln"):
            p.data[...] = 0.0


class TestScaledDotAttention:
    def test_single_frame_returns_v(self, rng):
        q, k, v = (Tensor(rng.normal(size=(1, 3))) for _ in range(3))
        np.testing.assert_allclose(nb.scaled_dot_attention(q, k, v).data, v.data)

    def test_equal_keys_give_column_mean(self, rng):
        q = Tensor(rng.normal(size=(5, 4)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = Tensor(rng.normal(size=(5, 4)))
        out = nb.scaled_dot_attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (5, 1)), atol=1e-12)

    def test_dead_row_outputs_zero(self, rng):
        q, k, v = (Tensor(rng.normal(size=(4, 3))) for _ in range(3))
        mask = np.ones((4, 4), dtype=bool)
        mask[2] = False
        out = nb.scaled_dot_attention(q, k, v, mask).data
        assert (out[2] == 0).all()
        assert (out[[0, 1, 3]] != 0).any()

    def test_dense_multiply_count(self, rng):
        q, k, v = (Tensor(rng.normal(size=(7, 5))) for _ in range(3))
        with nb.count_multiplies() as c:
            nb.scaled_dot_attention(q, k, v)
        assert c.total == 2 * 7 * 7 * 5

    def test_masked_count_uses_allowed_pairs(self, rng):
        q, k, v = (Tensor(rng.normal(size=(6, 2))) for _ in range(3))
        mask = rng.random((6, 6)) < 0.5
        with nb.count_multiplies() as c:
            nb.scaled_dot_attention(q, k, v, mask)
        assert c.total == 2 * 2 * int(mask.sum())

    def test_all_ones_mask_bit_identical(self, rng):
        q, k, v = (Tensor(rng.normal(size=(6, 4))) for _ in range(3))
        a = nb.scaled_dot_attention(q, k, v).data
        b = nb.scaled_dot_attention(q, k, v, np.ones((6, 6), dtype=bool)).data
        assert np.array_equal(a, b)

    def test_mask_monotonicity(self, rng):
        q, k, v = (Tensor(rng.normal(size=(8, 4))) for _ in range(3))
        for _ in range(20):
            m1 = rng.random((8, 8)) < 0.4
            m2 = m1.copy()
            changed = rng.random(8) < 0.5
            m2[changed] |= rng.random((int(changed.sum()), 8)) < 0.5
            a = nb.scaled_dot_attention(q, k, v, m1).data
            b = nb.scaled_dot_attention(q, k, v, m2).data
            same = (m1 == m2).all(axis=1)
            assert np.array_equal(a[same], b[same])

    def test_shape_mismatch(self, rng):
        with pytest.raises(tn.ShapeError):
            nb.scaled_dot_attention(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))


class TestMultiHeadAttention:
    def test_identity_projections_single_head(self, rng):
        eye = lambda: Tensor(np.eye(4))
        p = nb.AttentionParams(eye(), eye(), eye(), eye(), num_heads=1)
        x = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(nb.multi_head_attention(x, None, p).data,
                                   nb.scaled_dot_attention(x, x, x).data, atol=1e-12)

    def test_head_permutation_invariance(self, rng):
        d, h = 8, 4
        p = nb.AttentionParams.init(rng, d, h)
        x = Tensor(rng.normal(size=(6, d)))
        perm = np.array([2, 0, 3, 1])
        cols = np.concatenate([np.arange(i * 2, i * 2 + 2) for i in perm])
        q = nb.AttentionParams(Tensor(p.w_q.data[:, cols]), Tensor(p.w_k.data[:, cols]),
                               Tensor(p.w_v.data[:, cols]), Tensor(p.w_o.data[cols, :]), num_heads=h)
        np.testing.assert_allclose(nb.multi_head_attention(x, None, p).data,
                                   nb.multi_head_attention(x, None, q).data, atol=1e-12)

    def test_zero_input_zero_output(self, rng):
        p = nb.AttentionParams.init(rng, 8, 2)
        assert (nb.multi_head_attention(Tensor(np.zeros((5, 8))), None, p).data == 0).all()

    def test_dense_count_per_layer(self, rng):
        p = nb.AttentionParams.init(rng, 8, 4)
        with nb.count_multiplies() as c:
            nb.multi_head_attention(Tensor(rng.normal(size=(9, 8))), None, p)
        assert c.total == 2 * 9 ** 2 * 2 * 4

    def test_heads_must_divide(self, rng):
        with pytest.raises(ValueError):
            nb.AttentionParams.init(rng, 6, 4)

    def test_gradients(self, rng):
        p = nb.AttentionParams.init(rng, 4, 2)
        x = Tensor(rng.normal(size=(2, 3, 4)), True)
        mask = rng.random((2, 3, 3)) < 0.7
        r = rng.normal(size=(2, 3, 4))
        check_grads(lambda: loss_of(nb.multi_head_attention(x, mask, p), r),
                    [x] + [t for _, t in p.named_parameters()][:4])


class TestFeedForward:
    def test_zero_weights_pass_through(self, rng):
        p = nb.FeedForwardParams.init(rng, 4, 8)
        zero_weights(p.named_parameters())
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(nb.feed_forward(Tensor(x), p).data, x)

    def test_half_step(self, rng):
        p = nb.FeedForwardParams.init(rng, 4, 8)
        x = Tensor(rng.normal(size=(3, 4)))
        half = nb.feed_forward(x, p, half_step=True).data - x.data
        full = nb.feed_forward(x, p, half_step=False).data - x.data
        np.testing.assert_allclose(half, 0.5 * full, atol=1e-14)

    def test_gradients(self, rng):
        p = nb.FeedForwardParams.init(rng, 4, 6)
        for _, t in p.named_parameters():
            t.data += rng.normal(scale=0.1, size=t.shape)
        x = Tensor(rng.normal(size=(3, 4)), True)
        r = rng.normal(size=(3, 4))
        check_grads(lambda: loss_of(nb.feed_forward(x, p), r), [x] + [t for _, t in p.named_parameters()])


class TestConvModule:
    def test_zero_weights_residual_only(self, rng):
        p = nb.ConvModuleParams.init(rng, 4, 3)
        zero_weights(p.named_parameters())
        x = rng.normal(size=(5, 4))
        np.testing.assert_array_equal(nb.conv_module(Tensor(x), p).data, x)

    def test_single_frame_uses_center_tap(self, rng):
        p = nb.ConvModuleParams.init(rng, 4, 3)
        x = Tensor(rng.normal(size=(1, 4)))
        full = nb.conv_module(x, p).data
        # hand pipeline where the depthwise conv is replaced by its centre tap
        def ln(v, g, b):
            return (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + 1e-5) * g + b
        h = ln(x.data, p.ln_g.data, p.ln_b.data) @ p.pw_in.data + p.pw_in_b.data
        h = h[:, :4] / (1 + np.exp(-h[:, 4:]))
        h = h * p.dw.data[1] + p.dw_b.data
        h = ln(h, p.ln2_g.data, p.ln2_b.data)
        h = h / (1 + np.exp(-h))
        expected = x.data + h @ p.pw_out.data + p.pw_out_b.data
        np.testing.assert_allclose(full, expected, atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ValueError):
            nb.ConvModuleParams.init(rng, 4, 4)

    def test_depthwise_kernel_gradient(self, rng):
        p = nb.ConvModuleParams.init(rng, 4, 5)
        x = Tensor(rng.normal(size=(6, 4)))
        r = rng.normal(size=(6, 4))
        check_grads(lambda: loss_of(nb.conv_module(x, p), r), [p.dw])

    def test_padding_does_not_leak(self, rng):
        p = nb.ConvModuleParams.init(rng, 4, 5)
        x = rng.normal(size=(4, 4))
        alone = nb.conv_module(Tensor(x), p).data
        padded = np.concatenate([x, rng.normal(size=(3, 4))])[None]
        out = nb.conv_module(Tensor(padded), p, valid=np.arange(7)[None] < 4).data
        np.testing.assert_allclose(out[0, :4], alone, atol=1e-12)


class TestConformerBlock:
    def test_zero_sublayers_give_layer_norm(self, rng):
        p = tiny_block(rng)
        zero_weights(p.named_parameters())
        x = rng.normal(size=(5, 4))
        expected = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(nb.conformer_block(Tensor(x), None, p).data, expected, atol=1e-12)

    def test_dense_mask_equals_no_mask(self, rng):
        p = tiny_block(rng)
        x = Tensor(rng.normal(size=(6, 4)))
        assert np.array_equal(nb.conformer_block(x, None, p).data,
                              nb.conformer_block(x, np.ones((6, 6), dtype=bool), p).data)

    def test_full_block_gradients(self, rng):
        p = tiny_block(rng)
        for _, t in p.named_parameters():
            t.data += rng.normal(scale=0.1, size=t.shape)
        x = Tensor(rng.normal(size=(4, 4)), True)
        r = rng.normal(size=(4, 4))
        check_grads(lambda: loss_of(nb.conformer_block(x, None, p), r),
                    [x] + [t for _, t in p.named_parameters()])


class TestFrontend:
    @pytest.mark.parametrize("factor,t0,t", [(1, 7, 7), (2, 10, 5), (4, 10, 3), (4, 1, 1), (2, 9, 5)])
    def test_output_lengths(self, rng, factor, t0, t):
        p = nb.FrontendParams.init(rng, 3, 8, factor)
        out, lens = nb.subsample_frontend(Tensor(rng.normal(size=(t0, 3))), p)
        assert out.shape == (t, 8)
        assert lens.tolist() == [t]

    def test_factor_one_is_projection(self, rng):
        p = nb.FrontendParams.init(rng, 3, 8, 1)
        x = rng.normal(size=(4, 3))
        out, _ = nb.subsample_frontend(Tensor(x), p)
        np.testing.assert_allclose(out.data, x @ p.proj.data + p.proj_b.data)

    def test_batch_lengths(self, rng):
        p = nb.FrontendParams.init(rng, 3, 8, 4)
        _, lens = nb.subsample_frontend(Tensor(rng.normal(size=(2, 10, 3))), p, [10, 5])
        assert lens.tolist() == [3, 2]

    def test_empty_rejected(self, rng):
        p = nb.FrontendParams.init(rng, 3, 8, 2)
        with pytest.raises(tn.ShapeError):
            nb.subsample_frontend(Tensor(np.zeros((0, 3))), p)

    def test_gradients(self, rng):
        p = nb.FrontendParams.init(rng, 2, 4, 4)
        x = Tensor(rng.normal(size=(9, 2)), True)
        r = rng.normal(size=(3, 4))
        check_grads(lambda: loss_of(nb.subsample_frontend(x, p)[0], r),
                    [x] + [t for _, t in p.named_parameters()])


class TestPositionalEncoding:
    def test_position_zero(self):
        assert nb.positional_encoding(3, 6)[0].tolist() == [0, 1, 0, 1, 0, 1]

    def test_bounded_and_deterministic(self):
        a, b = nb.positional_encoding(50, 16), nb.positional_encoding(50, 16)
        assert np.abs(a).max() <= 1.0
        assert np.array_equal(a, b)
