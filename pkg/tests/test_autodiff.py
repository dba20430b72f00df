"""Gradient, shape, and determinism checks for the autodiff engine.

Every differentiable operation is checked against central finite
differences (step 1e-5, relative error <= 1e-4) through a random linear
projection of its output, and conv2d is additionally checked against a
naive loop implementation over a grid of geometries.
"""

import numpy as np
import pytest

from hsmtl import autodiff as ad


STEP = 1e-5
TOL = 1e-4


def numeric_grad(make_loss, tensor):
    """Central finite differences of a scalar function w.r.t. one tensor."""
    flat = tensor.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + STEP
        hi = float(make_loss().data)
        flat[i] = orig - STEP
        lo = float(make_loss().data)
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * STEP)
    return grad.reshape(tensor.data.shape)


def check_grads(make_loss, tensors):
    """Compare autodiff gradients of a fresh graph against finite differences."""
    ad.new_graph()
    for t in tensors:
        t.zero_grad()
    loss = make_loss()
    ad.backward(loss)
    for t in tensors:
        expected = numeric_grad(make_loss, t)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        diff = np.abs(expected - got)
        denom = np.maximum(np.abs(expected) + np.abs(got), 1e-8)
        rel = diff / denom
        # absolute escape covers true-zero gradients where FD noise dominates
        ok = (rel <= TOL) | (diff <= 1e-8)
        assert ok.all(), f"max rel err {rel[~ok].max():.3e}"


def projected(out):
    """Deterministic random projection to a scalar; catches asymmetric bugs."""
    rng = np.random.default_rng(out.data.size)
    r = rng.normal(size=out.data.shape)
    return ad.sum_all(ad.mul_const(out, r))


def leaf(rng, *shape, away_from_zero=False):
    data = rng.normal(size=shape)
    if away_from_zero:
        data = np.where(np.abs(data) < 0.15, np.sign(data) * 0.3 + data, data)
    return ad.Tensor(data, requires_grad=True)


class TestElementwise:
    def test_add_mul_chain(self):
        rng = np.random.default_rng(0)
        a = leaf(rng, 2, 3, 4, 5)
        b = leaf(rng, 2, 3, 4, 5)
        check_grads(lambda: projected(ad.mul(ad.add(a, b), a)), [a, b])

    def test_mul_broadcast_gate(self):
        rng = np.random.default_rng(1)
        x = leaf(rng, 2, 4, 3, 3)
        gate = leaf(rng, 2, 4, 1, 1)
        check_grads(lambda: projected(ad.mul(x, gate)), [x, gate])
        ad.new_graph()
        out = ad.mul(x, gate)
        assert out.shape == (2, 4, 3, 3)

    def test_add_shape_mismatch(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((3, 2)))
        with pytest.raises(ad.ShapeError):
            ad.add(a, b)

    def test_exp_log_pow(self):
        rng = np.random.default_rng(2)
        x = ad.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        check_grads(lambda: projected(ad.exp(x)), [x])
        check_grads(lambda: projected(ad.log(x)), [x])
        check_grads(lambda: projected(ad.pow_const(x, 2.5)), [x])
        check_grads(lambda: projected(ad.pow_const(x, 1.0)), [x])

    def test_pow_zero_has_zero_grad(self):
        x = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
        ad.new_graph()
        loss = ad.sum_all(ad.pow_const(x, 0.0))
        ad.backward(loss)
        assert np.all(x.grad == 0.0)

    def test_abs_away_from_zero(self):
        rng = np.random.default_rng(3)
        x = leaf(rng, 4, 4, away_from_zero=True)
        check_grads(lambda: projected(ad.absolute(x)), [x])

    def test_const_ops(self):
        rng = np.random.default_rng(4)
        x = leaf(rng, 3, 3)
        c = rng.normal(size=(3, 3))
        check_grads(lambda: projected(ad.mul_const(x, c)), [x])
        check_grads(lambda: projected(ad.add_const(x, 1.5)), [x])
        check_grads(lambda: projected(ad.rsub_const(2.0, x)), [x])

    def test_mul_const_rejects_expanding_broadcast(self):
        x = ad.Tensor(np.zeros((2, 1)))
        with pytest.raises(ad.ShapeError):
            ad.mul_const(x, np.ones((2, 5)))

    def test_reshape_roundtrip(self):
        rng = np.random.default_rng(5)
        x = leaf(rng, 2, 6)
        check_grads(lambda: projected(ad.reshape(x, (3, 4))), [x])
        with pytest.raises(ad.ShapeError):
            ad.reshape(x, (5, 5))


class TestReductionsAndGather:
    def test_sum_all(self):
        rng = np.random.default_rng(6)
        x = leaf(rng, 2, 3, 2, 2)
        check_grads(lambda: ad.sum_all(ad.mul(x, x)), [x])

    def test_gather_channel(self):
        rng = np.random.default_rng(7)
        x = leaf(rng, 2, 5, 3, 4)
        idx = rng.integers(0, 5, size=(2, 3, 4))
        check_grads(lambda: projected(ad.gather_channel(x, idx)), [x])
        ad.new_graph()
        out = ad.gather_channel(x, idx)
        for n in range(2):
            for h in range(3):
                for w in range(4):
                    assert out.data[n, 0, h, w] == x.data[n, idx[n, h, w], h, w]

    def test_gather_channel_bad_index(self):
        x = ad.Tensor(np.zeros((1, 3, 2, 2)))
        idx = np.full((1, 2, 2), 3)
        with pytest.raises(ValueError):
            ad.gather_channel(x, idx)

    def test_channel_mean_max(self):
        rng = np.random.default_rng(8)
        x = leaf(rng, 2, 6, 3, 3)
        check_grads(lambda: projected(ad.channel_mean(x)), [x])
        check_grads(lambda: projected(ad.channel_max(x)), [x])

    def test_spatial_max(self):
        rng = np.random.default_rng(9)
        x = leaf(rng, 2, 3, 4, 5)
        check_grads(lambda: projected(ad.spatial_max(x)), [x])
        ad.new_graph()
        out = ad.spatial_max(x)
        assert out.shape == (2, 3, 1, 1)
        assert np.allclose(out.data[:, :, 0, 0], x.data.max(axis=(2, 3)))


class TestActivations:
    def test_grads(self):
        rng = np.random.default_rng(10)
        x = leaf(rng, 2, 4, 3, 3, away_from_zero=True)
        for kind in ("relu", "leaky_relu", "sigmoid"):
            check_grads(lambda k=kind: projected(ad.activation(x, k)), [x])
        check_grads(lambda: projected(ad.softmax(x, axis=1)), [x])
        check_grads(lambda: projected(ad.log_softmax(x, axis=1)), [x])

    def test_leaky_slope_used(self):
        x = ad.Tensor(np.array([[-2.0, 3.0]]), requires_grad=True)
        ad.new_graph()
        out = ad.leaky_relu(x, slope=0.1)
        assert np.allclose(out.data, [[-0.2, 3.0]])
        with pytest.raises(ValueError):
            ad.leaky_relu(x, slope=1.5)

    def test_softmax_properties(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            logits = rng.normal(scale=5.0, size=(2, 7, 2, 2))
            p = ad.softmax(ad.Tensor(logits), axis=1)
            assert np.allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(p.data > 0)
            shifted = ad.softmax(ad.Tensor(logits + rng.normal() * 3), axis=1)
            # shifting all channels by one constant leaves softmax unchanged
            c = rng.normal(size=(2, 1, 2, 2))
            same = ad.softmax(ad.Tensor(logits + c), axis=1)
            assert np.allclose(same.data, p.data, atol=1e-12)
            del shifted

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(scale=30.0, size=(3, 5))
        a = ad.log_softmax(ad.Tensor(logits), axis=1)
        b = np.log(ad.softmax(ad.Tensor(logits), axis=1).data)
        assert np.allclose(a.data, b, atol=1e-9)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.activation(ad.Tensor(np.zeros(3)), "tanh")


def naive_conv2d(x, w, b, stride, pad, dil):
    n, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    oh = (h + 2 * ph - dil * (kh - 1) - 1) // sh + 1
    ow = (wd_ + 2 * pw - dil * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, o, oh, ow))
    for nn in range(n):
        for oo in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[oo]
                    for cc in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                ii = i * sh + a * dil - ph
                                jj = j * sw + bb * dil - pw
                                if 0 <= ii < h and 0 <= jj < wd_:
                                    acc += x[nn, cc, ii, jj] * w[oo, cc, a, bb]
                    out[nn, oo, i, j] = acc
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,dil", [
        ((1, 1), (0, 0), 1),
        ((1, 1), (1, 1), 1),
        ((2, 2), (1, 1), 1),
        ((1, 1), (2, 2), 2),
        ((1, 1), (3, 3), 3),
        ((2, 1), (0, 1), 1),
    ])
    def test_forward_matches_naive(self, stride, pad, dil):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 3, 7, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        spec = ad.Conv2dSpec(3, 4, kernel=(3, 3), stride=stride, padding=pad, dilation=dil)
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), spec)
        ref = naive_conv2d(x, w, b, stride, pad, dil)
        assert out.shape == ref.shape
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_1x1_kernel(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(1, 5, 4, 4))
        w = rng.normal(size=(2, 5, 1, 1))
        spec = ad.Conv2dSpec(5, 2, kernel=(1, 1))
        out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), None, spec)
        ref = np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0])
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(15)
        x = leaf(rng, 2, 3, 6, 6)
        w = leaf(rng, 4, 3, 3, 3)
        b = leaf(rng, 4)
        spec = ad.Conv2dSpec(3, 4, kernel=(3, 3), padding=(1, 1))
        check_grads(lambda: projected(ad.conv2d(x, w, b, spec)), [x, w, b])

    def test_dilated_strided_gradients(self):
        rng = np.random.default_rng(16)
        x = leaf(rng, 1, 2, 9, 9)
        w = leaf(rng, 3, 2, 3, 3)
        b = leaf(rng, 3)
        spec = ad.Conv2dSpec(2, 3, kernel=(3, 3), stride=(2, 2), padding=(2, 2), dilation=2)
        check_grads(lambda: projected(ad.conv2d(x, w, b, spec)), [x, w, b])

    def test_shape_validation(self):
        x = ad.Tensor(np.zeros((1, 3, 5, 5)))
        w = ad.Tensor(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ad.ShapeError):
            ad.conv2d(x, w, None, ad.Conv2dSpec(2, 4, kernel=(3, 3)))
        with pytest.raises(ad.ShapeError):
            ad.conv2d(x, ad.Tensor(np.zeros((4, 3, 5, 5))), None,
                      ad.Conv2dSpec(3, 4, kernel=(3, 3)))
        # dilated receptive field wider than padded input
        with pytest.raises(ad.ShapeError):
            ad.conv2d(x, w, None, ad.Conv2dSpec(3, 4, kernel=(3, 3), dilation=4))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ad.Conv2dSpec(0, 4)
        with pytest.raises(ValueError):
            ad.Conv2dSpec(3, 4, stride=(0, 1))
        with pytest.raises(ValueError):
            ad.Conv2dSpec(3, 4, dilation=0)


class TestConv1d:
    def test_forward_and_grad(self):
        rng = np.random.default_rng(17)
        x = leaf(rng, 2, 1, 6)
        w = leaf(rng, 1, 1, 3)
        b = leaf(rng, 1)
        check_grads(lambda: projected(ad.conv1d(x, w, b, padding=1)), [x, w, b])
        ad.new_graph()
        out = ad.conv1d(x, w, b, padding=1)
        assert out.shape == (2, 1, 6)
        # middle position against a hand expansion
        n, pos = 0, 3
        want = b.data[0] + sum(w.data[0, 0, k] * x.data[n, 0, pos - 1 + k] for k in range(3))
        assert np.isclose(out.data[n, 0, pos], want, atol=1e-12)


class TestBatchNorm:
    def test_train_normalizes_and_tracks(self):
        rng = np.random.default_rng(18)
        x = ad.Tensor(rng.normal(loc=3.0, scale=2.0, size=(4, 3, 5, 5)), requires_grad=True)
        gamma = ad.Tensor(np.ones(3), requires_grad=True)
        beta = ad.Tensor(np.zeros(3), requires_grad=True)
        state = ad.BatchNormState.fresh(3)
        ad.new_graph()
        out = ad.batch_norm(x, gamma, beta, state, mode="train")
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        assert np.allclose(state.mean, 0.1 * mu, atol=1e-12)
        assert np.allclose(state.var, 0.9 + 0.1 * var, atol=1e-12)

    def test_train_gradients(self):
        rng = np.random.default_rng(19)
        x = leaf(rng, 3, 2, 4, 4)
        gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
        beta = leaf(rng, 2)
        # the state mutates per call, so rebuild it inside the closure
        check_grads(
            lambda: projected(ad.batch_norm(x, gamma, beta, ad.BatchNormState.fresh(2),
                                            mode="train")),
            [x, gamma, beta])

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(20)
        x = leaf(rng, 2, 3, 4, 4)
        gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = leaf(rng, 3)
        state = ad.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
        frozen = state.copy()
        check_grads(lambda: projected(ad.batch_norm(x, gamma, beta, state, mode="eval")),
                    [x, gamma, beta])
        assert np.array_equal(state.mean, frozen.mean)
        assert np.array_equal(state.var, frozen.var)
        ad.new_graph()
        out = ad.batch_norm(x, gamma, beta, state, mode="eval")
        want = (x.data - state.mean[None, :, None, None]) / np.sqrt(
            state.var[None, :, None, None] + 1e-5) * gamma.data[None, :, None, None] \
            + beta.data[None, :, None, None]
        assert np.allclose(out.data, want, atol=1e-12)

    def test_validation(self):
        x = ad.Tensor(np.zeros((1, 3, 2, 2)))
        g = ad.Tensor(np.ones(2))
        b = ad.Tensor(np.zeros(3))
        with pytest.raises(ad.ShapeError):
            ad.batch_norm(x, g, b, ad.BatchNormState.fresh(3))
        with pytest.raises(ValueError):
            ad.batch_norm(x, ad.Tensor(np.ones(3)), b, ad.BatchNormState.fresh(3), mode="test")


class TestPooling:
    def test_max_pool_forward_and_grad(self):
        rng = np.random.default_rng(21)
        x = leaf(rng, 2, 3, 6, 6)
        check_grads(lambda: projected(ad.pool2d(x, "max", (2, 2))), [x])
        ad.new_graph()
        out = ad.pool2d(x, "max", (2, 2))
        assert out.shape == (2, 3, 3, 3)
        assert out.data[0, 0, 0, 0] == x.data[0, 0, :2, :2].max()

    def test_avg_pool_forward_and_grad(self):
        rng = np.random.default_rng(22)
        x = leaf(rng, 2, 3, 6, 6)
        check_grads(lambda: projected(ad.pool2d(x, "avg", (2, 2))), [x])
        ad.new_graph()
        out = ad.pool2d(x, "avg", (2, 2))
        assert np.isclose(out.data[1, 2, 1, 1], x.data[1, 2, 2:4, 2:4].mean())

    def test_overlapping_stride(self):
        rng = np.random.default_rng(23)
        x = leaf(rng, 1, 2, 5, 5)
        check_grads(lambda: projected(ad.pool2d(x, "max", (3, 3), stride=(1, 1))), [x])
        check_grads(lambda: projected(ad.pool2d(x, "avg", (3, 3), stride=(2, 2))), [x])

    def test_window_too_large(self):
        x = ad.Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ad.ShapeError):
            ad.pool2d(x, "max", (4, 4))

    def test_global_avg_pool(self):
        rng = np.random.default_rng(24)
        x = leaf(rng, 2, 4, 5, 3)
        check_grads(lambda: projected(ad.global_avg_pool(x)), [x])
        ad.new_graph()
        out = ad.global_avg_pool(x)
        assert out.shape == (2, 4, 1, 1)
        assert np.allclose(out.data[:, :, 0, 0], x.data.mean(axis=(2, 3)))


class TestBilinear:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(25)
        x = leaf(rng, 1, 2, 4, 4)
        ad.new_graph()
        out = ad.bilinear_upsample(x, (4, 4))
        assert np.array_equal(out.data, x.data)

    def test_doubling_against_known_values(self):
        x = ad.Tensor(np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2))
        out = ad.bilinear_upsample(x, (4, 4))
        # corners replicate the nearest source sample under align-corners=false
        assert out.data[0, 0, 0, 0] == 0.0
        assert out.data[0, 0, 3, 3] == 3.0
        # center positions interpolate with weights 0.75/0.25
        assert np.isclose(out.data[0, 0, 0, 1], 0.25 * 1.0)
        assert np.isclose(out.data[0, 0, 1, 1], 0.75 * (0.75 * 0 + 0.25 * 1)
                          + 0.25 * (0.75 * 2 + 0.25 * 3))

    def test_gradients(self):
        rng = np.random.default_rng(26)
        x = leaf(rng, 2, 3, 3, 4)
        check_grads(lambda: projected(ad.bilinear_upsample(x, (6, 8))), [x])
        check_grads(lambda: projected(ad.bilinear_upsample(x, (5, 7))), [x])

    def test_mass_preserved_by_backward(self):
        # gradient of sum(upsampled) w.r.t. x distributes each output's weight once
        x = ad.Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
        ad.new_graph()
        loss = ad.sum_all(ad.bilinear_upsample(x, (9, 9)))
        ad.backward(loss)
        assert np.isclose(x.grad.sum(), 81.0)


class TestLinearConcat:
    def test_linear(self):
        rng = np.random.default_rng(27)
        x = leaf(rng, 3, 5)
        w = leaf(rng, 2, 5)
        b = leaf(rng, 2)
        check_grads(lambda: projected(ad.linear(x, w, b)), [x, w, b])
        with pytest.raises(ad.ShapeError):
            ad.linear(x, leaf(rng, 2, 4), b)

    def test_concat_and_split_grads(self):
        rng = np.random.default_rng(28)
        a = leaf(rng, 2, 3, 4, 4)
        b = leaf(rng, 2, 5, 4, 4)
        check_grads(lambda: projected(ad.combine([a, b], "concat")), [a, b])
        ad.new_graph()
        out = ad.combine([a, b], "concat")
        assert out.shape == (2, 8, 4, 4)
        assert np.array_equal(out.data[:, :3], a.data)
        assert np.array_equal(out.data[:, 3:], b.data)

    def test_channel_slice(self):
        rng = np.random.default_rng(41)
        x = leaf(rng, 2, 6, 3, 3)
        check_grads(lambda: projected(ad.channel_slice(x, 1, 4)), [x])
        ad.new_graph()
        out = ad.channel_slice(x, 2, 6)
        assert out.shape == (2, 4, 3, 3)
        assert np.array_equal(out.data, x.data[:, 2:6])
        # slicing the halves then concatenating restores the input
        back = ad.combine([ad.channel_slice(x, 0, 3), ad.channel_slice(x, 3, 6)], "concat")
        assert np.array_equal(back.data, x.data)
        with pytest.raises(ValueError):
            ad.channel_slice(x, 3, 3)
        with pytest.raises(ValueError):
            ad.channel_slice(x, 0, 7)

    def test_combine_add(self):
        rng = np.random.default_rng(29)
        a = leaf(rng, 2, 3)
        b = leaf(rng, 2, 3)
        c = leaf(rng, 2, 3)
        check_grads(lambda: projected(ad.combine([a, b, c], "add")), [a, b, c])
        with pytest.raises(ad.ShapeError):
            ad.combine([leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 5, 3, 4)], "concat")
        with pytest.raises(ValueError):
            ad.combine([a, b], "stack")


class TestGraphMechanics:
    def test_topological_order(self):
        rng = np.random.default_rng(30)
        g = ad.new_graph()
        x = leaf(rng, 2, 2)
        y = ad.mul(ad.add(x, x), x)
        z = ad.sum_all(y)
        assert g.check_acyclic()
        assert z._node_id == len(g.nodes) - 1

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(31)
        g = ad.new_graph()
        x = leaf(rng, 1, 3, 8, 8)
        w = leaf(rng, 4, 3, 3, 3)
        b = leaf(rng, 4)
        spec = ad.Conv2dSpec(3, 4, kernel=(3, 3), padding=(1, 1))
        h = ad.leaky_relu(ad.conv2d(x, w, b, spec))
        p = ad.pool2d(h, "max", (2, 2))
        ad.sum_all(ad.softmax(p, axis=1))
        assert g.replay_matches()

    def test_backward_accumulates_across_calls(self):
        rng = np.random.default_rng(32)
        x = leaf(rng, 3, 3)
        ad.new_graph()
        loss1 = ad.sum_all(ad.mul(x, x))
        ad.backward(loss1)
        g1 = x.grad.copy()
        ad.backward(loss1)
        assert np.allclose(x.grad, 2 * g1)

    def test_two_losses_same_graph_accumulate(self):
        rng = np.random.default_rng(33)
        x = leaf(rng, 2, 2)
        ad.new_graph()
        a = ad.sum_all(ad.mul(x, x))
        ad.backward(a)
        ga = x.grad.copy()
        b = ad.sum_all(ad.exp(x))
        ad.backward(b)
        assert np.allclose(x.grad, ga + np.exp(x.data))

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.zeros((2, 2)), requires_grad=True)
        ad.new_graph()
        y = ad.add(x, x)
        with pytest.raises(ad.ShapeError):
            ad.backward(y)

    def test_no_grad_disables_recording(self):
        rng = np.random.default_rng(34)
        g = ad.new_graph()
        x = leaf(rng, 2, 2)
        with ad.no_grad():
            out = ad.mul(x, x)
        assert not out.requires_grad
        assert len(g.nodes) == 0
        # loss built on a no_grad product has no path back to x
        assert out._graph is None

    def test_grad_shapes_match_leaves(self):
        rng = np.random.default_rng(35)
        x = leaf(rng, 2, 3, 5, 5)
        w = leaf(rng, 2, 3, 3, 3)
        b = leaf(rng, 2)
        ad.new_graph()
        spec = ad.Conv2dSpec(3, 2, kernel=(3, 3), padding=(1, 1))
        ad.backward(ad.sum_all(ad.conv2d(x, w, b, spec)))
        assert x.grad.shape == x.data.shape
        assert w.grad.shape == w.data.shape
        assert b.grad.shape == b.data.shape

    def test_determinism_same_seed_same_grads(self):
        def run():
            rng = np.random.default_rng(36)
            x = ad.Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
            w = ad.Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            ad.new_graph()
            spec = ad.Conv2dSpec(3, 4, kernel=(3, 3), padding=(1, 1))
            out = ad.conv2d(x, w, None, spec)
            ad.backward(ad.sum_all(ad.mul(out, out)))
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestCompositeNetwork:
    def test_small_net_end_to_end_gradcheck(self):
        # stem conv -> BN -> leaky relu -> avg pool -> conv -> upsample -> softmax CE-ish
        rng = np.random.default_rng(37)
        x = leaf(rng, 1, 2, 6, 6)
        w1 = leaf(rng, 3, 2, 3, 3)
        b1 = leaf(rng, 3)
        gamma = ad.Tensor(rng.uniform(0.8, 1.2, size=3), requires_grad=True)
        beta = leaf(rng, 3)
        w2 = leaf(rng, 4, 3, 1, 1)
        b2 = leaf(rng, 4)
        s1 = ad.Conv2dSpec(2, 3, kernel=(3, 3), padding=(1, 1))
        s2 = ad.Conv2dSpec(3, 4, kernel=(1, 1))

        def make_loss():
            h = ad.conv2d(x, w1, b1, s1)
            h = ad.batch_norm(h, gamma, beta, ad.BatchNormState.fresh(3), mode="train")
            h = ad.leaky_relu(h)
            h = ad.pool2d(h, "avg", (2, 2))
            h = ad.conv2d(h, w2, b2, s2)
            h = ad.bilinear_upsample(h, (6, 6))
            return projected(ad.log_softmax(h, axis=1))

        check_grads(make_loss, [x, w1, b1, gamma, beta, w2, b2])
