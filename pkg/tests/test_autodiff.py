import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from medaf import autodiff as ad
from medaf.autodiff import SgdMomentumState, Tape, Tensor, sgd_step
from medaf.errors import ConfigError, ContractError, DimensionError
from medaf.gradcheck import check_gradients

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def conv_oracle(x, k, stride, pad):
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def away_from_zero(rng, shape):
    u = rng.uniform(-1, 1, size=shape)
    return np.sign(u) * (0.1 + np.abs(u))


class TestTensor:
    def test_rejects_zero_dims(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_data_is_float64_copy(self):
        src = np.arange(4, dtype=np.int32)
        t = Tensor(src)
        src[0] = 99
        assert t.data.dtype == np.float64
        assert t.data[0] == 0


class TestConv2d:
    def test_identity_kernel(self):
        out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, np.ones((1, 3, 3)))

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 6)))
        out = ad.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), padding=1)
        assert out.shape == (4, 6, 6)
        assert not out.data.any()

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=1)
        expected = conv_oracle(x, k, 2, 1)
        assert out.shape == (3, 3, 3)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,pad,size", [(1, 0, 5), (1, 1, 4), (2, 0, 7), (3, 2, 6)])
    def test_output_size_formula(self, stride, pad, size):
        out = ad.conv2d(Tensor(np.ones((1, 1, size, size))), Tensor(np.ones((2, 1, 3, 3))),
                        stride=stride, padding=pad)
        expect = (size + 2 * pad - 3) // stride + 1
        assert out.shape == (1, 2, expect, expect)

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 2, 6, 6))
        k = Tensor(rng.normal(size=(4, 2, 3, 3)))
        b = Tensor(rng.normal(size=4))
        batched = ad.conv2d(Tensor(x), k, b, stride=2, padding=1).data
        for i in range(3):
            single = ad.conv2d(Tensor(x[i]), k, b, stride=2, padding=1).data
            np.testing.assert_allclose(batched[i], single, atol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestElementwise:
    def test_relu_sign_cases(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_propagates_nan(self):
        assert np.isnan(ad.relu(Tensor([np.nan, 1.0])).data[0])

    def test_relu_all_negative(self):
        assert not ad.relu(Tensor(-np.arange(1, 7.0))).data.any()

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(ad.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    @given(arrays(np.float64, st.integers(1, 30), elements=finite))
    def test_relu_matches_elementwise_oracle(self, x):
        out = ad.relu(Tensor(x)).data
        assert all(o == (v if v > 0 else 0.0) for o, v in zip(out, x))

    def test_no_broadcasting(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones((1, 3))))


class TestPoolingAndLinear:
    def test_gap_mean(self):
        assert ad.global_average_pool(Tensor([[[1.0, 3.0], [5.0, 7.0]]])).data.tolist() == [4.0]

    def test_gap_constant(self):
        np.testing.assert_allclose(ad.global_average_pool(Tensor(np.full((2, 3, 3), 2.5))).data, [2.5, 2.5])

    def test_gap_per_channel_oracle(self):
        x = np.random.default_rng(3).normal(size=(4, 3, 3))
        expected = [math.fsum(x[c].ravel()) / 9 for c in range(4)]
        np.testing.assert_allclose(ad.global_average_pool(Tensor(x)).data, expected, atol=1e-14)

    def test_gap_rejects_vector(self):
        with pytest.raises(DimensionError):
            ad.global_average_pool(Tensor([1.0, 2.0]))

    def test_linear_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        out = ad.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_linear_zero_weight(self):
        out = ad.linear(Tensor(np.ones(4)), Tensor(np.zeros((2, 4))), Tensor([5.0, -1.0]))
        np.testing.assert_array_equal(out.data, [5.0, -1.0])

    def test_linear_dot_oracle(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=5), rng.normal(size=(3, 5)), rng.normal(size=3)
        expected = [math.fsum(w[o] * x) + b[o] for o in range(3)]
        np.testing.assert_allclose(ad.linear(Tensor(x), Tensor(w), Tensor(b)).data, expected, atol=1e-13)

    def test_linear_mismatch(self):
        with pytest.raises(DimensionError):
            ad.linear(Tensor(np.ones(4)), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_high_precision_oracle(self):
        mpmath.mp.dps = 50
        ex = [mpmath.e ** v for v in (1, 2, 3)]
        expected = [float(e / sum(ex)) for e in ex]
        np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-15)

    @given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, x, c):
        s = ad.softmax(Tensor(x)).data
        assert abs(s.sum() - 1) <= 1e-9
        assert np.all(s > 0)
        np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, s, rtol=0, atol=1e-12)

    def test_large_logits_stay_finite(self):
        s = ad.softmax(Tensor([1000.0, 0.0, -1000.0])).data
        assert np.all(np.isfinite(s))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(5).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_zero_times_x(self):
        x = Tensor(np.arange(1.0, 5.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(x * 0.0)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.relu(x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(x * 3.0)
        tape.backward(loss)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_sum_of_losses_is_sum_of_backwards(self):
        rng = np.random.default_rng(6)
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=4))

        def loss_a():
            return ad.cross_entropy(ad.linear(x, w), 1)

        def loss_b():
            return ad.sum(ad.relu(ad.linear(x, w)))

        with Tape() as tape:
            total = loss_a() + loss_b()
        tape.backward(total)
        joint = w.grad
        separate = np.zeros_like(joint)
        for fn in (loss_a, loss_b):
            w.grad = None
            with Tape() as tape:
                loss = fn()
            tape.backward(loss)
            separate += w.grad
        np.testing.assert_allclose(joint, separate, atol=1e-14)

    def test_tape_is_topological(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            ad.sum(ad.relu(x * 2.0) + x)
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen for i in node.inputs if i.requires_grad)
            seen.add(id(node.output))

    def test_no_tape_no_record(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(ad.sum(x))


class TestGradients:
    """Finite-difference checks of every differentiable op (step 1e-4, float64)."""

    @pytest.mark.parametrize("seed", range(3))
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 3, 3)))
        err = check_gradients(lambda: ad.sum(ad.conv2d(x, k, b, stride=2, padding=1) * r), [x, k, b])
        assert err < 1e-4

    def test_relu(self):
        rng = np.random.default_rng(7)
        x = Tensor(away_from_zero(rng, (4, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 5)))
        assert check_gradients(lambda: ad.sum(ad.relu(x) * r), [x]) < 1e-4

    def test_softmax_and_log_softmax(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(3, 5)))
        assert check_gradients(lambda: ad.sum(ad.softmax(x) * r), [x]) < 1e-4
        assert check_gradients(lambda: ad.sum(ad.log_softmax(x) * r), [x]) < 1e-4

    def test_cross_entropy(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        assert check_gradients(lambda: ad.cross_entropy(x, [0, 5, 2, 2]), [x]) < 1e-4

    def test_structural_ops(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3)))

        def fn():
            la, lb = ad.global_average_pool(a), ad.global_average_pool(b)
            fused = ad.weighted_sum(w, ad.stack([la, lb], axis=1))
            cam = ad.center_spatial(ad.take_channel(a, [1, 2]))
            return ad.sum(fused * r) + ad.mean(cam * cam) + ad.sum(ad.select(b, 0, axis=1))

        assert check_gradients(fn, [a, b, w]) < 1e-4

    def test_cosine_similarity(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.uniform(0.1, 1, size=(3, 4, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.1, 1, size=(3, 4, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=3))
        assert check_gradients(lambda: ad.sum(ad.cosine_similarity(a, b, batch_dims=1) * r), [a, b]) < 1e-4

    def test_cosine_zero_vector_is_finite(self):
        a = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum(ad.cosine_similarity(a, b, batch_dims=1))
        tape.backward(loss)
        assert loss.item() == 0.0
        assert np.all(np.isfinite(a.grad)) and np.all(np.isfinite(b.grad))


class TestSgd:
    def test_plain_step(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        sgd_step({"p": p}, SgdMomentumState(1.0, 0.0))
        np.testing.assert_array_equal(p.data, [0.5, 3.0])
        assert p.grad is None

    def test_zero_grad_decays_velocity(self):
        p = Tensor([1.0], requires_grad=True)
        state = SgdMomentumState(0.1, 0.9)
        state.velocity["p"] = np.array([2.0])
        p.grad = np.zeros(1)
        sgd_step({"p": p}, state)
        np.testing.assert_allclose(state.velocity["p"], [1.8])
        np.testing.assert_allclose(p.data, [1.0 - 0.1 * 1.8])

    def test_zero_grad_no_velocity_leaves_params(self):
        p = Tensor([1.0, -1.0], requires_grad=True)
        p.grad = np.zeros(2)
        sgd_step({"p": p}, SgdMomentumState(0.1, 0.9))
        np.testing.assert_array_equal(p.data, [1.0, -1.0])

    def test_two_step_momentum_recursion(self):
        g = np.array([0.3, -0.7])
        lr = 0.5
        p = Tensor([0.0, 0.0], requires_grad=True)
        state = SgdMomentumState(lr, 0.9)
        p.grad = g.copy()
        sgd_step({"p": p}, state)
        np.testing.assert_allclose(p.data, -lr * g, atol=1e-15)
        p.grad = g.copy()
        sgd_step({"p": p}, state)
        np.testing.assert_allclose(p.data, -lr * g - lr * 1.9 * g, atol=1e-15)

    def test_missing_grad(self):
        with pytest.raises(ContractError):
            sgd_step({"p": Tensor([1.0], requires_grad=True)}, SgdMomentumState(0.1))

    @pytest.mark.parametrize("lr,m", [(0.0, 0.9), (0.1, 1.0), (0.1, -0.1)])
    def test_bad_hyperparameters(self, lr, m):
        with pytest.raises(ConfigError):
            SgdMomentumState(lr, m)

    def test_weight_decay_adds_to_gradient(self):
        p = Tensor([2.0], requires_grad=True)
        p.grad = np.array([1.0])
        sgd_step({"p": p}, SgdMomentumState(0.1, 0.0, weight_decay=0.5))
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * (1.0 + 1.0)])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    a = ad.relu(ad.conv2d(Tensor(x), Tensor(k), padding=1)).data
    b = ad.relu(ad.conv2d(Tensor(x), Tensor(k), padding=1)).data
    assert a.tobytes() == b.tobytes()
