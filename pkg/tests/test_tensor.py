"""Autodiff substrate: forward oracles, gradient checks, optimizer behavior."""

import numpy as np
import pytest
from fdcheck import check_grads

from rangeloop import errors
from rangeloop import tensor as T
from rangeloop.optim import Adam


class TestMatmul:
    def test_identity(self):
        eye = T.Tensor(np.eye(2))
        m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(eye, m).data, m.data)

    def test_hand_dot(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[11.0]])

    def test_zero_annihilates(self):
        rng = np.random.default_rng(42)
        z = T.Tensor(np.zeros((2, 3)))
        r = T.Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(T.matmul(z, r).data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((4, 5)))
        with pytest.raises(errors.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(a, b)


class TestConvVertical:
    def test_hand_window_sum(self):
        x = T.Tensor(np.ones((1, 1, 4, 3)))
        w = T.Tensor(np.ones((1, 1, 2, 1)) / 2.0)
        out = T.conv_vertical(x, w, stride_h=2)
        np.testing.assert_allclose(out.data, np.ones((1, 1, 2, 3)))

    def test_identity_kernel(self):
        rng = np.random.default_rng(42)
        x = T.Tensor(rng.standard_normal((2, 3, 5, 4)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv_vertical(x, T.Tensor(w), stride_h=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_column_shift_passes_through(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((1, 2, 6, 9))
        w = rng.standard_normal((4, 2, 3, 1))
        base = T.conv_vertical(T.Tensor(x), T.Tensor(w), stride_h=2).data
        for s in (1, 3, 7):
            shifted = T.conv_vertical(
                T.Tensor(np.roll(x, s, axis=3)), T.Tensor(w), stride_h=2
            ).data
            np.testing.assert_array_equal(shifted, np.roll(base, s, axis=3))

    def test_kernel_taller_than_input_rejected(self):
        x = T.Tensor(np.zeros((1, 1, 3, 2)))
        w = T.Tensor(np.zeros((1, 1, 4, 1)))
        with pytest.raises(errors.ConfigError):
            T.conv_vertical(x, w, stride_h=1)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(42)
        for k, s in [(1, 1), (2, 2), (3, 1), (3, 2)]:
            x = rng.standard_normal((2, 3, 7, 4))
            w = rng.standard_normal((2, 3, k, 1))
            out = T.conv_vertical(T.Tensor(x), T.Tensor(w), stride_h=s).data
            h_out = (7 - k) // s + 1
            want = np.zeros((2, 2, h_out, 4))
            for i in range(h_out):
                for j in range(k):
                    want[:, :, i, :] += np.einsum(
                        "oc,bcw->bow", w[:, :, j, 0], x[:, :, i * s + j, :]
                    )
            np.testing.assert_allclose(out, want, atol=1e-12)


class TestConv1dCircular:
    def test_identity_width_one(self):
        x = T.Tensor([[[1.0, 0.0, 0.0, 0.0]]])
        w = T.Tensor([[[1.0]]])
        np.testing.assert_array_equal(T.conv1d_circular(x, w).data, x.data)

    def test_centered_tap_is_identity(self):
        x = T.Tensor([[[1.0, 0.0, 0.0, 0.0]]])
        w = T.Tensor([[[0.0, 1.0, 0.0]]])
        np.testing.assert_array_equal(
            T.conv1d_circular(x, w).data, [[[1.0, 0.0, 0.0, 0.0]]]
        )

    def test_leading_tap_wraps(self):
        x = T.Tensor([[[1.0, 0.0, 0.0, 0.0]]])
        w = T.Tensor([[[1.0, 0.0, 0.0]]])
        np.testing.assert_array_equal(
            T.conv1d_circular(x, w).data, [[[0.0, 0.0, 0.0, 1.0]]]
        )

    def test_commutes_with_rotation(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 3, 8))
        w = rng.standard_normal((4, 3, 5))
        base = T.conv1d_circular(T.Tensor(x), T.Tensor(w)).data
        for s in (1, 3, 5):
            shifted = T.conv1d_circular(
                T.Tensor(np.roll(x, s, axis=2)), T.Tensor(w)
            ).data
            np.testing.assert_allclose(shifted, np.roll(base, s, axis=2), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(errors.ConfigError):
            T.conv1d_circular(T.Tensor(np.zeros((1, 1, 4))), T.Tensor(np.zeros((1, 1, 2))))

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(42)
        for k in (1, 3, 5):
            x = rng.standard_normal((2, 3, 7))
            w = rng.standard_normal((2, 3, k))
            out = T.conv1d_circular(T.Tensor(x), T.Tensor(w)).data
            r = (k - 1) // 2
            want = np.zeros((2, 2, 7))
            for m in range(7):
                for j in range(k):
                    want[:, :, m] += np.einsum(
                        "oc,bc->bo", w[:, :, j], x[:, :, (m + r - j) % 7]
                    )
            np.testing.assert_allclose(out, want, atol=1e-12)


class TestActivations:
    def test_silu_at_zero(self):
        x = T.Tensor([0.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.silu(x))
        T.backward(loss, tape)
        assert loss.item() == 0.0
        np.testing.assert_allclose(x.grad, [0.5])

    def test_softplus_closed_forms(self):
        out = T.softplus(T.Tensor([0.0, 50.0]))
        np.testing.assert_allclose(out.data[0], np.log(2.0), atol=1e-12)
        assert abs(out.data[1] - 50.0) < 1e-12

    def test_softplus_no_overflow(self):
        out = T.softplus(T.Tensor([1000.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1000.0])

    def test_sigmoid_symmetry(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal(50) * 20.0
        s = T.sigmoid(T.Tensor(x)).data
        s_neg = T.sigmoid(T.Tensor(-x)).data
        np.testing.assert_allclose(s + s_neg, np.ones(50), atol=1e-12)

    def test_relu_halves_plane(self):
        out = T.relu(T.Tensor([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 3.0])

    def test_dispatch_by_name(self):
        x = T.Tensor([1.0])
        np.testing.assert_array_equal(
            T.activation(x, "silu").data, T.silu(x).data
        )
        with pytest.raises(errors.ContractError):
            T.activation(x, "tanh")


class TestBackward:
    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x)
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_sum_of_squares(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(errors.ContractError):
            T.backward(y, tape)

    def test_fanout_accumulates_exactly(self):
        x = T.Tensor([1.5, -2.0, 0.25], requires_grad=True)

        with T.Tape() as tape:
            loss = T.add(T.tsum(T.mul(x, x)), T.tsum(T.mul(x, T.Tensor([3.0, 3.0, 3.0]))))
        T.backward(loss, tape)
        combined = x.grad.copy()

        x.zero_grad()
        with T.Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        T.backward(loss, tape)
        gf = x.grad.copy()

        x.zero_grad()
        with T.Tape() as tape:
            loss = T.tsum(T.mul(x, T.Tensor([3.0, 3.0, 3.0])))
        T.backward(loss, tape)
        gg = x.grad.copy()

        np.testing.assert_array_equal(combined, gf + gg)

    def test_no_tape_records_nothing(self):
        x = T.Tensor([1.0], requires_grad=True)
        y = T.mul(x, x)
        assert y.requires_grad is False


class TestGradientChecks:
    """Analytic vs central-difference gradients for every differentiable op."""

    def test_elementwise_binary(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        pos = np.abs(rng.standard_normal((3, 4))) + 0.5
        check_grads(T.add, [a, b], rng)
        check_grads(T.sub, [a, b], rng)
        check_grads(T.mul, [a, b], rng)
        check_grads(T.div, [a, pos], rng)

    def test_bias_and_scalar_broadcast(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((2, 3, 4))
        bias = rng.standard_normal(4)
        scalar = np.array(0.7)
        check_grads(T.add, [a, bias], rng)
        check_grads(T.mul, [a, bias], rng)
        check_grads(T.mul, [a, scalar], rng)
        check_grads(T.sub, [scalar, a], rng)

    def test_unary(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((4, 5))
        pos = np.abs(x) + 0.5
        check_grads(T.neg, [x], rng)
        check_grads(T.exp, [x], rng)
        check_grads(T.log, [pos], rng)
        check_grads(T.sqrt, [pos], rng)
        check_grads(lambda t: T.pow_scalar(t, 1.7), [pos], rng)
        check_grads(lambda t: T.pow_scalar(t, 2.0), [x], rng)

    def test_activations(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((4, 5)) * 2.0
        away_from_kink = np.where(np.abs(x) < 0.1, x + 0.3, x)
        check_grads(T.sigmoid, [x], rng)
        check_grads(T.silu, [x], rng)
        check_grads(T.softplus, [x], rng)
        check_grads(T.relu, [away_from_kink], rng)

    def test_contractions(self):
        rng = np.random.default_rng(42)
        check_grads(
            T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))], rng
        )
        check_grads(
            lambda a, b: T.einsum2("ij,jk->ik", a, b),
            [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
            rng,
        )
        check_grads(
            lambda a, b: T.einsum2("bij,jk->bik", a, b),
            [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))],
            rng,
        )
        check_grads(
            lambda a, b: T.einsum2("bi,bi->b", a, b),
            [rng.standard_normal((4, 3)), rng.standard_normal((4, 3))],
            rng,
        )
        check_grads(
            T.linear,
            [
                rng.standard_normal((2, 3, 4)),
                rng.standard_normal((4, 5)),
                rng.standard_normal(5),
            ],
            rng,
        )

    def test_einsum2_rejects_dangling_index(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((3, 4)))
        with pytest.raises(errors.ShapeError):
            T.einsum2("ij,jk->i", a, b)

    def test_reductions(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((3, 4, 5))
        check_grads(T.tsum, [x], rng)
        check_grads(lambda t: T.tsum(t, axis=1), [x], rng)
        check_grads(lambda t: T.tsum(t, axis=(0, 2)), [x], rng)
        check_grads(lambda t: T.tsum(t, axis=1, keepdims=True), [x], rng)
        check_grads(lambda t: T.tmean(t, axis=2), [x], rng)
        check_grads(lambda t: T.sum_positions(t, axis=1), [x], rng)

    def test_extrema_reductions(self):
        rng = np.random.default_rng(42)
        # distinct entries keep the max/min subgradient away from ties
        x = rng.permutation(60).astype(float).reshape(3, 4, 5) * 0.37
        check_grads(lambda t: T.tmax(t, axis=1), [x], rng)
        check_grads(lambda t: T.tmin(t, axis=2), [x], rng)
        check_grads(T.tmax, [x], rng)
        check_grads(T.tmin, [x], rng)

    def test_extrema_route_to_first_winner_on_ties(self):
        x = T.Tensor([[2.0, 5.0, 5.0]], requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.tmax(x, axis=1))
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_shape_manipulation(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((3, 4, 5))
        check_grads(lambda t: T.reshape(t, (12, 5)), [x], rng)
        check_grads(lambda t: T.transpose(t, (2, 0, 1)), [x], rng)
        check_grads(lambda t: T.flip(t, axis=1), [x], rng)
        check_grads(lambda t: T.roll(t, 2, axis=2), [x], rng)
        check_grads(lambda t: T.narrow(t, 1, 1, 2), [x], rng)
        check_grads(lambda t: T.stride2(t, 2, 0), [x], rng)
        check_grads(lambda t: T.stride2(t, 2, 1), [x], rng)
        check_grads(lambda t: T.broadcast_to(t, (2, 3, 4, 5)), [x], rng)
        check_grads(
            lambda t: T.broadcast_to(t, (3, 4, 5)), [rng.standard_normal((3, 1, 5))], rng
        )
        check_grads(lambda a, b: T.concat([a, b], axis=1), [x, x + 1.0], rng)
        check_grads(lambda a, b: T.stack([a, b], axis=0), [x, x + 1.0], rng)
        check_grads(
            lambda a, b: T.interleave2(a, b, axis=1),
            [rng.standard_normal((2, 4)), rng.standard_normal((2, 3))],
            rng,
        )

    def test_interleave2_inverts_stride2(self):
        rng = np.random.default_rng(42)
        for m in (4, 5, 7):
            x = rng.standard_normal((2, m))
            even = T.stride2(T.Tensor(x), 1, 0)
            odd = T.stride2(T.Tensor(x), 1, 1)
            back = T.interleave2(even, odd, axis=1)
            np.testing.assert_array_equal(back.data, x)

    def test_structured_kernels(self):
        rng = np.random.default_rng(42)
        check_grads(
            lambda x, w: T.conv_vertical(x, w, stride_h=2),
            [rng.standard_normal((2, 3, 6, 4)), rng.standard_normal((4, 3, 2, 1))],
            rng,
        )
        check_grads(
            lambda x, w: T.conv_vertical(x, w, stride_h=1),
            [rng.standard_normal((1, 2, 5, 3)), rng.standard_normal((2, 2, 3, 1))],
            rng,
        )
        check_grads(
            T.conv1d_circular,
            [rng.standard_normal((2, 3, 8)), rng.standard_normal((4, 3, 3))],
            rng,
        )
        check_grads(
            T.conv1d_circular,
            [rng.standard_normal((1, 2, 5)), rng.standard_normal((2, 2, 5))],
            rng,
        )
        x = rng.permutation(42).astype(float).reshape(2, 3, 7) * 0.11
        check_grads(lambda t: T.maxpool1d_circular(t, 3), [x], rng)

    def test_normalizers(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 5, 6))
        check_grads(
            T.layer_norm,
            [x, rng.standard_normal(6), rng.standard_normal(6)],
            rng,
        )
        check_grads(T.softmax, [x], rng)
        check_grads(lambda t: T.softmax(t, axis=1), [x], rng)
        check_grads(T.l2_normalize, [x], rng)
        check_grads(lambda t: T.l2_normalize(t, axis=1), [x], rng)

    def test_where_mask(self):
        rng = np.random.default_rng(42)
        mask = rng.random((3, 4)) > 0.5
        check_grads(
            lambda a, b: T.where_mask(mask, a, b),
            [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))],
            rng,
        )


class TestL2NormalizeZeroRows:
    def test_zero_rows_stay_zero_with_zero_grad(self):
        x = T.Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
        with T.Tape() as tape:
            y = T.l2_normalize(x)
            loss = T.tsum(y)
        T.backward(loss, tape)
        np.testing.assert_allclose(y.data[0], [0.6, 0.8], atol=1e-15)
        np.testing.assert_array_equal(y.data[1], [0.0, 0.0])
        np.testing.assert_array_equal(x.grad[1], [0.0, 0.0])


class TestSumPositions:
    def test_invariant_to_axis_permutation_bitwise(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((3, 17, 5))
        base = T.sum_positions(T.Tensor(x), axis=1).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(17)
            out = T.sum_positions(T.Tensor(x[:, perm, :]), axis=1).data
            np.testing.assert_array_equal(out, base)

    def test_matches_plain_sum(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((2, 9, 3))
        np.testing.assert_allclose(
            T.sum_positions(T.Tensor(x), axis=1).data, x.sum(axis=1), atol=1e-12
        )


class TestLayerNorm:
    def test_normalizes_rows(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((4, 8)) * 3.0 + 1.0
        out = T.layer_norm(
            T.Tensor(x), T.ones(8), T.zeros(8), eps=0.0
        ).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), np.ones(4), atol=1e-9)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((5, 7)) * 30.0
        out = T.softmax(T.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(5), atol=1e-12)
        assert (out > 0).all()


class TestAdam:
    def test_first_step_closed_form(self):
        p = T.Tensor([1.0], requires_grad=True)
        opt = Adam({"p": p}, lr=5e-6)
        p.grad = np.array([1.0])
        opt.step()
        # bias-corrected m-hat = v-hat = 1 on step one, so delta = lr/(1+eps)
        np.testing.assert_allclose(p.data, [1.0 - 5e-6 / (1.0 + 1e-8)], atol=1e-18)
        assert p.grad is None

    def test_zero_grad_leaves_parameter(self):
        p = T.Tensor([2.5], requires_grad=True)
        opt = Adam({"p": p})
        p.grad = np.array([0.0])
        opt.step()
        np.testing.assert_array_equal(p.data, [2.5])

    def test_missing_grad_names_parameter(self):
        p = T.Tensor([1.0], requires_grad=True)
        opt = Adam({"w.bias": p})
        with pytest.raises(errors.ContractError, match="w.bias"):
            opt.step()

    def test_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            p = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
            opt = Adam({"p": p}, lr=1e-3)
            for _ in range(20):
                with T.Tape() as tape:
                    loss = T.tsum(T.mul(p, p))
                T.backward(loss, tape)
                opt.step()
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_step_counter_advances(self):
        p = T.Tensor([1.0], requires_grad=True)
        opt = Adam({"p": p})
        for want in (1, 2, 3):
            p.grad = np.array([1.0])
            opt.step()
            assert opt.t == want


class TestDeterminism:
    def test_same_seed_bit_identical_forward_and_grads(self):
        def run():
            rng = np.random.default_rng(11)
            x = T.Tensor(rng.standard_normal((2, 3, 8)), requires_grad=True)
            w = T.Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
            with T.Tape() as tape:
                y = T.silu(T.conv1d_circular(x, w))
                loss = T.tsum(T.mul(y, y))
            T.backward(loss, tape)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        a, b = run(), run()
        for got, want in zip(a, b):
            np.testing.assert_array_equal(got, want)


class TestDtypeSwitch:
    def test_float32_path_roundtrip(self):
        T.set_default_dtype(np.float32)
        try:
            x = T.Tensor([1.0, 2.0])
            assert x.data.dtype == np.float32
        finally:
            T.set_default_dtype(np.float64)
        assert T.Tensor([1.0]).data.dtype == np.float64

    def test_rejects_integer_dtype(self):
        with pytest.raises(errors.ContractError):
            T.set_default_dtype(np.int32)
