import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambapeft import autodiff as ad
from mambapeft.autodiff import Tensor, finite_diff_check
from mambapeft.errors import NumericalError, ShapeError


def leaf(x):
    return Tensor(x, requires_grad=True)


def brute_conv(x, w, b):
    T, L = x.shape
    K = w.shape[0]
    out = np.zeros((T, L))
    for t in range(T):
        for l in range(L):
            acc = b[l]
            for k in range(K):
                src = t - K + 1 + k
                if src >= 0:
                    acc += w[k, l] * x[src, l]
            out[t, l] = acc
    return out


def brute_scan(a_bar, b_bar, c, x, d):
    T, L, N = a_bar.shape
    h = np.zeros((L, N))
    ys = np.zeros((T, L))
    for t in range(T):
        for l in range(L):
            for n in range(N):
                h[l, n] = a_bar[t, l, n] * h[l, n] + b_bar[t, l, n] * x[t, l]
            ys[t, l] = sum(h[l, n] * c[t, n] for n in range(N)) + d[l] * x[t, l]
    return ys


def stepwise_scan(a_bar, b_bar, c, x, d):
    """The same recurrence recorded one time step at a time from primitive ops."""
    T, L, N = a_bar.shape
    h = Tensor(np.zeros((L, N)))
    rows = []
    for t in range(T):
        a_t = ad.reshape(ad.take(a_bar, [t], axis=0), (L, N))
        b_t = ad.reshape(ad.take(b_bar, [t], axis=0), (L, N))
        x_t = ad.reshape(ad.take(x, [t], axis=0), (L, 1))
        c_t = ad.reshape(ad.take(c, [t], axis=0), (1, N))
        h = a_t * h + b_t * x_t
        y_t = ad.sum(h * c_t, axis=1) + d * ad.reshape(x_t, (L,))
        rows.append(ad.reshape(y_t, (1, L)))
    return ad.concat(rows, axis=0)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0], [7.0]])

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_backward_scalar(self):
        w, x = leaf([[2.0]]), leaf([[3.0]])
        ad.backward(ad.sum(ad.matmul(w, x)))
        assert w.grad.tolist() == [[3.0]]
        assert x.grad.tolist() == [[2.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_batched_gradients(self):
        rng = np.random.default_rng(0)
        a = leaf(rng.normal(size=(2, 3, 4)))
        b = Tensor(rng.normal(size=(4, 5)))
        assert finite_diff_check(lambda t: ad.sum(ad.matmul(t, b) * ad.matmul(t, b)), a) < 1e-6
        assert finite_diff_check(lambda t: ad.sum(ad.exp(ad.matmul(a, t) * 0.1)), b) < 1e-6


class TestElementwise:
    def test_softplus_zero(self):
        assert ad.softplus(Tensor(0.0)).item() == pytest.approx(0.6931471805599453, abs=1e-15)

    def test_silu_zero(self):
        assert ad.silu(Tensor(0.0)).item() == 0.0

    def test_exp_backward(self):
        x = leaf(1.0)
        ad.backward(ad.exp(x))
        assert x.grad.item() == pytest.approx(2.718281828, abs=1e-9)

    def test_softplus_large_inputs_stay_finite(self):
        x = np.linspace(-700, 700, 2001)
        out = ad.softplus(Tensor(x)).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[x > 30], x[x > 30])
        assert np.all(out >= 0)

    def test_softplus_branches_agree_with_direct_formula(self):
        x = np.linspace(-30, 30, 601)
        np.testing.assert_allclose(ad.softplus(Tensor(x)).data, np.log1p(np.exp(x)), rtol=1e-9)

    @pytest.mark.parametrize("kind", ["exp", "neg", "softplus", "silu", "sigmoid"])
    def test_unary_gradients(self, kind):
        x = leaf(np.linspace(-2, 2, 9))
        assert finite_diff_check(lambda t: ad.sum(ad.elementwise(kind, t)), x) < 1e-6

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary_broadcast_gradients(self, kind):
        rng = np.random.default_rng(1)
        a = leaf(rng.normal(size=(3, 4, 1)))
        b = leaf(rng.normal(size=(1, 4, 5)))
        f = lambda: ad.sum(ad.elementwise(kind, a, b) * ad.elementwise(kind, a, b))
        assert finite_diff_check(lambda t: f(), a) < 1e-6
        assert finite_diff_check(lambda t: f(), b) < 1e-6

    def test_rank_promotion_rejected(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_incompatible_sizes_rejected(self):
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ad.elementwise("tanh", Tensor(1.0))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_debug_mode_raises_on_nonfinite(self):
        ad.set_debug(True)
        try:
            with pytest.raises(NumericalError):
                ad.exp(Tensor(1000.0))
        finally:
            ad.set_debug(False)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_release_mode_propagates(self):
        assert math.isinf(ad.exp(Tensor(1000.0)).item())


class TestConv:
    def test_identity_kernel(self):
        x = np.arange(6.0).reshape(3, 2)
        out = ad.causal_depthwise_conv1d(Tensor(x), Tensor(np.ones((1, 2))), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_convolution(self):
        out = ad.causal_depthwise_conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 3.0, 5.0])

    def test_zero_kernel(self):
        x = np.random.default_rng(0).normal(size=(4, 3))
        out = ad.causal_depthwise_conv1d(Tensor(x), Tensor(np.zeros((3, 3))), Tensor(np.zeros(3)))
        assert np.all(out.data == 0)

    def test_kernel_longer_than_sequence(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(5, 3)), rng.normal(size=3)
        out = ad.causal_depthwise_conv1d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, brute_conv(x, w, b), rtol=1e-13)

    def test_matches_brute_force_and_is_batched(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 7, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
        out = ad.causal_depthwise_conv1d(Tensor(x), Tensor(w), Tensor(b))
        for i in range(2):
            np.testing.assert_allclose(out.data[i], brute_conv(x[i], w, b), rtol=1e-13)

    def test_empty_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.causal_depthwise_conv1d(Tensor(np.ones((3, 2))), Tensor(np.ones((0, 2))), Tensor(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x, w, b = leaf(rng.normal(size=(2, 5, 3))), leaf(rng.normal(size=(3, 3))), leaf(rng.normal(size=3))
        f = lambda: ad.sum(ad.silu(ad.causal_depthwise_conv1d(x, w, b)))
        for t in (x, w, b):
            assert finite_diff_check(lambda _: f(), t) < 1e-6


class TestTimeOps:
    def test_insert_zero_tokens_is_noop(self):
        seq = Tensor(np.arange(10.0).reshape(5, 2))
        out = ad.insert_time(seq, Tensor(np.zeros((0, 2))), [])
        np.testing.assert_array_equal(out.data, seq.data)

    def test_insert_then_drop_roundtrip(self):
        seq = Tensor(np.arange(10.0).reshape(5, 2))
        out = ad.insert_time(seq, Tensor(np.full((2, 2), -1.0)), [0, 1])
        assert out.shape == (7, 2)
        np.testing.assert_array_equal(ad.drop_time(out, [0, 1]).data, seq.data)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 5), st.integers(0, 10_000))
    def test_roundtrip_any_positions(self, T, n, seed):
        rng = np.random.default_rng(seed)
        pos = np.sort(rng.choice(T + n, size=n, replace=False))
        seq = Tensor(rng.normal(size=(2, T, 3)))
        out = ad.insert_time(seq, Tensor(rng.normal(size=(n, 3))), pos)
        assert out.shape == (2, T + n, 3)
        np.testing.assert_array_equal(ad.drop_time(out, pos).data, seq.data)

    def test_dropped_positions_get_no_gradient_from_loss(self):
        seq = leaf(np.ones((4, 2)))
        tok = leaf(np.ones((2, 2)))
        out = ad.drop_time(ad.insert_time(seq, tok, [1, 3]), [1, 3])
        ad.backward(ad.sum(out * out))
        assert np.all(tok.grad == 0)
        np.testing.assert_array_equal(seq.grad, 2 * np.ones((4, 2)))

    def test_token_gradient_sums_over_batch(self):
        seq = leaf(np.zeros((3, 2, 2)))
        tok = leaf(np.ones((1, 2)))
        ad.backward(ad.sum(ad.insert_time(seq, tok, [2])))
        np.testing.assert_array_equal(tok.grad, [[3.0, 3.0]])

    def test_out_of_range_positions(self):
        with pytest.raises(ShapeError):
            ad.insert_time(Tensor(np.ones((3, 2))), Tensor(np.ones((1, 2))), [4])
        with pytest.raises(ShapeError):
            ad.drop_time(Tensor(np.ones((3, 2))), [3])
        with pytest.raises(ShapeError):
            ad.drop_time(Tensor(np.ones((3, 2))), [1, 1])

    def test_concat_time(self):
        a, b = Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3)))
        assert ad.concat_time(a, b).shape == (3, 3)


class TestScan:
    def test_hand_recurrence(self):
        a = Tensor(np.full((2, 1, 1), 0.5))
        b = Tensor(np.ones((2, 1, 1)))
        y, h = ad.selective_scan(a, b, Tensor(np.ones((2, 1))), Tensor(np.ones((2, 1))), Tensor([0.0]), return_states=True)
        np.testing.assert_array_equal(h.ravel(), [1.0, 1.5])
        np.testing.assert_array_equal(y.data.ravel(), [1.0, 1.5])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        T, L, N = 5, 3, 2
        args = [rng.uniform(0, 1, (T, L, N)), rng.normal(size=(T, L, N)), rng.normal(size=(T, N)), rng.normal(size=(T, L)), rng.normal(size=L)]
        out = ad.selective_scan(*[Tensor(a) for a in args])
        np.testing.assert_allclose(out.data, brute_scan(*args), rtol=1e-12)

    def test_gradients_match_stepwise_recording(self):
        rng = np.random.default_rng(6)
        T, L, N = 4, 3, 2
        ts = [leaf(rng.uniform(0.2, 0.9, (T, L, N))), leaf(rng.normal(size=(T, L, N))), leaf(rng.normal(size=(T, N))), leaf(rng.normal(size=(T, L))), leaf(rng.normal(size=L))]
        w = rng.normal(size=(T, L))
        ad.backward(ad.sum(ad.selective_scan(*ts) * w))
        fused = [t.grad.copy() for t in ts]
        for t in ts:
            t.grad = None
        ad.backward(ad.sum(stepwise_scan(*ts) * w))
        for g_fused, t in zip(fused, ts):
            np.testing.assert_allclose(g_fused, t.grad, rtol=1e-12, atol=1e-14)

    def test_gradients_finite_difference(self):
        rng = np.random.default_rng(7)
        T, L, N = 2, 2, 3
        ts = [leaf(rng.uniform(0.2, 0.9, (2, T, L, N))), leaf(rng.normal(size=(2, T, L, N))), leaf(rng.normal(size=(2, T, N))), leaf(rng.normal(size=(2, T, L))), leaf(rng.normal(size=L))]
        f = lambda: ad.sum(ad.softplus(ad.selective_scan(*ts)))
        for t in ts:
            assert finite_diff_check(lambda _: f(), t) < 1e-6


def unfused_s6(dt, A, Bm, c, x, d):
    dt4 = ad.reshape(dt, dt.shape + (1,))
    A4 = ad.reshape(A, (1,) * (dt4.ndim - 2) + A.shape)
    a_bar = ad.exp(ad.neg(dt4 * A4))
    b_bar = dt4 * ad.reshape(Bm, Bm.shape[:-1] + (1, Bm.shape[-1]))
    return ad.selective_scan(a_bar, b_bar, c, x, d)


class TestS6Scan:
    def _args(self, seed, lead=(2,), T=5, L=3, N=2):
        rng = np.random.default_rng(seed)
        return [
            leaf(rng.uniform(0.05, 1.0, lead + (T, L))),
            leaf(rng.uniform(0.5, 3.0, (L, N))),
            leaf(rng.normal(size=lead + (T, N))),
            leaf(rng.normal(size=lead + (T, N))),
            leaf(rng.normal(size=lead + (T, L))),
            leaf(rng.normal(size=L)),
        ]

    @pytest.mark.parametrize("lead", [(), (3,)])
    def test_matches_unfused(self, lead):
        ts = self._args(0, lead)
        w = np.random.default_rng(1).normal(size=ts[4].shape)
        fused = ad.s6_scan(*ts)
        ad.backward(ad.sum(fused * w))
        g_fused = [t.grad.copy() for t in ts]
        for t in ts:
            t.grad = None
        ref = unfused_s6(*ts)
        ad.backward(ad.sum(ref * w))
        np.testing.assert_allclose(fused.data, ref.data, rtol=1e-12, atol=1e-14)
        for g, t in zip(g_fused, ts):
            np.testing.assert_allclose(g, t.grad, rtol=1e-10, atol=1e-12)

    def test_finite_difference(self):
        ts = self._args(2, T=3)
        f = lambda _: ad.sum(ad.softplus(ad.s6_scan(*ts)))
        for t in ts:
            assert finite_diff_check(f, t) < 1e-6

    def test_no_skip(self):
        ts = self._args(3)
        y, states = ad.s6_scan(*ts[:5], None, return_states=True)
        np.testing.assert_allclose(y.data, np.einsum("btln,btn->btl", states, ts[3].data), rtol=1e-13)

    def test_shape_error(self):
        ts = self._args(4)
        with pytest.raises(ShapeError, match="s6 shapes"):
            ad.s6_scan(ts[0], ts[1], ts[2], ts[3].data[..., :1], ts[4])


class TestRmsNorm:
    def test_hand_value(self):
        # rms of [3, 4] is sqrt(12.5)
        y = ad.rms_norm(Tensor(np.array([[3.0, 4.0]])), eps=0.0)
        np.testing.assert_allclose(y.data, [[3 / math.sqrt(12.5), 4 / math.sqrt(12.5)]], rtol=1e-15)

    @given(st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_unit_rms(self, seed):
        x = np.random.default_rng(seed).normal(size=(3, 5, 6)) * 50
        y = ad.rms_norm(Tensor(x), eps=0.0).data
        np.testing.assert_allclose(np.sqrt(np.mean(y * y, axis=-1)), 1.0, rtol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x = leaf(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(2, 3, 4))
        assert finite_diff_check(lambda t: ad.sum(ad.rms_norm(t) * w), x) < 1e-6

    def test_scale_invariant(self):
        x = np.random.default_rng(2).normal(size=(4, 7))
        a = ad.rms_norm(Tensor(x), eps=0.0).data
        b = ad.rms_norm(Tensor(x * 1e3), eps=0.0).data
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        loss = ad.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2])
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_hand_gradient(self):
        z = leaf([[0.0, 0.0]])
        ad.backward(ad.softmax_cross_entropy(z, [0]))
        np.testing.assert_allclose(z.grad, [[-0.5, 0.5]], atol=1e-15)

    def test_monotone_in_margin(self):
        losses = [ad.softmax_cross_entropy(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (0, 1, 5, 20, 100, 700)]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-300 or losses[-1] == 0.0

    def test_stable_at_extremes(self):
        loss = ad.softmax_cross_entropy(Tensor([[700.0, -700.0]]), [1])
        assert loss.item() == pytest.approx(1400.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ad.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradient_check(self):
        z = leaf(np.random.default_rng(8).normal(size=(4, 3)))
        assert finite_diff_check(lambda t: ad.softmax_cross_entropy(t, [0, 2, 1, 1]), z) < 1e-6


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        ad.backward(x * x)
        assert x.grad.item() == 6.0

    def test_independent_tensor_has_zero_grad(self):
        x, y = leaf(2.0), leaf(5.0)
        y.zero_grad()
        ad.backward(x * x)
        assert y.grad.item() == 0.0

    def test_accumulates(self):
        x = leaf([1.0, -2.0])
        loss = ad.sum(ad.exp(x) * x)
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeError):
            ad.backward(leaf([1.0, 2.0]) * 2.0)

    def test_diamond_graph(self):
        x = leaf(2.0)
        y = x * x
        ad.backward(y * y + y)
        assert x.grad.item() == pytest.approx(4 * 8 + 4)

    def test_graph_records_in_execution_order(self):
        x = leaf([1.0, 2.0])
        y = ad.exp(x)
        z = ad.silu(y)
        loss = ad.sum(z * y)
        g = ad.Graph.from_output(loss)
        assert g.ops() == ["exp", "silu", "mul", "sum"]
        seqs = [r.node.seq for r in g.records]
        assert seqs == sorted(seqs)

    def test_no_grad_records_nothing(self):
        x = leaf(1.0)
        with ad.no_grad():
            y = ad.exp(x)
        assert y.node is None and not y.requires_grad

    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            a = Tensor(rng.normal(size=(3, 4)))
            w = Tensor(rng.normal(size=(4, 2)))
            return ad.softplus(ad.matmul(a, w)).data

        np.testing.assert_array_equal(run(), run())


class TestFiniteDiff:
    def test_sum_is_exact(self):
        x = leaf(np.random.default_rng(9).normal(size=5))
        assert finite_diff_check(lambda t: ad.sum(t), x) < 1e-10

    def test_softplus_grid(self):
        x = leaf(np.linspace(-2, 2, 21))
        assert finite_diff_check(lambda t: ad.sum(ad.softplus(t)), x) < 1e-6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_reports_nan_as_failure(self):
        x = leaf([1000.0])
        assert finite_diff_check(lambda t: ad.sum(ad.exp(t) - ad.exp(t)), x) == float("inf")

    def test_restores_tensor(self):
        x = Tensor([1.0, 2.0])
        finite_diff_check(lambda t: ad.sum(t * t), x)
        assert not x.requires_grad and x.grad is None
        np.testing.assert_array_equal(x.data, [1.0, 2.0])
