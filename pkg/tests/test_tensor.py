"""Autodiff primitives: forward values against brute-force oracles, gradients against finite differences."""
import numpy as np
import pytest

from liser import tensor as T
from conftest import check_grads


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv_oracle(x, w, b):
    """Direct same-padded cross-correlation, one output cell at a time."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            ii, jj = i + u - ph, j + v - pw
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o, c, u, v] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def lstm_oracle(x, w_ih, w_hh, b_ih, b_hh):
    """Scalar loop over hidden units, one gate at a time."""
    steps, d = x.shape
    hid = w_hh.shape[1]
    h = [0.0] * hid
    c = [0.0] * hid
    hs = []
    for t in range(steps):
        pre = []
        for r in range(4 * hid):
            s = b_ih[r] + b_hh[r]
            for k in range(d):
                s += w_ih[r, k] * x[t, k]
            for k in range(hid):
                s += w_hh[r, k] * h[k]
            pre.append(s)
        new_h, new_c = [], []
        for u in range(hid):
            i = _sigmoid(pre[u])
            f = _sigmoid(pre[hid + u])
            g = np.tanh(pre[2 * hid + u])
            o = _sigmoid(pre[3 * hid + u])
            cu = f * c[u] + i * g
            new_c.append(cu)
            new_h.append(o * np.tanh(cu))
        h, c = new_h, new_c
        hs.append(list(h))
    return np.array(h), np.array(c), np.array(hs)


# --------------------------------------------------------------------- softmax

class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(np.zeros(4)).data, [0.25] * 4)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(np.array([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], rtol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=6)
        np.testing.assert_allclose(T.softmax(x + 1000.0).data, T.softmax(x).data, rtol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            T.softmax(np.array([0.0, np.nan]))
        with pytest.raises(ValueError):
            T.log_softmax(np.array([np.inf, 0.0]))


# ------------------------------------------------------------------------ conv

class TestConv2d:
    def test_all_ones(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1)).data
        assert out[0, 1, 1] == 9
        assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4

    def test_zero_kernel_gives_bias(self, rng):
        out = T.conv2d(rng.normal(size=(2, 5, 4)), np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5])).data
        for o, b in enumerate([1.0, -2.0, 0.5]):
            assert np.all(out[o] == b)

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(1, 8, 8))
        w = rng.normal(size=(3, 1, 3, 3))
        b = rng.normal(size=3)
        assert np.max(np.abs(T.conv2d(x, w, b).data - conv_oracle(x, w, b))) < 1e-12

    def test_rectangular_kernel_multichannel_batch(self, rng):
        x = rng.normal(size=(2, 3, 7, 5))
        w = rng.normal(size=(4, 3, 3, 1))
        b = rng.normal(size=4)
        out = T.conv2d(x, w, b).data
        for n in range(2):
            assert np.max(np.abs(out[n] - conv_oracle(x[n], w, b))) < 1e-12

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(rng.normal(size=(2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(rng.normal(size=(1, 4, 4)), np.ones((1, 1, 2, 3)), np.zeros(1))

    def test_grad(self, rng):
        x, w, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        r = rng.normal(size=(2, 3, 5, 4))
        check_grads(lambda x, w, b: T.tsum(T.conv2d(x, w, b) * r), [x, w, b])


# ------------------------------------------------------------------------ pool

class TestMaxPool:
    def test_2x2(self):
        assert T.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), (2, 2)).data.tolist() == [[[4.0]]]

    def test_remainder_dropped(self):
        x = np.array([[[1.0, 2.0, 3.0, 4.0, 100.0]]])
        out = T.maxpool2d(x, (1, 2))
        assert out.data.tolist() == [[[2.0, 4.0]]]
        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            loss = T.tsum(T.maxpool2d(xt, (1, 2)))
        (g,) = tape.backward(loss, [xt])
        assert g[0, 0, 4] == 0.0

    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_array_equal(T.maxpool2d(x, (1, 1)).data, x)

    def test_ties_go_to_first(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.maxpool2d(x, (2, 2)))
        (g,) = tape.backward(loss, [x])
        assert g[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 9, 7))
        out = T.maxpool2d(x, (4, 2)).data
        assert out.shape == (2, 3, 2, 3)
        for idx in np.ndindex(out.shape):
            n, c, i, j = idx
            assert out[idx] == x[n, c, 4 * i:4 * i + 4, 2 * j:2 * j + 2].max()

    def test_pool_larger_than_input(self):
        with pytest.raises(ValueError):
            T.maxpool2d(np.zeros((1, 2, 2)), (3, 1))

    def test_grad(self, rng):
        x = rng.normal(size=(2, 2, 6, 5))
        check_grads(lambda x: T.tsum(T.maxpool2d(x, (2, 2)) * T.maxpool2d(x, (2, 2))), [x])


# ------------------------------------------------------------------ batchnorm

class TestBatchNorm:
    def test_constant_input(self):
        out = T.batchnorm2d(np.full((2, 3, 2, 2), 5.0), np.ones(3), np.full(3, 0.3), training=True)
        np.testing.assert_allclose(out.data, 0.3, atol=1e-12)

    def test_eval_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = T.batchnorm2d(x, np.ones(3), np.zeros(3), False, np.zeros(3), np.ones(3))
        np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-14)

    def test_against_direct_statistics(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 3, 5, 6))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        rm, rv = np.zeros(3), np.ones(3)
        out = T.batchnorm2d(x, gamma, beta, True, rm, rv).data
        for c in range(3):
            vals = [x[n, c, i, j] for n in range(4) for i in range(5) for j in range(6)]
            m = len(vals)
            mu = sum(vals) / m
            var = sum((v - mu) ** 2 for v in vals) / m
            ref = gamma[c] * (x[:, c] - mu) / np.sqrt(var + 1e-5) + beta[c]
            assert np.max(np.abs(out[:, c] - ref)) < 1e-10
            assert abs(rm[c] - 0.1 * mu) < 1e-12
            assert abs(rv[c] - (0.9 + 0.1 * var * m / (m - 1))) < 1e-12

    def test_train_needs_two_values(self):
        with pytest.raises(ValueError):
            T.batchnorm2d(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), training=True)

    @pytest.mark.parametrize("training", [True, False])
    def test_grad(self, rng, training):
        x = rng.normal(size=(3, 2, 3, 4))
        r = rng.normal(size=x.shape)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)

        def build(x, g, b):
            return T.tsum(T.batchnorm2d(x, g, b, training, rm.copy(), rv.copy()) * r)

        check_grads(build, [x, rng.normal(size=2), rng.normal(size=2)], rtol=1e-5)


# ----------------------------------------------------------------------- lstm

class TestLSTM:
    def _params(self, rng, d, hid, scale=0.5):
        return (rng.normal(scale=scale, size=(4 * hid, d)), rng.normal(scale=scale, size=(4 * hid, hid)),
                rng.normal(scale=scale, size=4 * hid), rng.normal(scale=scale, size=4 * hid))

    def test_zero_weights(self, rng):
        h, st = T.lstm(rng.normal(size=(5, 3)), np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8), np.zeros(8))
        assert np.all(h.data == 0) and np.all(st.cs == 0)

    def test_single_step_manual(self, rng):
        x = rng.normal(size=(1, 3))
        w_ih, w_hh, b_ih, b_hh = self._params(rng, 3, 2)
        z = w_ih @ x[0] + b_ih + b_hh
        i, g, o = _sigmoid(z[0:2]), np.tanh(z[4:6]), _sigmoid(z[6:8])
        c = i * g
        h, st = T.lstm(x, w_ih, w_hh, b_ih, b_hh)
        np.testing.assert_allclose(h.data, o * np.tanh(c), atol=1e-15)
        np.testing.assert_allclose(st.cs[-1], c, atol=1e-15)  # f * c_prev vanishes from zero state

    def test_against_scalar_oracle(self, rng):
        x = rng.normal(size=(5, 4))
        params = self._params(rng, 4, 3)
        h, st = T.lstm(x, *params)
        h_ref, c_ref, hs_ref = lstm_oracle(x, *params)
        assert np.max(np.abs(h.data - h_ref)) < 1e-12
        assert np.max(np.abs(st.cs[-1] - c_ref)) < 1e-12
        assert np.max(np.abs(st.hs - hs_ref)) < 1e-12

    def test_batched_matches_single(self, rng):
        x = rng.normal(size=(3, 6, 4))
        params = self._params(rng, 4, 5)
        hb, _ = T.lstm(x, *params)
        for n in range(3):
            np.testing.assert_allclose(hb.data[n], T.lstm(x[n], *params)[0].data, rtol=1e-13, atol=1e-15)

    def test_shape_errors(self, rng):
        with pytest.raises(ValueError):
            T.lstm(np.zeros((0, 3)), *self._params(rng, 3, 2))
        with pytest.raises(ValueError):
            T.lstm(np.zeros((2, 4)), *self._params(rng, 3, 2))

    def test_grad(self, rng):
        x = rng.normal(size=(2, 4, 3))
        r = rng.normal(size=(2, 2))
        check_grads(lambda x, a, b, c, d: T.tsum(T.lstm(x, a, b, c, d)[0] * r),
                    [x, *self._params(rng, 3, 2)], rtol=1e-5)


# ------------------------------------------------------------------------ tape

class TestTape:
    def test_sum_gives_ones(self, rng):
        x = T.Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x)
        (g,) = tape.backward(loss, [x])
        np.testing.assert_array_equal(g, np.ones((3, 2)))

    def test_constant_loss_zero_grads(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(T.Tensor(np.ones(2)))
        (g,) = tape.backward(loss, [x])
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_fan_out_accumulates(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.tsum(x * x + x)
        (g,) = tape.backward(loss, [x])
        assert g[0] == 7.0

    def test_non_scalar_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(y, [x])

    def test_backward_without_forward(self):
        with pytest.raises(RuntimeError):
            T.Tape().backward(T.Tensor(np.array(1.0)), [])

    def test_nothing_recorded_outside_tape(self):
        x = T.Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            pass
        _ = T.tsum(x)
        assert tape.nodes == []

    def test_constants_not_recorded(self):
        with T.Tape() as tape:
            T.relu(T.Tensor(np.ones(2)))
        assert tape.nodes == []


# ---------------------------------------------------------- elementwise grads

def test_elementwise_grads(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    check_grads(lambda a, b: T.tsum(T.mul(T.add(a, b), T.sub(a, b)) * 0.5), [a, b])
    check_grads(lambda a: T.tsum(T.scale(T.relu(a), 3.0)), [a + 0.01 * np.sign(a)])
    check_grads(lambda a: T.tsum(T.log(T.tabs(a) + 0.5)), [a + 0.1 * np.sign(a)])
    check_grads(lambda a: T.mean(T.div_const(a, 7.0)), [a])


def test_shape_op_grads(rng):
    a = rng.normal(size=(2, 3, 4))
    r = rng.normal(size=(4, 6))
    check_grads(lambda a: T.tsum(T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)) * r), [a])
    check_grads(lambda a: T.tsum(T.take_rows(T.reshape(a, (6, 4)), np.array([0, 2, 2, 5])) * r[:4, :4]), [a])
    check_grads(lambda a: T.tsum(T.mean(a, axis=1) * r[:2, :4]), [a])


def test_matmul_linear_grads(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
    r = rng.normal(size=(5, 4))
    check_grads(lambda x, w, b: T.tsum(T.linear(x, w, b) * r), [x, w, b])
    check_grads(lambda x, m: T.tsum(T.matmul(x, m) * r), [x, rng.normal(size=(3, 4))])


def test_softmax_grads(rng):
    x = rng.normal(size=(3, 5))
    r = rng.normal(size=(3, 5))
    check_grads(lambda x: T.tsum(T.softmax(x) * r), [x])
    check_grads(lambda x: T.tsum(T.log_softmax(x) * r), [x])
