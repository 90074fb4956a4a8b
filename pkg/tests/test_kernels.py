"""The numba kernels and their numpy fallbacks must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from liser import kernels as K


def test_im2col_col2im_bit_identical(rng):
    xp = rng.normal(size=(2, 3, 9, 8))
    a, b = K.nb_im2col(xp, 3, 3), K.np_im2col(xp, 3, 3)
    np.testing.assert_array_equal(a, b)
    cols = rng.normal(size=a.shape)
    np.testing.assert_array_equal(K.nb_col2im(cols, 2, 3, 9, 8, 3, 3), K.np_col2im(cols, 2, 3, 9, 8, 3, 3))


def test_col2im_is_adjoint_of_im2col(rng):
    xp = rng.normal(size=(1, 2, 6, 5))
    cols = rng.normal(size=(4 * 3, 2 * 3 * 3))
    lhs = np.sum(K.np_im2col(xp, 3, 3) * cols)
    rhs = np.sum(xp * K.np_col2im(cols, 1, 2, 6, 5, 3, 3))
    assert abs(lhs - rhs) < 1e-12


@pytest.mark.parametrize("pool", [(2, 2), (4, 2), (4, 1), (3, 3)])
def test_maxpool_parity(rng, pool):
    x = rng.normal(size=(2, 3, 11, 9))
    x[0, 0, :2, :2] = 1.0  # a tie
    out_a, arg_a = K.nb_maxpool_forward(x, *pool)
    out_b, arg_b = K.np_maxpool_forward(x, *pool)
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(arg_a, arg_b)
    g = rng.normal(size=out_a.shape)
    np.testing.assert_array_equal(K.nb_maxpool_backward(g, arg_a, 11, 9, *pool),
                                  K.np_maxpool_backward(g, arg_b, 11, 9, *pool))


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_parity(rng, training):
    x = rng.normal(1.0, 2.0, size=(3, 4, 5, 6))
    mu_a, var_a = K.nb_bn_stats(x)
    mu_b, var_b = K.np_bn_stats(x)
    np.testing.assert_allclose(mu_a, mu_b, rtol=1e-13)
    np.testing.assert_allclose(var_a, var_b, rtol=1e-12)
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    invstd = 1.0 / np.sqrt(var_b + 1e-5)
    xa, oa = K.nb_bn_apply(x, mu_b, invstd, gamma, beta)
    xb, ob = K.np_bn_apply(x, mu_b, invstd, gamma, beta)
    np.testing.assert_allclose(oa, ob, rtol=1e-13, atol=1e-14)
    g = rng.normal(size=x.shape)
    for a, b in zip(K.nb_bn_backward(g, xb, gamma, invstd, training),
                    K.np_bn_backward(g, xb, gamma, invstd, training)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


def test_lstm_cell_parity(rng):
    n, hid = 4, 5
    z = rng.normal(size=(n, 4 * hid))
    c_prev = rng.normal(size=(n, hid))
    ha, ca, ga = K.nb_lstm_cell_forward(z, c_prev)
    hb, cb, gb = K.np_lstm_cell_forward(z, c_prev)
    for a, b in ((ha, hb), (ca, cb), (ga, gb)):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)
    dh, dc = rng.normal(size=(n, hid)), rng.normal(size=(n, hid))
    for a, b in zip(K.nb_lstm_cell_backward(dh, dc, gb, cb, c_prev),
                    K.np_lstm_cell_backward(dh, dc, gb, cb, c_prev)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


def test_env_flag_selects_numpy_backend():
    code = "from liser import kernels; print(kernels.BACKEND, kernels.im2col is kernels.np_im2col)"
    env = dict(os.environ, LISER_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


def test_model_forward_same_under_both_backends(tmp_path):
    """A full student forward/backward gives matching loss and gradients with either backend."""
    code = (
        "import numpy as np\n"
        "from liser import tensor as T\n"
        "from liser.model import init_student, forward\n"
        "p = init_student(4, 3, seed=2)\n"
        "x = np.random.default_rng(0).normal(size=(3, 1, 64, 90))\n"
        "with T.Tape() as tape:\n"
        "    out = forward(p, x, 'train')\n"
        "    loss = T.tsum(out.sup * out.sup) + T.tsum(out.vd)\n"
        "g = tape.backward(loss, [p[n] for n in p.names()])\n"
        f"np.save(r'{tmp_path}/' + __import__('liser').kernels.BACKEND + '.npy',"
        " np.concatenate([[loss.data.item()]] + [a.ravel() for a in g]))\n"
    )
    for flag in ("1", "0"):
        subprocess.run([sys.executable, "-c", code], env=dict(os.environ, LISER_NUMBA=flag), check=True)
    a, b = np.load(tmp_path / "numba.npy"), np.load(tmp_path / "numpy.npy")
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
