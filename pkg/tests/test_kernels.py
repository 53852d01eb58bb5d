import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import harvestnet
from harvestnet import _kernels
from harvestnet._kernels import compiled_backend, python_backend

needs_compiled = pytest.mark.skipif(compiled_backend is None, reason="compiled extension not built")
finite = st.floats(-50, 50, allow_nan=False)


def test_backend_is_reported():
    assert harvestnet.BACKEND in ("cython", "python")
    assert _kernels.BACKEND == ("cython" if compiled_backend is not None else "python")


@needs_compiled
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_row_backends_agree(z):
    np.testing.assert_allclose(compiled_backend.softmax_row(z), python_backend.softmax_row(z), rtol=1e-12)


@needs_compiled
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 6)), elements=finite))
def test_softmax_rows_backends_agree(Z):
    np.testing.assert_allclose(compiled_backend.softmax_rows(Z), python_backend.softmax_rows(Z), rtol=1e-12)


@needs_compiled
@given(st.integers(1, 7), st.integers(1, 40), st.data())
def test_median_sq_dist_backends_agree(n, d, data):
    ex = data.draw(arrays(np.float64, (n, d), elements=finite))
    x = data.draw(arrays(np.float64, d, elements=finite))
    assert compiled_backend.median_sq_dist(ex, x) == pytest.approx(python_backend.median_sq_dist(ex, x), rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(compiled_backend.sq_dists(ex, x), python_backend.sq_dists(ex, x), rtol=1e-12, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("n,d,K", [(50, 1, 2), (40, 3, 2), (30, 4, 3), (25, 7, 5)])
def test_xent_kernels_backends_agree(rng, n, d, K):
    W, b, X = rng.standard_normal((K, d)), rng.standard_normal(K), rng.standard_normal((n, d)) * 3
    y = rng.integers(0, K, n).astype(np.intp)
    w = rng.random(n)
    w /= w.sum()
    out = []
    for mod in (compiled_backend, python_backend):
        gW, gb = np.empty_like(W), np.empty_like(b)
        loss = mod.xent_grad(W, b, X, y, w, 0.3, gW, gb)
        L = np.ascontiguousarray(X @ W.T + b)
        resid = np.empty_like(L)
        out.append((loss, gW, gb, mod.xent_resid(L, y, w, resid), resid))
    for a, b_ in zip(*out):
        np.testing.assert_allclose(a, b_, rtol=1e-11, atol=1e-13)


@needs_compiled
def test_target_conf_backends_agree(rng):
    conf = rng.random(6)
    t = np.array([1, 4, 5], dtype=np.intp)
    assert compiled_backend.target_conf(conf, t) == python_backend.target_conf(conf, t) == conf[[1, 4, 5]].max()


def test_median_of_empty_set_rejected():
    with pytest.raises(ValueError):
        _kernels.median_sq_dist(np.zeros((0, 3)), np.zeros(3))


def test_binary_path_handles_extreme_logits():
    W = np.array([[0.0], [1.0]])
    b = np.array([0.0, 0.0])
    X = np.array([[800.0], [-800.0]])
    y = np.array([1, 1], dtype=np.intp)
    gW, gb = np.empty_like(W), np.empty_like(b)
    loss = _kernels.xent_grad(W, b, X, y, np.array([0.5, 0.5]), 0.0, gW, gb)
    # second example sits at logit gap -800: loss 800 / 2
    assert loss == pytest.approx(400.0)
    assert np.isfinite(gW).all() and np.isfinite(gb).all()
