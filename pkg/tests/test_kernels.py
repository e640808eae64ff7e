import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcdm import _pykernels as py
from dcdm import kernels

try:
    from dcdm import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


@st.composite
def chunk_noise(draw, max_len=12, batch=3):
    L = draw(st.integers(1, max_len))
    c = np.array(draw(st.lists(st.lists(st.integers(1, 5), min_size=L, max_size=L),
                               min_size=batch, max_size=batch)), dtype=np.int64)
    nu = np.array(draw(st.lists(st.lists(st.integers(0, 1), min_size=L, max_size=L),
                                min_size=batch, max_size=batch)), dtype=np.uint8)
    return c, nu


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_ext
@given(chunk_noise())
def test_masks_agree(cn):
    c, nu = cn
    assert np.array_equal(cy.noise_masks(nu), py.noise_masks(nu))
    assert np.array_equal(cy.chunk_causal_masks(c), py.chunk_causal_masks(c))
    assert np.array_equal(cy.training_masks(c, nu), py.training_masks(c, nu))


@needs_ext
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_softmax_agrees(seed, masked):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(2, 3, 4, 6))
    allow = rng.random((2, 4, 6)) < 0.6 if masked else None
    p_c, p_py = cy.masked_softmax(x, allow), py.masked_softmax(x, allow)
    np.testing.assert_allclose(p_c, p_py, rtol=1e-13, atol=1e-300)
    g = rng.normal(size=x.shape)
    np.testing.assert_allclose(cy.masked_softmax_grad(p_c, g), py.masked_softmax_grad(p_py, g),
                               rtol=1e-12, atol=1e-15)


@needs_ext
@given(chunk_noise(batch=1), st.data())
def test_reach_agrees(cn, data):
    c, nu = cn
    L = c.shape[1]
    first = py.noise_masks(nu)[0]
    stage1 = np.zeros((2 * L, 2 * L), dtype=bool)
    stage1[:L, :L] = first
    stage1[L:, L:] = first
    rest = py.training_masks(c, nu)[0]
    source = data.draw(st.integers(0, 2 * L - 1))
    par_c, via_c = cy.reach(stage1, rest, source)
    par_p, via_p = py.reach(stage1, rest, source)
    assert np.array_equal(par_c != -1, par_p != -1)
    assert np.array_equal(np.asarray(via_c), np.asarray(via_p))


@pytest.mark.parametrize("impl", [py, pytest.param(cy, marks=needs_ext)], ids=["python", "cython"])
def test_read_only_inputs(impl):
    # broadcast views arrive from the tape as read-only buffers
    probs = np.broadcast_to(np.full((1, 1, 1, 2), 0.5), (1, 1, 1, 2))
    grad = np.broadcast_to(np.array([1.0, -1.0]), (1, 1, 1, 2))
    assert not probs.flags.writeable
    out = impl.masked_softmax_grad(probs, grad)
    np.testing.assert_allclose(out, [[[[0.5, -0.5]]]])
    assert impl.masked_softmax(probs, None).shape == (1, 1, 1, 2)
    c = np.ones((1, 3), dtype=np.int64)
    c.flags.writeable = False
    assert impl.training_masks(c, np.zeros((1, 3), dtype=np.uint8)).shape == (1, 6, 6)
