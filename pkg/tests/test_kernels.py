"""Cross-checks the JIT kernel lane against the pure-numpy reference lane."""

import numpy as np
import pytest

from balseg.kernels import BACKEND, reference

try:
    from balseg.kernels import jit
    HAS_JIT = True
except ImportError:
    HAS_JIT = False

needs_jit = pytest.mark.skipif(not HAS_JIT, reason="numba unavailable")


def test_backend_resolved():
    assert BACKEND in ("numba", "numpy")


@needs_jit
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_conv_forward_parity(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 6, 3)).astype(dtype)
    w = rng.normal(size=(3, 3, 3, 5)).astype(dtype)
    b = rng.normal(size=5).astype(dtype)
    ya = reference.conv3x3_forward(x, w, b)
    yb = jit.conv3x3_forward(x, w, b)
    assert ya.dtype == yb.dtype == dtype
    np.testing.assert_allclose(ya, yb, rtol=1e-5, atol=1e-5)


@needs_jit
def test_conv_backward_parity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6, 4)).astype(np.float32)
    w = rng.normal(size=(3, 3, 4, 2)).astype(np.float32)
    dy = rng.normal(size=(2, 6, 6, 2)).astype(np.float32)
    np.testing.assert_allclose(reference.conv3x3_input_grad(dy, w),
                               jit.conv3x3_input_grad(dy, w),
                               rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(reference.conv3x3_weight_grad(x, dy),
                               jit.conv3x3_weight_grad(x, dy),
                               rtol=1e-4, atol=1e-4)


@needs_jit
def test_pool_parity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 8, 10, 4)).astype(np.float32)
    ya, ia = reference.maxpool2_forward(x)
    yb, ib = jit.maxpool2_forward(x)
    assert np.array_equal(ya, yb)
    assert np.array_equal(ia, ib)
    dy = rng.normal(size=ya.shape).astype(np.float32)
    assert np.array_equal(reference.maxpool2_backward(dy, ia),
                          jit.maxpool2_backward(dy, ib))


@needs_jit
def test_pool_tie_breaks_first():
    x = np.zeros((1, 2, 2, 1), dtype=np.float32)  # all equal: index 0 wins
    _, ia = reference.maxpool2_forward(x)
    _, ib = jit.maxpool2_forward(x)
    assert ia.reshape(()) == 0
    assert ib.reshape(()) == 0


def test_backend_env_flag(tmp_path):
    import subprocess
    import sys
    code = ("from balseg.kernels import BACKEND; print(BACKEND)")
    out = subprocess.run([sys.executable, "-c", code],
                         env={"PATH": "/usr/bin:/bin", "BALSEG_BACKEND": "numpy"},
                         capture_output=True, text=True)
    assert out.stdout.strip() == "numpy"
