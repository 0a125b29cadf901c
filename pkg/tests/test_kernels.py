import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcgan.diffcomp import kernels

numba_only = pytest.mark.skipif(kernels.numba is None, reason="numba backend not active")


@numba_only
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(1, 4), stride=st.integers(1, 2),
       pad=st.integers(0, 2), dil=st.integers(1, 2), dtype=st.sampled_from([np.float32, np.float64]))
def test_backends_bit_identical(seed, k, stride, pad, dil, dtype):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 9, 8)).astype(dtype)
    if kernels.conv_output_size(8, k, stride, pad, dil) < 1:
        return
    nb_i2c, nb_c2i = kernels.get_backend("numba")
    np_i2c, np_c2i = kernels.get_backend("numpy")
    a, b = nb_i2c(x, k, k, stride, pad, dil), np_i2c(x, k, k, stride, pad, dil)
    assert a.dtype == b.dtype == dtype
    np.testing.assert_array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    np.testing.assert_array_equal(nb_c2i(cols, x.shape, k, k, stride, pad, dil),
                                  np_c2i(cols, x.shape, k, k, stride, pad, dil))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 7, 7))
    i2c, c2i = kernels.get_backend()
    cols = i2c(x, 3, 3, 2, 1, 1)
    y = rng.standard_normal(cols.shape)
    assert abs(np.sum(cols * y) - np.sum(x * c2i(y, x.shape, 3, 3, 2, 1, 1))) < 1e-10


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("cuda")


def test_env_flag_forces_numpy_backend():
    env = dict(os.environ, LCGAN_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", "from lcgan.diffcomp import KERNEL_BACKEND; print(KERNEL_BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_numpy_backend_reproduces_forward_pass():
    """A small network gives identical outputs under both backends (run in subprocesses)."""
    code = (
        "import numpy as np, hashlib\n"
        "from lcgan.networks import build_generator_F\n"
        "from lcgan.diffcomp import Tensor, no_grad\n"
        "g = build_generator_F(seed=3)\n"
        "x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 32, 32)).astype(np.float32))\n"
        "with no_grad():\n"
        "    print(hashlib.sha256(g(x).data.tobytes()).hexdigest())\n"
    )
    digests = []
    for backend in ("numpy", "numba"):
        env = dict(os.environ, LCGAN_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        digests.append(out.stdout.strip())
    assert digests[0] == digests[1]
