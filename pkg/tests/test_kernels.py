import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridfm import _kernels

pytestmark = pytest.mark.skipif(_kernels.numba_kernels is None, reason="numba not installed")


def test_crc64_check_value():
    # published CRC-64/XZ check value for the ASCII string "123456789"
    assert _kernels.crc64(b"123456789") == 0x995DC9BBDF1939FA
    assert _kernels.numpy_kernels.crc64(b"123456789") ^ 0xFFFFFFFFFFFFFFFF == 0x995DC9BBDF1939FA


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=2000))
def test_crc64_backends_agree(data):
    assert _kernels.numba_kernels.crc64(data) == _kernels.numpy_kernels.crc64(data)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_segment_kernels_agree_bitwise(m, d, k, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((m, d))
    v[rng.random((m, d)) < 0.2] = 0.5  # ties
    ids = rng.integers(0, k, m)
    a = _kernels.numba_kernels.segment_sum(v, ids, k)
    b = _kernels.numpy_kernels.segment_sum(v, ids, k)
    assert a.tobytes() == b.tobytes()
    for want_max in (True, False):
        (x, i), (y, j) = (
            _kernels.numba_kernels.segment_argext(v, ids, k, want_max),
            _kernels.numpy_kernels.segment_argext(v, ids, k, want_max),
        )
        assert np.array_equal(x, y) and np.array_equal(i, j)


def test_env_flag_selects_numpy_backend(tmp_path):
    code = (
        "from gridfm import _kernels; from gridfm.autodiff import ops; import numpy as np;"
        "print(_kernels.BACKEND, ops.segment_reduce(np.arange(6.0).reshape(3, 2), np.array([0, 1, 0]), 2, 'max').data.tolist())"
    )
    env = dict(os.environ, GRIDFM_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split()[0] == "numpy"
    assert "[[4.0, 5.0], [2.0, 3.0]]" in out


def test_model_loss_identical_across_backends():
    code = (
        "import sys; sys.path.insert(0, 'tests');"
        "from helpers import four_bus_case, model_loss;"
        "from gridfm.graph import batch_graphs; from gridfm.ingest import build_hetero_graph;"
        "from gridfm.powerflow import solve_power_flow; from gridfm.models import Model, ModelConfig;"
        "c = four_bus_case(); g = build_hetero_graph(c, solve_power_flow(c));"
        "print(*[repr(model_loss(Model(ModelConfig(t, 8, 2, num_heads=2)), batch_graphs([g, g])).item()) for t in ('sage', 'gat', 'pna')])"
    )
    root = os.path.dirname(os.path.dirname(__file__))
    runs = []
    for flag in ("0", "1"):
        env = dict(os.environ, GRIDFM_DISABLE_NUMBA=flag)
        runs.append(subprocess.run([sys.executable, "-c", code], env=env, cwd=root, capture_output=True, text=True, check=True).stdout)
    assert runs[0] == runs[1]
