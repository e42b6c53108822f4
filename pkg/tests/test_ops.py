import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockpunch.graph import WeightTensor
from blockpunch.pruner import BlockConfig, PruneMask, project_mask
from blockpunch.runtime.kernels import BACKENDS, COMPILED_AVAILABLE, DEFAULT_BACKEND, get_kernel
from blockpunch.runtime.ops import TuningConfig, sparse_conv, sparse_gemm, sparse_gemm_counted
from blockpunch.runtime.packed import encode, permute_blocks, reorder_blocks

from oracles import naive_conv, rel_err


def make(seed, m, n, k, fraction, cfg=BlockConfig()):
    rng = np.random.default_rng(seed)
    w = WeightTensor("w", (m, n, k, k), rng.standard_normal(m * n * k * k).astype(np.float32))
    units = round(fraction * (-(-m // cfg.gm)) * n * k * k)
    mask = project_mask(w, cfg, units, "w")
    dense = np.where(mask.dense(), w.gemm_view, 0).astype(np.float64)
    return reorder_blocks(encode(w, mask)), dense, mask


tunings = st.builds(TuningConfig, st.integers(1, 5), st.integers(1, 70), st.integers(1, 3))


@given(
    st.integers(0, 2**32 - 1),
    st.integers(1, 40),
    st.integers(1, 8),
    st.sampled_from([1, 3]),
    st.floats(0, 1),
    st.integers(1, 9),
    tunings,
    st.sampled_from(sorted(BACKENDS)),
    st.sampled_from([BlockConfig(), BlockConfig(4, 2), BlockConfig(3, 5)]),
)
def test_gemm_matches_dense(seed, m, n, k, fraction, batch, tuning, backend, cfg):
    packed, dense, _ = make(seed, m, n, k, fraction, cfg)
    x = np.random.default_rng(seed + 1).standard_normal((dense.shape[1], batch))
    got = sparse_gemm(packed, x, tuning, backend)
    np.testing.assert_allclose(got, dense @ x, rtol=1e-10, atol=1e-10)


def test_gemm_vector_input(backend):
    packed, dense, _ = make(0, 20, 4, 3, 0.5)
    x = np.random.default_rng(1).standard_normal(dense.shape[1])
    got = sparse_gemm(packed, x, backend=backend)
    assert got.shape == (20,)
    np.testing.assert_allclose(got, dense @ x, rtol=1e-12)


def test_output_bit_identical_under_block_permutation(backend, rng):
    packed, _, _ = make(5, 61, 7, 3, 0.3)
    x = rng.standard_normal((63, 17))
    ref = sparse_gemm(packed, x, backend=backend)
    for _ in range(5):
        moved = permute_blocks(packed, rng.permutation(packed.grid.rows))
        for tuning in (TuningConfig(1, 3, 1), TuningConfig(3, 64, 2)):
            assert sparse_gemm(moved, x, tuning, backend).tobytes() == ref.tobytes()


def test_backends_agree(rng):
    if not COMPILED_AVAILABLE:
        pytest.skip("compiled kernel not built")
    packed, _, _ = make(9, 64, 16, 3, 0.25)
    x = rng.standard_normal((144, 33))
    np.testing.assert_allclose(sparse_gemm(packed, x, backend="cython"), sparse_gemm(packed, x, backend="numpy"),
                               rtol=1e-12, atol=1e-12)


def test_multiply_count(backend, rng):
    packed, _, mask = make(2, 32, 8, 3, 0.4)
    x = rng.standard_normal((72, 11))
    _, mults = sparse_gemm_counted(packed, x, backend=backend)
    assert mults == mask.kept_units * 8 * 11 == mask.kept_weights * 11


def test_conv_multiply_count_uses_output_positions(backend, rng):
    packed, _, mask = make(4, 16, 3, 3, 0.5)
    x = rng.standard_normal((2, 3, 6, 5))
    from blockpunch.runtime.lowering import im2col

    cols = im2col(x, 3, 3, 1, 1)
    _, mults = sparse_gemm_counted(packed, cols, backend=backend)
    assert mults == 8 * mask.kept_units * (2 * 6 * 5)


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_naive_loops(backend, stride, padding, rng):
    packed, dense, _ = make(11, 10, 3, 3, 0.5)
    x = rng.standard_normal((2, 3, 7, 6))
    got = sparse_conv(packed, x, stride, padding, backend=backend)
    want = naive_conv(x, dense.reshape(10, 3, 3, 3), stride, padding)
    assert got.shape == want.shape
    assert rel_err(got, want) < 1e-12


def test_one_by_one_conv_is_gemm(backend, rng):
    packed, dense, _ = make(3, 12, 5, 1, 0.6)
    x = rng.standard_normal((5, 4, 3))
    got = sparse_conv(packed, x, backend=backend)
    via_gemm = sparse_gemm(packed, x.reshape(5, -1), backend=backend).reshape(12, 4, 3)
    np.testing.assert_allclose(got, via_gemm, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(got, np.einsum("mn,nhw->mhw", dense, x), rtol=1e-12, atol=1e-12)


def test_identity_like_layer(backend, rng):
    w = WeightTensor.from_gemm("eye", (8, 8, 1, 1), np.eye(8, dtype=np.float32))
    packed = encode(w, PruneMask.full("eye", (8, 8), BlockConfig()))
    x = rng.standard_normal((8, 5))
    assert sparse_gemm(packed, x, backend=backend).tobytes() == x.tobytes()


def test_fully_punched_layer_gives_zero(backend, rng):
    packed, _, mask = make(6, 16, 2, 3, 0.0)
    assert mask.kept_units == 0
    out, mults = sparse_gemm_counted(packed, rng.standard_normal((18, 4)), backend=backend)
    assert mults == 0 and not out.any()


def test_shape_errors(backend):
    packed, _, _ = make(0, 8, 2, 3, 1.0)
    with pytest.raises(ValueError, match="rows"):
        sparse_gemm(packed, np.zeros((17, 2)), backend=backend)
    with pytest.raises(ValueError, match="channels"):
        sparse_conv(packed, np.zeros((3, 5, 5)), backend=backend)
    with pytest.raises(ValueError, match="kernel larger"):
        sparse_conv(packed, np.zeros((2, 1, 1)), backend=backend)


def test_backend_selection():
    assert get_kernel() is BACKENDS[DEFAULT_BACKEND]
    with pytest.raises(ValueError, match="unavailable"):
        get_kernel("cuda")
    with pytest.raises(ValueError):
        TuningConfig(row_tile=0)


def _default_backend_in_subprocess(code, env_extra):
    import os
    import subprocess
    import sys

    env = {**os.environ, **env_extra}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_pure_env_switches_default():
    code = "from blockpunch.runtime.kernels import DEFAULT_BACKEND; print(DEFAULT_BACKEND)"
    assert _default_backend_in_subprocess(code, {"BLOCKPUNCH_PURE": "1"}) == "numpy"


def test_fallback_when_extension_missing():
    code = (
        "import sys; sys.modules['blockpunch.runtime._kernels'] = None\n"
        "from blockpunch.runtime import kernels\n"
        "print(kernels.DEFAULT_BACKEND, kernels.COMPILED_AVAILABLE, sorted(kernels.BACKENDS))"
    )
    assert _default_backend_in_subprocess(code, {}) == "numpy False ['numpy']"
