"""Kernel backend selection.

The compiled kernel is the default when the extension imports; otherwise (or with
``BLOCKPUNCH_PURE=1``) a numpy implementation with the same signature is the default.
"""
import os

import numpy as np


def gemm_block_rows_numpy(gm, gn, m, block_cols, block_order, counts, index_offsets,
                          indices, value_offsets, values, x, out, p_start, p_stop, col_tile):
    mults = 0
    nb = x.shape[1]
    offsets = np.arange(block_cols, dtype=np.int64) * gn
    for p in range(p_start, p_stop):
        r0 = int(block_order[p]) * gm
        rows = min(gm, m - r0)
        b0, b1 = p * block_cols, (p + 1) * block_cols
        local = indices[index_offsets[b0] : index_offsets[b1]]
        if local.size == 0:
            continue
        cols = np.repeat(offsets, counts[b0:b1]) + local
        vals = values[value_offsets[b0] : value_offsets[b1]].reshape(local.size, rows)
        out[r0 : r0 + rows] += vals.T.astype(np.float64) @ x[cols]
        mults += local.size * rows * nb
    return mults


BACKENDS = {"numpy": gemm_block_rows_numpy}
try:
    from ._kernels import gemm_block_rows as _compiled
except ImportError:
    _compiled = None
else:
    BACKENDS["cython"] = _compiled

COMPILED_AVAILABLE = _compiled is not None
DEFAULT_BACKEND = "cython" if COMPILED_AVAILABLE and not os.environ.get("BLOCKPUNCH_PURE") else "numpy"


def get_kernel(backend=None):
    name = backend or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend '{name}' unavailable; have {sorted(BACKENDS)}") from None
