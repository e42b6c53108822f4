"""Sparse GEMM and convolution over packed block-punched layers."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kernels import get_kernel
from .lowering import conv_output_hw, im2col
from .packed import PackedSparseLayer


@dataclass(frozen=True)
class TuningConfig:
    row_tile: int = 4  # block rows per task
    col_tile: int = 64  # batch columns per inner sweep
    workers: int = 1

    def __post_init__(self):
        if min(self.row_tile, self.col_tile, self.workers) < 1:
            raise ValueError("tiles and worker count must be >= 1")


DEFAULT_TUNING = TuningConfig()


def sparse_gemm_counted(packed: PackedSparseLayer, x, tuning=None, backend=None):
    """``decode(packed) @ x`` touching kept columns only; also returns the multiply count."""
    tuning = tuning or DEFAULT_TUNING
    x = np.asarray(x)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    m, c = packed.shape
    if x.shape[0] != c:
        raise ValueError(f"input has {x.shape[0]} rows, layer {packed.layer_id} needs {c}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.zeros((m, x.shape[1]), dtype=np.float64)
    kernel = get_kernel(backend)
    grid = packed.grid
    args = (
        packed.cfg.gm, packed.cfg.gn, m, grid.cols, packed.block_order, packed.counts,
        packed.index_offsets, packed.indices, packed.value_offsets, packed.values, x, out,
    )
    chunks = [(p, min(p + tuning.row_tile, grid.rows)) for p in range(0, grid.rows, tuning.row_tile)]
    if tuning.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(tuning.workers) as pool:
            mults = sum(pool.map(lambda ch: kernel(*args, ch[0], ch[1], tuning.col_tile), chunks))
    else:
        mults = sum(kernel(*args, p0, p1, tuning.col_tile) for p0, p1 in chunks)
    return (out[:, 0] if vector else out), int(mults)


def sparse_gemm(packed: PackedSparseLayer, x, tuning=None, backend=None) -> np.ndarray:
    return sparse_gemm_counted(packed, x, tuning, backend)[0]


def sparse_conv(packed: PackedSparseLayer, x, stride=1, padding=0, tuning=None, backend=None):
    """Convolution of a (N, H, W) or (B, N, H, W) input, lowered with im2col."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    m, n, kh, kw = packed.dims
    if x.shape[1] != n:
        raise ValueError(f"input has {x.shape[1]} channels, layer {packed.layer_id} needs {n}")
    b, _, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    cols = im2col(x, kh, kw, stride, padding, dtype=np.float64)
    out = sparse_gemm(packed, cols, tuning, backend).reshape(m, b, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    return out[0] if single else out
