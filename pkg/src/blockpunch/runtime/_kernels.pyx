# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block-punched GEMM kernel.

Each output element accumulates its kept columns in ascending column order,
independent of the block-row storage order.
"""
from libc.stdint cimport int32_t, int64_t, uint8_t


cdef extern from "_kernels_impl.h" nogil:
    void bp_block_row(Py_ssize_t rows, Py_ssize_t gn, Py_ssize_t block_cols,
                      const uint8_t* counts, const int64_t* index_offsets,
                      const uint8_t* indices, const int64_t* value_offsets,
                      const float* values, const double* x, Py_ssize_t x_stride,
                      double* out, Py_ssize_t o_stride, Py_ssize_t n0, Py_ssize_t n1)


def gemm_block_rows(Py_ssize_t gm, Py_ssize_t gn, Py_ssize_t m, Py_ssize_t block_cols,
                    const int32_t[::1] block_order,
                    const uint8_t[::1] counts,
                    const int64_t[::1] index_offsets,
                    const uint8_t[::1] indices,
                    const int64_t[::1] value_offsets,
                    const float[::1] values,
                    const double[:, ::1] x,
                    double[:, ::1] out,
                    Py_ssize_t p_start, Py_ssize_t p_stop, Py_ssize_t col_tile):
    """Accumulate storage positions [p_start, p_stop) into ``out``; returns multiplies."""
    cdef Py_ssize_t nb = x.shape[1]
    cdef Py_ssize_t p, b0, j, r0, rows, n0, n1
    cdef int64_t kept, mults = 0
    if nb == 0 or p_stop <= p_start or values.shape[0] == 0:
        return 0
    if col_tile < 1:
        col_tile = nb
    cdef const double* xp = &x[0, 0]
    cdef double* op = &out[0, 0]
    with nogil:
        for p in range(p_start, p_stop):
            r0 = block_order[p] * gm
            rows = gm if m - r0 > gm else m - r0
            b0 = p * block_cols
            kept = 0
            for j in range(block_cols):
                kept += counts[b0 + j]
            if kept == 0:
                continue
            n0 = 0
            while n0 < nb:
                n1 = n0 + col_tile if n0 + col_tile < nb else nb
                bp_block_row(rows, gn, block_cols, &counts[b0], &index_offsets[b0], &indices[0],
                             &value_offsets[b0], &values[0], xp, nb, op + r0 * nb, nb, n0, n1)
                n0 = n1
            mults += kept * rows * nb
    return mults
