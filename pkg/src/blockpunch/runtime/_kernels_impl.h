/* Register-tiled inner loop for the block-punched GEMM.
 *
 * For one stored block row, an output tile of up to 8 rows x 4 batch columns
 * stays in registers while all kept columns of the block row stream past in
 * ascending column order, so every output element sees the same sequence of
 * additions whatever the block-row storage order is.
 */
#ifndef BLOCKPUNCH_KERNELS_IMPL_H
#define BLOCKPUNCH_KERNELS_IMPL_H

#include <stddef.h>
#include <stdint.h>

#define BP_TILE_N 4

static inline void bp_block_row(ptrdiff_t rows, ptrdiff_t gn, ptrdiff_t block_cols,
                                const uint8_t *counts, const int64_t *index_offsets,
                                const uint8_t *indices, const int64_t *value_offsets,
                                const float *values, const double *x, ptrdiff_t x_stride,
                                double *out, ptrdiff_t o_stride, ptrdiff_t n0, ptrdiff_t n1)
{
    double acc[8][BP_TILE_N];
    ptrdiff_t n, r, t, j, kk;
    for (n = n0; n < n1; n += BP_TILE_N) {
        ptrdiff_t width = n1 - n < BP_TILE_N ? n1 - n : BP_TILE_N;
        if (rows == 8 && width == BP_TILE_N) {
            for (r = 0; r < 8; r++)
                for (t = 0; t < BP_TILE_N; t++)
                    acc[r][t] = out[r * o_stride + n + t];
            for (j = 0; j < block_cols; j++) {
                const uint8_t *idx = indices + index_offsets[j];
                const float *w = values + value_offsets[j];
                for (kk = 0; kk < counts[j]; kk++, w += 8) {
                    const double *xr = x + (j * gn + idx[kk]) * x_stride + n;
                    for (r = 0; r < 8; r++) {
                        double wr = w[r];
                        for (t = 0; t < BP_TILE_N; t++)
                            acc[r][t] += wr * xr[t];
                    }
                }
            }
            for (r = 0; r < 8; r++)
                for (t = 0; t < BP_TILE_N; t++)
                    out[r * o_stride + n + t] = acc[r][t];
        } else {
            /* ragged rows or a partial tile: same order, scalar path */
            for (r = 0; r < rows; r++) {
                for (t = 0; t < width; t++) {
                    double s = out[r * o_stride + n + t];
                    for (j = 0; j < block_cols; j++) {
                        const uint8_t *idx = indices + index_offsets[j];
                        const float *w = values + value_offsets[j];
                        for (kk = 0; kk < counts[j]; kk++)
                            s += (double)w[kk * rows + r] * x[(j * gn + idx[kk]) * x_stride + n + t];
                    }
                    out[r * o_stride + n + t] = s;
                }
            }
        }
    }
}

#endif
