"""im2col / col2im lowering between feature maps and GEMM operands.

Row ``c`` of a lowered matrix is the GEMM-view column ``(channel, kh, kw)``;
columns run over ``(batch, out_y, out_x)`` in row-major order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_hw(h, w, kh, kw, stride, padding):
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def im2col(x, kh, kw, stride=1, padding=0, dtype=None):
    """(B, N, H, W) -> (N*kh*kw, B*Ho*Wo)."""
    b, n, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (B, N, Ho, Wo, kh, kw) -> (N, kh, kw, B, Ho, Wo)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(n * kh * kw, b * ho * wo)
    return np.ascontiguousarray(cols, dtype=dtype or x.dtype)


def col2im(cols, x_shape, kh, kw, stride=1, padding=0):
    """Adjoint of :func:`im2col`: scatter-add columns back to (B, N, H, W)."""
    b, n, h, w = x_shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    cols = cols.reshape(n, kh, kw, b, ho, wo)
    out = np.zeros((b, n, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, i, j
            ].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out
