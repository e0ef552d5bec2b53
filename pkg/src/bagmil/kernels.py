"""JIT-compiled inner loops for valid convolution.

All kernels are single-threaded and accumulate each output element in a
fixed order that depends only on the kernel shape, never on the spatial
extent of the input. That makes the forward pass bitwise reproducible
across crops: convolving a sub-image yields byte-identical values for the
windows it shares with the full image, which the tiled heatmap path relies
on.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward(x, w, b, stride, out):
    # x: (Cin, H, W), w: (Cout, Cin, k, k), out: (Cout, Ho, Wo), preallocated
    cout, cin, k, _ = w.shape
    ho, wo = out.shape[1], out.shape[2]
    for oc in range(cout):
        bv = b[oc]
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = bv
    for oc in range(cout):
        for ic in range(cin):
            for di in range(k):
                for dj in range(k):
                    wv = w[oc, ic, di, dj]
                    for i in range(ho):
                        for j in range(wo):
                            out[oc, i, j] += wv * x[ic, i * stride + di, j * stride + dj]


@njit(cache=True, fastmath=True)
def conv2d_backward(go, x, w, stride, gx, gw, gb, need_gx):
    # Accumulates into gx/gw/gb (callers pass zeroed or running buffers).
    cout, cin, k, _ = w.shape
    ho, wo = go.shape[1], go.shape[2]
    for oc in range(cout):
        s = go.dtype.type(0.0)
        for i in range(ho):
            for j in range(wo):
                s += go[oc, i, j]
        gb[oc] += s
    for oc in range(cout):
        for ic in range(cin):
            for di in range(k):
                for dj in range(k):
                    acc = go.dtype.type(0.0)
                    for i in range(ho):
                        for j in range(wo):
                            acc += go[oc, i, j] * x[ic, i * stride + di, j * stride + dj]
                    gw[oc, ic, di, dj] += acc
    if need_gx:
        for oc in range(cout):
            for ic in range(cin):
                for di in range(k):
                    for dj in range(k):
                        wv = w[oc, ic, di, dj]
                        for i in range(ho):
                            for j in range(wo):
                                gx[ic, i * stride + di, j * stride + dj] += wv * go[oc, i, j]


def warmup(dtype=np.float32):
    """Force JIT compilation for the given dtype so later calls are hot."""
    x = np.ones((1, 3, 3), dtype=dtype)
    w = np.ones((1, 1, 3, 3), dtype=dtype)
    b = np.zeros(1, dtype=dtype)
    out = np.empty((1, 1, 1), dtype=dtype)
    conv2d_forward(x, w, b, 1, out)
    conv2d_backward(out, x, w, 1, np.zeros_like(x), np.zeros_like(w), np.zeros_like(b), True)
