"""Hot numeric kernels: 1-D convolution and width-2 max-pooling, forward and backward.

Two interchangeable backends:

* ``numba`` -- jitted loop nests, used by default when numba is importable.
* ``numpy`` -- im2col/matmul fallback with identical semantics.

Selection is made once at import time from the environment variable
``SIGCLUST_BACKEND`` ("numba", "numpy", or unset/"auto" for numba-if-available).
Both implementations are always importable (numpy ones unconditionally), so the
benchmark in ``benchmarks/bench_kernels.py`` and the cross-check tests can time
and compare them directly regardless of the active backend.

All kernels take and return float64 C-contiguous arrays. Convolutions are
stride-1 with symmetric zero padding of ``K // 2`` (odd K), so the time axis
length is preserved.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_CHOICE = os.environ.get("SIGCLUST_BACKEND", "auto").lower()

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via SIGCLUST_BACKEND=numpy
    numba = None
    _HAVE_NUMBA = False

if _CHOICE == "numba" and not _HAVE_NUMBA:
    raise ImportError("SIGCLUST_BACKEND=numba but numba is not importable")


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def conv1d_forward_numpy(x, w, b):
    """Correlate x (m, Cin, L) with filters w (Cout, Cin, K), add bias.

    Returns y (m, Cout, L). Zero "same" padding, stride 1.
    """
    m, cin, length = x.shape
    cout, _, ksz = w.shape
    pad = ksz // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    # (m, Cin, L, K) view -> (m*L, Cin*K) matrix
    win = sliding_window_view(xp, ksz, axis=2)
    cols = win.transpose(0, 2, 1, 3).reshape(m * length, cin * ksz)
    y = cols @ w.reshape(cout, cin * ksz).T
    y += b
    return np.ascontiguousarray(y.reshape(m, length, cout).transpose(0, 2, 1))


def conv1d_backward_numpy(x, w, dy):
    """Gradients of conv1d_forward w.r.t. input, weights, bias."""
    m, cin, length = x.shape
    cout, _, ksz = w.shape
    pad = ksz // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, ksz, axis=2)
    cols = win.transpose(0, 2, 1, 3).reshape(m * length, cin * ksz)
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(m * length, cout)

    dw = (dy_mat.T @ cols).reshape(cout, cin, ksz)
    db = dy_mat.sum(axis=0)

    dcols = (dy_mat @ w.reshape(cout, cin * ksz)).reshape(m, length, cin, ksz)
    dxp = np.zeros((m, cin, length + 2 * pad))
    for kk in range(ksz):
        dxp[:, :, kk:kk + length] += dcols[:, :, :, kk].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + length], dw, db


def maxpool2_forward_numpy(x):
    """Max-pool width 2, stride 2 along the last axis.

    Returns (y, switches) where switches in {0, 1} marks the argmax within each
    window (ties resolved to the left element). An odd trailing column is dropped.
    """
    m, ch, length = x.shape
    lout = length // 2
    xe = x[:, :, :2 * lout].reshape(m, ch, lout, 2)
    switches = xe.argmax(axis=3)
    y = np.ascontiguousarray(xe.max(axis=3))
    return y, switches


def maxpool2_backward_numpy(dy, switches, length):
    """Route pooled gradients back to the argmax positions."""
    m, ch, lout = dy.shape
    dxe = np.zeros((m, ch, lout, 2))
    np.put_along_axis(dxe, switches[:, :, :, None], dy[:, :, :, None], axis=3)
    dx = np.zeros((m, ch, length))
    dx[:, :, :2 * lout] = dxe.reshape(m, ch, 2 * lout)
    return dx


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    # fastmath lets LLVM vectorize the reduction loops; on a fixed machine the
    # generated code is still deterministic run to run.
    @numba.njit(cache=True, fastmath=True)
    def _pad_time(x, pad):
        m, cin, length = x.shape
        xp = np.zeros((m, cin, length + 2 * pad))
        xp[:, :, pad:pad + length] = x
        return xp

    @numba.njit(cache=True, fastmath=True)
    def _conv1d_fw_jit(x, w, b):
        m, cin, length = x.shape
        cout, _, ksz = w.shape
        pad = ksz // 2
        xp = _pad_time(x, pad)
        y = np.empty((m, cout, length))
        for n in range(m):
            for co in range(cout):
                acc = y[n, co]
                for t in range(length):
                    acc[t] = b[co]
                for ci in range(cin):
                    xrow = xp[n, ci]
                    for kk in range(ksz):
                        wv = w[co, ci, kk]
                        for t in range(length):
                            acc[t] += wv * xrow[t + kk]
        return y

    @numba.njit(cache=True, fastmath=True)
    def _conv1d_bw_jit(x, w, dy):
        m, cin, length = x.shape
        cout, _, ksz = w.shape
        pad = ksz // 2
        xp = _pad_time(x, pad)
        dxp = np.zeros((m, cin, length + 2 * pad))
        dw = np.zeros((cout, cin, ksz))
        db = np.zeros(cout)
        for co in range(cout):
            s = 0.0
            for n in range(m):
                for t in range(length):
                    s += dy[n, co, t]
            db[co] = s
        for n in range(m):
            for co in range(cout):
                for ci in range(cin):
                    for kk in range(ksz):
                        s = 0.0
                        for t in range(length):
                            s += dy[n, co, t] * xp[n, ci, t + kk]
                        dw[co, ci, kk] += s
            for ci in range(cin):
                for co in range(cout):
                    for kk in range(ksz):
                        wv = w[co, ci, kk]
                        for t in range(length):
                            dxp[n, ci, t + kk] += dy[n, co, t] * wv
        return dxp[:, :, pad:pad + length].copy(), dw, db

    @numba.njit(cache=True)
    def _maxpool2_fw_jit(x):
        m, ch, length = x.shape
        lout = length // 2
        y = np.empty((m, ch, lout))
        switches = np.zeros((m, ch, lout), dtype=np.int64)
        for n in range(m):
            for c in range(ch):
                for t in range(lout):
                    a = x[n, c, 2 * t]
                    bb = x[n, c, 2 * t + 1]
                    if bb > a:
                        y[n, c, t] = bb
                        switches[n, c, t] = 1
                    else:
                        y[n, c, t] = a
        return y, switches

    @numba.njit(cache=True)
    def _maxpool2_bw_jit(dy, switches, length):
        m, ch, lout = dy.shape
        dx = np.zeros((m, ch, length))
        for n in range(m):
            for c in range(ch):
                for t in range(lout):
                    dx[n, c, 2 * t + switches[n, c, t]] = dy[n, c, t]
        return dx

    def conv1d_forward_numba(x, w, b):
        return _conv1d_fw_jit(x, w, b)

    def conv1d_backward_numba(x, w, dy):
        return _conv1d_bw_jit(x, w, dy)

    def maxpool2_forward_numba(x):
        return _maxpool2_fw_jit(x)

    def maxpool2_backward_numba(dy, switches, length):
        return _maxpool2_bw_jit(dy, switches, length)


if _HAVE_NUMBA and _CHOICE != "numpy":
    BACKEND = "numba"
    conv1d_forward = conv1d_forward_numba
    conv1d_backward = conv1d_backward_numba
    maxpool2_forward = maxpool2_forward_numba
    maxpool2_backward = maxpool2_backward_numba
else:
    BACKEND = "numpy"
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy
    maxpool2_forward = maxpool2_forward_numpy
    maxpool2_backward = maxpool2_backward_numpy


def active_backend():
    """Name of the kernel backend selected at import time."""
    return BACKEND
