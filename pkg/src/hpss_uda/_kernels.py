"""Hot numeric kernels for convolution and pooling.

Two interchangeable implementations live here: numba-compiled loops and a
pure-numpy path built on ``sliding_window_view`` + ``tensordot``. The active
one is chosen at import time from the ``HPSS_UDA_BACKEND`` environment
variable (``numba`` by default, ``numpy`` to force the fallback) and can be
switched at runtime with :func:`set_backend`.

All kernels operate on already-padded inputs; padding bookkeeping lives in
:mod:`hpss_uda.tensorops`.
"""
import os
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


BACKENDS = ("numba", "numpy")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_conv_forward(xp, w, b):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=xp.dtype)


def _np_conv_grad_input(g, w, padded_shape):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di:di + ho, dj:dj + wo] += cols[..., di, dj].transpose(0, 3, 1, 2)
    return gxp


def _np_conv_grad_weight(g, xp, kshape):
    win = sliding_window_view(xp, kshape, axis=(2, 3))
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw
    return gw.astype(g.dtype, copy=False)


def _np_maxpool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first occurrence in row-major window order
    idx = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def _np_maxpool_backward(g, idx):
    n, c, ho, wo = g.shape
    onehot = (idx[..., None] == np.arange(4, dtype=np.int8)).astype(g.dtype)
    blocks = onehot * g[..., None]
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(blocks.reshape(n, c, 2 * ho, 2 * wo))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_conv_forward(xp, w, b):
    n_batch, n_in, hp, wp = xp.shape
    n_out, _, kh, kw = w.shape
    ho = hp - kh + 1
    wo = wp - kw + 1
    out = np.empty((n_batch, n_out, ho, wo), dtype=xp.dtype)
    acc = np.empty((ho, wo), dtype=np.float64)
    for n in range(n_batch):
        for o in range(n_out):
            acc[:, :] = b[o]
            for c in range(n_in):
                for di in range(kh):
                    for dj in range(kw):
                        wv = np.float64(w[o, c, di, dj])
                        for i in range(ho):
                            for j in range(wo):
                                acc[i, j] += wv * xp[n, c, i + di, j + dj]
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = acc[i, j]
    return out


@njit(cache=True)
def _nb_conv_grad_input(g, w, hp, wp):
    n_batch, n_out, ho, wo = g.shape
    _, n_in, kh, kw = w.shape
    gxp = np.empty((n_batch, n_in, hp, wp), dtype=g.dtype)
    acc = np.empty((hp, wp), dtype=np.float64)
    for n in range(n_batch):
        for c in range(n_in):
            acc[:, :] = 0.0
            for o in range(n_out):
                for di in range(kh):
                    for dj in range(kw):
                        wv = np.float64(w[o, c, di, dj])
                        for i in range(ho):
                            for j in range(wo):
                                acc[i + di, j + dj] += wv * g[n, o, i, j]
            for i in range(hp):
                for j in range(wp):
                    gxp[n, c, i, j] = acc[i, j]
    return gxp


@njit(cache=True, fastmath=True)
def _nb_conv_grad_weight(g, xp, kh, kw):
    # fastmath only reassociates the float64 row sums; the order is fixed per
    # compiled binary, so repeated calls stay bit-identical.
    n_batch, n_out, ho, wo = g.shape
    n_in = xp.shape[1]
    acc = np.zeros((n_out, n_in, kh, kw), dtype=np.float64)
    row_g = np.empty(wo, dtype=np.float64)
    for n in range(n_batch):
        for o in range(n_out):
            for i in range(ho):
                for j in range(wo):
                    row_g[j] = g[n, o, i, j]
                for c in range(n_in):
                    for di in range(kh):
                        for dj in range(kw):
                            s = 0.0
                            for j in range(wo):
                                s += row_g[j] * xp[n, c, i + di, j + dj]
                            acc[o, c, di, dj] += s
    return acc.astype(g.dtype)


@njit(cache=True)
def _nb_maxpool_forward(x):
    n_batch, n_ch, h, w = x.shape
    ho = h // 2
    wo = w // 2
    out = np.empty((n_batch, n_ch, ho, wo), dtype=x.dtype)
    idx = np.empty((n_batch, n_ch, ho, wo), dtype=np.int8)
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, c, 2 * i, 2 * j]
                    k = 0
                    v = x[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = k
    return out, idx


@njit(cache=True)
def _nb_maxpool_backward(g, idx):
    n_batch, n_ch, ho, wo = g.shape
    gx = np.zeros((n_batch, n_ch, 2 * ho, 2 * wo), dtype=g.dtype)
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    k = idx[n, c, i, j]
                    gx[n, c, 2 * i + k // 2, 2 * j + k % 2] = g[n, c, i, j]
    return gx


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def conv_forward(xp, w, b):
    """Valid cross-correlation of padded ``xp`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    if _backend == "numba":
        return _nb_conv_forward(xp, w, b)
    return _np_conv_forward(xp, w, b)


def conv_grad_input(g, w, padded_shape):
    if _backend == "numba":
        return _nb_conv_grad_input(g, w, padded_shape[2], padded_shape[3])
    return _np_conv_grad_input(g, w, padded_shape)


def conv_grad_weight(g, xp, kshape):
    if _backend == "numba":
        return _nb_conv_grad_weight(g, xp, kshape[0], kshape[1])
    return _np_conv_grad_weight(g, xp, kshape)


def maxpool_forward(x):
    """2x2 stride-2 max pool; returns (output, window argmax in 0..3)."""
    if _backend == "numba":
        return _nb_maxpool_forward(x)
    return _np_maxpool_forward(x)


def maxpool_backward(g, idx):
    if _backend == "numba":
        return _nb_maxpool_backward(g, idx)
    return _np_maxpool_backward(g, idx)


def get_backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    previous = _backend
    _backend = name
    return previous


_requested = os.environ.get("HPSS_UDA_BACKEND", "numba").strip().lower()
if _requested not in BACKENDS:
    warnings.warn(f"HPSS_UDA_BACKEND={_requested!r} not recognised, using numba")
    _requested = "numba"
if _requested == "numba" and not HAVE_NUMBA:  # pragma: no cover
    warnings.warn("numba unavailable, falling back to numpy kernels")
    _requested = "numpy"
_backend = _requested
