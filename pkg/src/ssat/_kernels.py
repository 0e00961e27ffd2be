"""Hot inner loops, with numba-compiled and pure-numpy implementations.

Set ``SSAT_NUMBA=0`` in the environment before import to force the numpy
path. Both paths use a fixed reduction order, so each is deterministic on
its own; they agree to floating-point rounding, not bit for bit.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SSAT_NUMBA", "1") != "0"


def set_threads(n):
    """Cap numba's worker pool (no-op on the numpy path)."""
    if numba is None:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _im2col_np(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = _pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (n, c, oh, ow, k, k) -> (n, c, k, k, oh, ow)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im_np(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(n, c, k, k, oh, ow)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad].copy()
    return dxp


def _maxpool_fwd_np(x, k):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // k, w // k, k * k)
    idx = np.argmax(win, axis=-1)  # first index on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int64)


def _maxpool_bwd_np(g, idx, x_shape, k):
    n, c, h, w = x_shape
    win = np.zeros((n, c, h // k, w // k, k * k), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h, w)


def interp_matrix(n_in, factor, dtype=np.float64):
    """Dense (n_in*factor, n_in) bilinear weights, half-pixel centres."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        if src < 0.0:
            src = 0.0
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def _upsample_fwd_np(x, factor):
    _, _, h, w = x.shape
    ah = interp_matrix(h, factor, x.dtype)
    aw = interp_matrix(w, factor, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def _upsample_bwd_np(g, factor, x_shape):
    _, _, h, w = x_shape
    ah = interp_matrix(h, factor, g.dtype)
    aw = interp_matrix(w, factor, g.dtype)
    return np.matmul(np.matmul(ah.T, g), aw)


def _xent_np(logits, labels, weights):
    # logits (n, c, h, w); labels (n, h, w) int; weights (n, h, w)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)[:, 0]
    loss = -(weights * picked).sum(dtype=np.float64)
    probs = ez / s
    grad = probs
    np.put_along_axis(
        grad,
        labels[:, None].astype(np.int64),
        np.take_along_axis(grad, labels[:, None].astype(np.int64), axis=1) - 1.0,
        axis=1,
    )
    grad *= weights[:, None]
    return loss, grad


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(x, k, stride, pad):
        n, c, h, w = x.shape
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        cols = np.zeros((n, c * k * k, oh * ow), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for oy in range(oh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            base = oy * ow
                            for ox in range(ow):
                                xx = ox * stride + j - pad
                                if 0 <= xx < w:
                                    cols[b, row, base + ox] = x[b, ch, y, xx]
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, pad):
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        dx = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for oy in range(oh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            base = oy * ow
                            for ox in range(ow):
                                xx = ox * stride + j - pad
                                if 0 <= xx < w:
                                    dx[b, ch, y, xx] += cols[b, row, base + ox]
        return dx

    @numba.njit(cache=True)
    def _maxpool_fwd_nb(x, k):
        n, c, h, w = x.shape
        oh, ow = h // k, w // k
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[b, ch, oy * k, ox * k]
                        bi = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, ch, oy * k + i, ox * k + j]
                                if v > best:
                                    best = v
                                    bi = i * k + j
                        out[b, ch, oy, ox] = best
                        idx[b, ch, oy, ox] = bi
        return out, idx

    @numba.njit(cache=True)
    def _maxpool_bwd_nb(g, idx, n, c, h, w, k):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        oh, ow = h // k, w // k
        for b in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        bi = idx[b, ch, oy, ox]
                        dx[b, ch, oy * k + bi // k, ox * k + bi % k] = g[b, ch, oy, ox]
        return dx

    @numba.njit(cache=True)
    def _axis_taps(n_in, factor):
        n_out = n_in * factor
        i0 = np.empty(n_out, dtype=np.int64)
        i1 = np.empty(n_out, dtype=np.int64)
        lam = np.empty(n_out, dtype=np.float64)
        for o in range(n_out):
            src = (o + 0.5) / factor - 0.5
            if src < 0.0:
                src = 0.0
            a = int(np.floor(src))
            i0[o] = a
            i1[o] = min(a + 1, n_in - 1)
            lam[o] = src - a
        return i0, i1, lam

    @numba.njit(cache=True)
    def _upsample_fwd_nb(x, factor):
        n, c, h, w = x.shape
        y0, y1, ly = _axis_taps(h, factor)
        x0, x1, lx = _axis_taps(w, factor)
        out = np.empty((n, c, h * factor, w * factor), dtype=x.dtype)
        for b in range(n):
            for ch in range(c):
                for oy in range(h * factor):
                    wy = ly[oy]
                    for ox in range(w * factor):
                        wx = lx[ox]
                        top = (1.0 - wx) * x[b, ch, y0[oy], x0[ox]] + wx * x[b, ch, y0[oy], x1[ox]]
                        bot = (1.0 - wx) * x[b, ch, y1[oy], x0[ox]] + wx * x[b, ch, y1[oy], x1[ox]]
                        out[b, ch, oy, ox] = (1.0 - wy) * top + wy * bot
        return out

    @numba.njit(cache=True)
    def _upsample_bwd_nb(g, factor, n, c, h, w):
        y0, y1, ly = _axis_taps(h, factor)
        x0, x1, lx = _axis_taps(w, factor)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        for b in range(n):
            for ch in range(c):
                for oy in range(h * factor):
                    wy = ly[oy]
                    for ox in range(w * factor):
                        wx = lx[ox]
                        v = g[b, ch, oy, ox]
                        dx[b, ch, y0[oy], x0[ox]] += (1.0 - wy) * (1.0 - wx) * v
                        dx[b, ch, y0[oy], x1[ox]] += (1.0 - wy) * wx * v
                        dx[b, ch, y1[oy], x0[ox]] += wy * (1.0 - wx) * v
                        dx[b, ch, y1[oy], x1[ox]] += wy * wx * v
        return dx

    @numba.njit(cache=True)
    def _xent_nb(logits, labels, weights):
        n, c, h, w = logits.shape
        grad = np.empty_like(logits)
        loss = 0.0
        for b in range(n):
            for y in range(h):
                for x in range(w):
                    m = logits[b, 0, y, x]
                    for j in range(1, c):
                        if logits[b, j, y, x] > m:
                            m = logits[b, j, y, x]
                    s = 0.0
                    for j in range(c):
                        e = np.exp(logits[b, j, y, x] - m)
                        grad[b, j, y, x] = e
                        s += e
                    lab = labels[b, y, x]
                    wt = weights[b, y, x]
                    loss -= wt * (logits[b, lab, y, x] - m - np.log(s))
                    for j in range(c):
                        grad[b, j, y, x] = grad[b, j, y, x] / s * wt
                    grad[b, lab, y, x] -= wt
        return loss, grad


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def im2col(x, k, stride, pad):
    if USE_NUMBA:
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad)
    return _im2col_np(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    if USE_NUMBA:
        n, c, h, w = x_shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad)
    return _col2im_np(cols, x_shape, k, stride, pad)


def maxpool_fwd(x, k):
    if USE_NUMBA:
        return _maxpool_fwd_nb(np.ascontiguousarray(x), k)
    return _maxpool_fwd_np(x, k)


def maxpool_bwd(g, idx, x_shape, k):
    if USE_NUMBA:
        n, c, h, w = x_shape
        return _maxpool_bwd_nb(np.ascontiguousarray(g), idx, n, c, h, w, k)
    return _maxpool_bwd_np(g, idx, x_shape, k)


def upsample_fwd(x, factor):
    if USE_NUMBA:
        return _upsample_fwd_nb(np.ascontiguousarray(x), factor)
    return _upsample_fwd_np(x, factor)


def upsample_bwd(g, factor, x_shape):
    if USE_NUMBA:
        n, c, h, w = x_shape
        return _upsample_bwd_nb(np.ascontiguousarray(g), factor, n, c, h, w)
    return _upsample_bwd_np(g, factor, x_shape)


def softmax_xent(logits, labels, weights):
    """Summed weighted pixelwise cross-entropy and its gradient w.r.t. logits.

    Returns ``(loss, grad)`` where ``loss`` is a python float accumulated in
    float64 and ``grad`` has the dtype of ``logits``.
    """
    weights = weights.astype(logits.dtype, copy=False)
    if USE_NUMBA:
        loss, grad = _xent_nb(
            np.ascontiguousarray(logits),
            np.ascontiguousarray(labels.astype(np.int64, copy=False)),
            np.ascontiguousarray(weights),
        )
        return float(loss), grad
    loss, grad = _xent_np(logits, labels, weights)
    return float(loss), grad
