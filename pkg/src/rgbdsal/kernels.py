"""Hot inner loops: im2col/col2im for convolution and 2x2 max pooling.

Each kernel has a numba ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used when numba imports cleanly and
``RGBDSAL_DISABLE_NUMBA`` is unset (or "0"); ``set_backend`` switches at
runtime, which the benchmark and the equivalence tests rely on.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("RGBDSAL_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) patch matrix."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, Ho, Wo, kh, kw) -> (B, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def np_col2im(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def np_maxpool2x2(x):
    """Returns the pooled map and the flat in-window argmax (0..3, row-major)."""
    b, c, h, w = x.shape
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def np_maxpool2x2_backward(grad, arg, x_shape):
    b, c, h, w = x_shape
    win = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(win, arg[..., None], grad[..., None], axis=-1)
    return win.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _nb_im2col(x, kh, kw, stride, pad):
        b, c, h, w = x.shape
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        out = np.zeros((b, c * kh * kw, ho * wo))
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            base = oy * wo
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if xx >= 0 and xx < w:
                                    out[n, row, base + ox] = x[n, ch, y, xx]
        return out

    @numba.njit(cache=True)
    def _nb_col2im(cols, b, c, h, w, kh, kw, stride, pad):
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        out = np.zeros((b, c, h, w))
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            y = oy * stride + i - pad
                            if y < 0 or y >= h:
                                continue
                            base = oy * wo
                            for ox in range(wo):
                                xx = ox * stride + j - pad
                                if xx >= 0 and xx < w:
                                    out[n, ch, y, xx] += cols[n, row, base + ox]
        return out

    @numba.njit(cache=True)
    def _nb_maxpool2x2(x):
        b, c, h, w = x.shape
        out = np.empty((b, c, h // 2, w // 2))
        arg = np.empty((b, c, h // 2, w // 2), dtype=np.int64)
        for n in range(b):
            for ch in range(c):
                for oy in range(h // 2):
                    for ox in range(w // 2):
                        best = x[n, ch, 2 * oy, 2 * ox]
                        k = 0
                        for q in range(1, 4):
                            v = x[n, ch, 2 * oy + q // 2, 2 * ox + q % 2]
                            if v > best:
                                best = v
                                k = q
                        out[n, ch, oy, ox] = best
                        arg[n, ch, oy, ox] = k
        return out, arg

    @numba.njit(cache=True)
    def _nb_maxpool2x2_backward(grad, arg, b, c, h, w):
        out = np.zeros((b, c, h, w))
        for n in range(b):
            for ch in range(c):
                for oy in range(h // 2):
                    for ox in range(w // 2):
                        k = arg[n, ch, oy, ox]
                        out[n, ch, 2 * oy + k // 2, 2 * ox + k % 2] = grad[n, ch, oy, ox]
        return out

    def nb_im2col(x, kh, kw, stride, pad):
        return _nb_im2col(np.ascontiguousarray(x), kh, kw, stride, pad)

    def nb_col2im(cols, x_shape, kh, kw, stride, pad):
        b, c, h, w = x_shape
        return _nb_col2im(np.ascontiguousarray(cols), b, c, h, w, kh, kw, stride, pad)

    def nb_maxpool2x2(x):
        return _nb_maxpool2x2(np.ascontiguousarray(x))

    def nb_maxpool2x2_backward(grad, arg, x_shape):
        b, c, h, w = x_shape
        return _nb_maxpool2x2_backward(np.ascontiguousarray(grad), arg, b, c, h, w)


_NUMPY = {
    "im2col": np_im2col,
    "col2im": np_col2im,
    "maxpool2x2": np_maxpool2x2,
    "maxpool2x2_backward": np_maxpool2x2_backward,
}
_NUMBA = (
    {
        "im2col": nb_im2col,
        "col2im": nb_col2im,
        "maxpool2x2": nb_maxpool2x2,
        "maxpool2x2_backward": nb_maxpool2x2_backward,
    }
    if HAVE_NUMBA
    else None
)

_active = _NUMPY


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global _active
    if name == "numba":
        if _NUMBA is None:
            raise RuntimeError("numba is not available")
        _active = _NUMBA
    elif name == "numpy":
        _active = _NUMPY
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def backend():
    return "numba" if _active is _NUMBA else "numpy"


def im2col(x, kh, kw, stride, pad):
    return _active["im2col"](x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _active["col2im"](cols, x_shape, kh, kw, stride, pad)


def maxpool2x2(x):
    return _active["maxpool2x2"](x)


def maxpool2x2_backward(grad, arg, x_shape):
    return _active["maxpool2x2_backward"](grad, arg, x_shape)


set_backend("numpy" if (_NUMBA is None or _env_disabled()) else "numba")
