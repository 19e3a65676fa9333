"""NumPy implementations of the compiled kernels in ``_kernels.pyx``.

Used when the extension is not built, or when ``RENET_PURE_PYTHON=1``.
Accumulation order matches the compiled loops so both backends agree
bit-for-bit on non-overlapping pooling windows.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (c, kh, kw, n, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    blocks = cols.reshape(c, kh, kw, n, oh, ow).transpose(1, 2, 3, 0, 4, 5)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += blocks[ki, kj]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride):
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=-1)  # first maximum in row-major order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + arg // k
    cols = np.arange(ow)[None, :] * stride + arg % k
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(dout, idx, h, w):
    n, c = dout.shape[:2]
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat = np.zeros(n * c * h * w, dtype=dout.dtype)
    np.add.at(flat, (idx + base).ravel(), dout.ravel())
    return flat.reshape(n, c, h, w)


def bilinear_sample(img, us, vs, fill):
    h, w = img.shape
    x0 = np.floor(us).astype(np.intp)
    y0 = np.floor(vs).astype(np.intp)
    fx = us - x0
    fy = vs - y0
    src = img.astype(np.float64)

    def tap(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = np.full(us.shape, fill, dtype=np.float64)
        vals[ok] = src[yy[ok], xx[ok]]
        return vals

    p00 = tap(y0, x0)
    p01 = tap(y0, x0 + 1)
    p10 = tap(y0 + 1, x0)
    p11 = tap(y0 + 1, x0 + 1)
    return (p00 * (1.0 - fx) + p01 * fx) * (1.0 - fy) + (p10 * (1.0 - fx) + p11 * fx) * fy
