"""Pure-numpy reference implementations of the hot kernels.

These are the fallback backend when the compiled extension is unavailable,
and the ground truth the extension is tested against.
"""

import numpy as np


def im2col(x, kh, kw, sh, sw, ph0, ph1, pw0, pw1):
    """Extract conv patches from x (B,H,W,C) into (B*OH*OW, kh*kw*C).

    Zero padding is applied implicitly: ph0/ph1 rows above/below, pw0/pw1
    columns left/right.
    """
    b, h, w, c = x.shape
    oh = (h + ph0 + ph1 - kh) // sh + 1
    ow = (w + pw0 + pw1 - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H', W', C, kh, kw) -> strided pick, then patch-major layout
    win = win[:, ::sh, ::sw]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, kh * kw * c)
    return np.ascontiguousarray(cols)


def col2im(cols, b, h, w, c, kh, kw, sh, sw, ph0, ph1, pw0, pw1):
    """Adjoint of im2col: scatter-add patch gradients back to (B,H,W,C)."""
    oh = (h + ph0 + ph1 - kh) // sh + 1
    ow = (w + pw0 + pw1 - kw) // sw + 1
    xp = np.zeros((b, h + ph0 + ph1, w + pw0 + pw1, c), dtype=cols.dtype)
    g = cols.reshape(b, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + oh * sh : sh, j : j + ow * sw : sw, :] += g[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, ph0 : ph0 + h, pw0 : pw0 + w, :])


def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One Adam update. Mutates m and v in place, returns the new parameter.

    bc1/bc2 are the bias-correction denominators (1 - beta^t).
    """
    np.multiply(m, beta1, out=m)
    m += (1.0 - beta1) * g
    np.multiply(v, beta2, out=v)
    v += (1.0 - beta2) * (g * g)
    mhat = m / bc1
    vhat = v / bc2
    return p - lr * mhat / (np.sqrt(vhat) + eps)
