"""Pure-numpy fallback for the compiled im2col/col2im kernels.

Same signatures and column layout as ``_conv.pyx``; each kernel offset is
one strided slice copy, so the accumulation order in :func:`col2im3d`
matches the compiled loop and results agree bitwise.
"""

import numpy as np


def im2col3d(xp, cols, kt, kh, kw, st, sh, sw, to, ho, wo):
    nb, nc = xp.shape[:2]
    view = cols.reshape(nb, nc, kt, kh, kw, to, ho, wo)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                view[:, :, a, i, j] = xp[:, :,
                                         a:a + st * (to - 1) + 1:st,
                                         i:i + sh * (ho - 1) + 1:sh,
                                         j:j + sw * (wo - 1) + 1:sw]


def col2im3d(cols, dxp, kt, kh, kw, st, sh, sw, to, ho, wo):
    nb, nc = dxp.shape[:2]
    view = cols.reshape(nb, nc, kt, kh, kw, to, ho, wo)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                dxp[:, :,
                    a:a + st * (to - 1) + 1:st,
                    i:i + sh * (ho - 1) + 1:sh,
                    j:j + sw * (wo - 1) + 1:sw] += view[:, :, a, i, j]
