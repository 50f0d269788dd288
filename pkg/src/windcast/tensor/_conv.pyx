# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gather/scatter kernels for the im2col formulation of conv3d.

Column layout: row ``((c*kt + a)*kh + i)*kw + j``, column ``(t*ho + h)*wo + w``.
Both kernels expect an already zero-padded input volume.
"""

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, :, ::1] xp, real[:, :, ::1] cols,
             int kt, int kh, int kw, int st, int sh, int sw,
             int to, int ho, int wo):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1]
    cdef Py_ssize_t b, c, a, i, j, t, h, w, row, col, ti, hi
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for a in range(kt):
                    for i in range(kh):
                        for j in range(kw):
                            row = ((c * kt + a) * kh + i) * kw + j
                            col = 0
                            for t in range(to):
                                ti = t * st + a
                                for h in range(ho):
                                    hi = h * sh + i
                                    for w in range(wo):
                                        cols[b, row, col] = xp[b, c, ti, hi, w * sw + j]
                                        col += 1


def col2im3d(real[:, :, ::1] cols, real[:, :, :, :, ::1] dxp,
             int kt, int kh, int kw, int st, int sh, int sw,
             int to, int ho, int wo):
    # accumulates into dxp; caller supplies a zeroed buffer
    cdef Py_ssize_t nb = dxp.shape[0], nc = dxp.shape[1]
    cdef Py_ssize_t b, c, a, i, j, t, h, w, row, col, ti, hi
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for a in range(kt):
                    for i in range(kh):
                        for j in range(kw):
                            row = ((c * kt + a) * kh + i) * kw + j
                            col = 0
                            for t in range(to):
                                ti = t * st + a
                                for h in range(ho):
                                    hi = h * sh + i
                                    for w in range(wo):
                                        dxp[b, c, ti, hi, w * sw + j] += cols[b, row, col]
                                        col += 1
