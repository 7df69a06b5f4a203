# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for deformable sampling and pair counting.

Layouts follow the torch convention used by the Python side:

    x       (B, C, H, W)
    offset  (B, 2K, Ho, Wo), channel 2k is the row shift of tap k and
            channel 2k + 1 its column shift
    cols    (B, C, K, Ho, Wo)

Bilinear interpolation treats everything outside the map as zero.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


cdef void _corners(const real[:, :, ::1] off, Py_ssize_t H, Py_ssize_t W,
                   int kh, int kw, int stride, int pad, int dil,
                   Py_ssize_t[:, ::1] idx, double[:, ::1] frac) noexcept nogil:
    # idx[p, 0..3] = flat index of the four corners (-1 outside the map),
    # frac[p, 0..1] = (ly, lx) for p running over (k, ho, wo).
    cdef Py_ssize_t Ho = off.shape[1], Wo = off.shape[2]
    cdef Py_ssize_t k, ki, kj, ho, wo, p = 0
    cdef Py_ssize_t y0, x0, y1, x1
    cdef double py, px, ly, lx
    cdef bint vy0, vy1, vx0, vx1
    for k in range(kh * kw):
        ki = k // kw
        kj = k % kw
        for ho in range(Ho):
            for wo in range(Wo):
                py = ho * stride - pad + ki * dil + <double>off[2 * k, ho, wo]
                px = wo * stride - pad + kj * dil + <double>off[2 * k + 1, ho, wo]
                y0 = <Py_ssize_t>floor(py)
                x0 = <Py_ssize_t>floor(px)
                ly = py - y0
                lx = px - x0
                y1 = y0 + 1
                x1 = x0 + 1
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                idx[p, 0] = y0 * W + x0 if (vy0 and vx0) else -1
                idx[p, 1] = y0 * W + x1 if (vy0 and vx1) else -1
                idx[p, 2] = y1 * W + x0 if (vy1 and vx0) else -1
                idx[p, 3] = y1 * W + x1 if (vy1 and vx1) else -1
                frac[p, 0] = ly
                frac[p, 1] = lx
                p += 1


def deform_im2col(const real[:, :, :, ::1] x, const real[:, :, :, ::1] offset,
                  int kh, int kw, int stride, int pad, int dil):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = offset.shape[2], Wo = offset.shape[3]
    cdef Py_ssize_t K = kh * kw, P = K * Ho * Wo
    if offset.shape[0] != B or offset.shape[1] != 2 * K:
        raise ValueError(f"offset shape {tuple(offset.shape)[:4]} incompatible with {K} taps")

    dtype = np.float32 if real is float else np.float64
    cols_arr = np.zeros((B, C, P), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t[:, ::1] idx = np.empty((P, 4), dtype=np.intp)
    cdef double[:, ::1] frac = np.empty((P, 2), dtype=np.float64)
    cdef Py_ssize_t b, c, p
    cdef double ly, lx, acc
    cdef const real* plane

    with nogil:
        for b in range(B):
            _corners(offset[b], H, W, kh, kw, stride, pad, dil, idx, frac)
            for c in range(C):
                plane = &x[b, c, 0, 0]
                for p in range(P):
                    ly = frac[p, 0]
                    lx = frac[p, 1]
                    acc = 0.0
                    if idx[p, 0] >= 0:
                        acc += (1 - ly) * (1 - lx) * plane[idx[p, 0]]
                    if idx[p, 1] >= 0:
                        acc += (1 - ly) * lx * plane[idx[p, 1]]
                    if idx[p, 2] >= 0:
                        acc += ly * (1 - lx) * plane[idx[p, 2]]
                    if idx[p, 3] >= 0:
                        acc += ly * lx * plane[idx[p, 3]]
                    cols[b, c, p] = <real>acc
    return cols_arr.reshape(B, C, K, Ho, Wo)


def deform_col2im(const real[:, :, :, ::1] grad_cols, const real[:, :, :, ::1] x,
                  const real[:, :, :, ::1] offset,
                  int kh, int kw, int stride, int pad, int dil):
    """Backward of :func:`deform_im2col`.

    ``grad_cols`` is laid out as (B, C, K * Ho, Wo). Returns the gradient
    with respect to ``x`` and ``offset``.
    """
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = offset.shape[2], Wo = offset.shape[3]
    cdef Py_ssize_t K = kh * kw, P = K * Ho * Wo, HoWo = Ho * Wo

    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((B, C, H * W), dtype=dtype)
    goff_arr = np.zeros((B, 2 * K, HoWo), dtype=dtype)
    cdef real[:, :, ::1] gx = gx_arr
    cdef real[:, :, ::1] goff = goff_arr
    cdef double[:, ::1] gy_acc = np.empty((P, 2), dtype=np.float64)
    cdef Py_ssize_t[:, ::1] idx = np.empty((P, 4), dtype=np.intp)
    cdef double[:, ::1] frac = np.empty((P, 2), dtype=np.float64)
    cdef Py_ssize_t b, c, p, i00, i01, i10, i11
    cdef double ly, lx, g, v00, v01, v10, v11
    cdef const real* plane
    cdef const real* gplane

    with nogil:
        for b in range(B):
            _corners(offset[b], H, W, kh, kw, stride, pad, dil, idx, frac)
            gy_acc[:, :] = 0.0
            for c in range(C):
                plane = &x[b, c, 0, 0]
                gplane = &grad_cols[b, c, 0, 0]
                for p in range(P):
                    g = gplane[p]
                    if g == 0.0:
                        continue
                    ly = frac[p, 0]
                    lx = frac[p, 1]
                    i00 = idx[p, 0]
                    i01 = idx[p, 1]
                    i10 = idx[p, 2]
                    i11 = idx[p, 3]
                    v00 = plane[i00] if i00 >= 0 else 0.0
                    v01 = plane[i01] if i01 >= 0 else 0.0
                    v10 = plane[i10] if i10 >= 0 else 0.0
                    v11 = plane[i11] if i11 >= 0 else 0.0
                    if i00 >= 0:
                        gx[b, c, i00] += <real>((1 - ly) * (1 - lx) * g)
                    if i01 >= 0:
                        gx[b, c, i01] += <real>((1 - ly) * lx * g)
                    if i10 >= 0:
                        gx[b, c, i10] += <real>(ly * (1 - lx) * g)
                    if i11 >= 0:
                        gx[b, c, i11] += <real>(ly * lx * g)
                    gy_acc[p, 0] += g * ((1 - lx) * (v10 - v00) + lx * (v11 - v01))
                    gy_acc[p, 1] += g * ((1 - ly) * (v01 - v00) + ly * (v11 - v10))
            for p in range(P):
                goff[b, 2 * (p // HoWo), p % HoWo] = <real>gy_acc[p, 0]
                goff[b, 2 * (p // HoWo) + 1, p % HoWo] = <real>gy_acc[p, 1]
    return gx_arr.reshape(B, C, H, W), goff_arr.reshape(B, 2 * K, Ho, Wo)


def kendall_counts(const double[::1] x, const double[::1] y):
    """Pair statistics for tau-b.

    Returns ``(s, tx, ty)`` where ``s`` is concordant minus discordant
    pairs and ``tx``/``ty`` count pairs tied in ``x``/``y``.
    """
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef long long s = 0, tx = 0, ty = 0
    cdef double dx, dy
    if y.shape[0] != n:
        raise ValueError("length mismatch")
    with nogil:
        for i in range(n - 1):
            for j in range(i + 1, n):
                dx = x[i] - x[j]
                dy = y[i] - y[j]
                if dx == 0:
                    tx += 1
                if dy == 0:
                    ty += 1
                if (dx > 0 and dy > 0) or (dx < 0 and dy < 0):
                    s += 1
                elif (dx > 0 and dy < 0) or (dx < 0 and dy > 0):
                    s -= 1
    return s, tx, ty
