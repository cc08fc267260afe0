# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: same-padded convolution (im2col + BLAS), binary dilation, squared EDT.

Every function mirrors a numpy routine in ``_pykernels`` with the same
signature; ``confwise.kernels`` picks one of the two at import.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from scipy.linalg cimport cython_blas as blas

cnp.import_array()

cdef double _BIG = 1e20


cdef void _gemm(char* ta, char* tb, int m, int n, int k, floating* a, int lda,
                floating* b, int ldb, floating* c, int ldc) noexcept nogil:
    # column-major C = op(A) @ op(B)
    cdef floating one = 1, zero = 0
    if floating is double:
        blas.dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)
    else:
        blas.sgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


cdef void _im2col(const floating* x, Py_ssize_t cin, Py_ssize_t h, Py_ssize_t w, Py_ssize_t k,
                  floating* cols) noexcept nogil:
    # cols[(ci, ky, kx), i * w + j] = x[ci, i + ky - pad, j + kx - pad], zero outside
    cdef Py_ssize_t pad = k // 2, n = h * w
    cdef Py_ssize_t ci, ky, kx, i, j, dy, dx, si
    cdef floating* row
    for ci in range(cin):
        for ky in range(k):
            dy = ky - pad
            for kx in range(k):
                dx = kx - pad
                row = cols + ((ci * k + ky) * k + kx) * n
                for i in range(h):
                    si = i + dy
                    if si < 0 or si >= h:
                        for j in range(w):
                            row[i * w + j] = 0
                        continue
                    for j in range(w):
                        if 0 <= j + dx < w:
                            row[i * w + j] = x[(ci * h + si) * w + j + dx]
                        else:
                            row[i * w + j] = 0


cdef void _col2im(const floating* cols, Py_ssize_t cin, Py_ssize_t h, Py_ssize_t w, Py_ssize_t k,
                  floating* gx) noexcept nogil:
    cdef Py_ssize_t pad = k // 2, n = h * w
    cdef Py_ssize_t ci, ky, kx, i, j, dy, dx, si, j0, j1
    cdef const floating* row
    cdef floating* dst
    for ci in range(cin):
        for ky in range(k):
            dy = ky - pad
            for kx in range(k):
                dx = kx - pad
                j0 = -dx if dx < 0 else 0
                j1 = w - dx if dx > 0 else w
                row = cols + ((ci * k + ky) * k + kx) * n
                for i in range(h):
                    si = i + dy
                    if si < 0 or si >= h:
                        continue
                    dst = gx + (ci * h + si) * w + dx
                    for j in range(j0, j1):
                        dst[j] += row[i * w + j]


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t n = h * wd, kk = cin * k * k, co, p
    dtype = np.float64 if floating is double else np.float32
    cols_arr = np.empty((kk, n), dtype=dtype)
    out = np.empty((cout, h, wd), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, :, ::1] y = out
    with nogil:
        _im2col(&x[0, 0, 0], cin, h, wd, k, &cols[0, 0])
        # row-major Y[cout, n] = W[cout, kk] @ cols[kk, n]
        _gemm(b"N", b"N", <int>n, <int>cout, <int>kk, &cols[0, 0], <int>n,
              &w[0, 0, 0, 0], <int>kk, &y[0, 0, 0], <int>n)
        for co in range(cout):
            for p in range(n):
                (&y[0, 0, 0])[co * n + p] += b[co]
    return out


def conv2d_backward(floating[:, :, ::1] x, floating[:, :, :, ::1] w, floating[:, :, ::1] gy, bint need_gx=True):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t n = h * wd, kk = cin * k * k, co, p
    cdef floating acc
    dtype = np.float64 if floating is double else np.float32
    cols_arr = np.empty((kk, n), dtype=dtype)
    gcols_arr = np.empty((kk, n), dtype=dtype)
    gx_arr = np.zeros((cin, h, wd), dtype=dtype)
    gw_arr = np.empty((cout, cin, k, k), dtype=dtype)
    gb_arr = np.empty(cout, dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating[:, ::1] gcols = gcols_arr
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef floating[::1] gb = gb_arr
    with nogil:
        for co in range(cout):
            acc = 0
            for p in range(n):
                acc = acc + gy[co, p // wd, p % wd]
            gb[co] = acc
        _im2col(&x[0, 0, 0], cin, h, wd, k, &cols[0, 0])
        # row-major gW[cout, kk] = gY[cout, n] @ cols[kk, n]^T
        _gemm(b"T", b"N", <int>kk, <int>cout, <int>n, &cols[0, 0], <int>n,
              &gy[0, 0, 0], <int>n, &gw[0, 0, 0, 0], <int>kk)
        if need_gx:
            # row-major gcols[kk, n] = W[cout, kk]^T @ gY[cout, n]
            _gemm(b"N", b"T", <int>n, <int>kk, <int>cout, &gy[0, 0, 0], <int>n,
                  &w[0, 0, 0, 0], <int>kk, &gcols[0, 0], <int>n)
            _col2im(&gcols[0, 0], cin, h, wd, k, &gx[0, 0, 0])
    return (gx_arr if need_gx else None), gw_arr, gb_arr


def dilate(cnp.uint8_t[:, ::1] mask, Py_ssize_t radius, bint cross):
    cdef Py_ssize_t h = mask.shape[0], wd = mask.shape[1]
    cdef Py_ssize_t i, j, di, dj, ii, jj, reach
    out_arr = np.zeros((h, wd), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    for i in range(h):
        for j in range(wd):
            if mask[i, j] == 0:
                continue
            for di in range(-radius, radius + 1):
                ii = i + di
                if ii < 0 or ii >= h:
                    continue
                reach = radius - (di if di >= 0 else -di) if cross else radius
                for dj in range(-reach, reach + 1):
                    jj = j + dj
                    if 0 <= jj < wd:
                        out[ii, jj] = 1
    return out_arr


cdef void _edt_1d(double* f, Py_ssize_t n, double* d, Py_ssize_t* v, double* z) noexcept nogil:
    # lower envelope of parabolas rooted at (q, f[q])
    cdef Py_ssize_t k = 0, q
    cdef double s
    v[0] = 0
    z[0] = -_BIG
    z[1] = _BIG
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = _BIG
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


def squared_edt(cnp.uint8_t[:, ::1] features):
    """Exact squared Euclidean distance to the nearest nonzero pixel (linear time)."""
    cdef Py_ssize_t h = features.shape[0], wd = features.shape[1]
    cdef Py_ssize_t i, j, n = h if h > wd else wd
    cdef bint any_feature = False
    out_arr = np.empty((h, wd), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    f_arr = np.empty(n, dtype=np.float64)
    d_arr = np.empty(n, dtype=np.float64)
    z_arr = np.empty(n + 1, dtype=np.float64)
    v_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] f = f_arr, d = d_arr, z = z_arr
    cdef Py_ssize_t[::1] v = v_arr
    for i in range(h):
        for j in range(wd):
            if features[i, j]:
                any_feature = True
    if not any_feature:
        out_arr.fill(np.inf)
        return out_arr
    for j in range(wd):
        for i in range(h):
            f[i] = 0.0 if features[i, j] else _BIG
        _edt_1d(&f[0], h, &d[0], &v[0], &z[0])
        for i in range(h):
            out[i, j] = d[i]
    for i in range(h):
        for j in range(wd):
            f[j] = out[i, j]
        _edt_1d(&f[0], wd, &d[0], &v[0], &z[0])
        for j in range(wd):
            out[i, j] = d[j]
    return out_arr
