# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Same contracts as ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double


cdef extern from *:
    """
    /* restrict-qualified loops so the compiler can vectorize them */
    #define SELU_L 1.0507009873554805
    #define SELU_LA (1.0507009873554805 * 1.6732632423543772)
    #define DEF_KERNELS(T, SUF)                                                        \
    static void selu_select_##SUF(T *restrict z, const T *restrict ez,                 \
                                  T *restrict d, Py_ssize_t n) {                       \
        const T lam = (T)SELU_L, la = (T)SELU_LA;                                      \
        for (Py_ssize_t i = 0; i < n; i++) {                                           \
            /* 0/1 blend instead of ?: so gcc if-converts; exact for finite v */   \
            T v = z[i], e = ez[i];                                                     \
            T sp = (T)(v > 0), sn = (T)1 - sp;                                         \
            z[i] = sp * (lam * v) + sn * (la * (e - (T)1));                            \
            d[i] = sp * lam + sn * (la * e);                                           \
        }                                                                              \
    }                                                                                  \
    static void add_rows_##SUF(const T *restrict a, const T *restrict b,               \
                               T *restrict out, Py_ssize_t h) {                        \
        for (Py_ssize_t j = 0; j < h; j++) out[j] = a[j] + b[j];                       \
    }                                                                                  \
    static void scale_row_##SUF(T *restrict d, const T *restrict v, T w,               \
                                Py_ssize_t h) {                                        \
        for (Py_ssize_t j = 0; j < h; j++) d[j] = d[j] * v[j] * w;                     \
    }
    DEF_KERNELS(float, f)
    DEF_KERNELS(double, d)
    """
    void selu_select_f(float *z, const float *ez, float *d, Py_ssize_t n) nogil
    void selu_select_d(double *z, const double *ez, double *d, Py_ssize_t n) nogil
    void add_rows_f(const float *a, const float *b, float *out, Py_ssize_t h) nogil
    void add_rows_d(const double *a, const double *b, double *out, Py_ssize_t h) nogil
    void scale_row_f(float *d, const float *v, float w, Py_ssize_t h) nogil
    void scale_row_d(double *d, const double *v, double w, Py_ssize_t h) nogil


def outer_add(const real[:, ::1] p, const real[:, ::1] g, real[:, ::1] out):
    cdef Py_ssize_t n = p.shape[0], k = g.shape[0], h = p.shape[1]
    cdef Py_ssize_t i, kk
    if g.shape[1] != h or out.shape[0] != n * k or out.shape[1] != h:
        raise ValueError("shape mismatch in outer_add")
    if n == 0 or k == 0:
        return
    with nogil:
        for i in range(n):
            for kk in range(k):
                if real is float:
                    add_rows_f(&p[i, 0], &g[kk, 0], &out[i * k + kk, 0], h)
                else:
                    add_rows_d(&p[i, 0], &g[kk, 0], &out[i * k + kk, 0], h)


def selu_select(real[:, ::1] z, const real[:, ::1] ez, real[:, ::1] deriv):
    # ez holds exp(min(z, 0)); the exp itself runs through numpy's SIMD loops
    cdef Py_ssize_t m = z.shape[0], h = z.shape[1]
    if ez.shape[0] != m or ez.shape[1] != h or deriv.shape[0] != m or deriv.shape[1] != h:
        raise ValueError("shape mismatch in selu_select")
    if m == 0 or h == 0:
        return
    with nogil:
        if real is float:
            selu_select_f(&z[0, 0], &ez[0, 0], &deriv[0, 0], m * h)
        else:
            selu_select_d(&z[0, 0], &ez[0, 0], &deriv[0, 0], m * h)


def scale_outer(real[:, ::1] d, const real[::1] w, const real[::1] v):
    cdef Py_ssize_t m = d.shape[0], h = d.shape[1]
    cdef Py_ssize_t i
    if w.shape[0] != m or v.shape[0] != h:
        raise ValueError("shape mismatch in scale_outer")
    if m == 0 or h == 0:
        return
    with nogil:
        for i in range(m):
            if real is float:
                scale_row_f(&d[i, 0], &v[0], w[i], h)
            else:
                scale_row_d(&d[i, 0], &v[0], w[i], h)


def pair_softmin(const double[:, ::1] s, double alpha, double h, double plateau,
                 double[::1] q, double[:, ::1] w):
    cdef Py_ssize_t m = s.shape[0], k = s.shape[1]
    cdef Py_ssize_t i, j, cnt
    cdef double mn, tot, e
    counts = np.zeros(m, dtype=np.int64)
    cdef long long[::1] cview = counts
    with nogil:
        for i in range(m):
            mn = INFINITY
            cnt = 0
            for j in range(k):
                if s[i, j] < h:
                    cnt += 1
                    if s[i, j] < mn:
                        mn = s[i, j]
            cview[i] = cnt
            if cnt == 0:
                q[i] = plateau
                for j in range(k):
                    w[i, j] = 0.0
                continue
            tot = 0.0
            for j in range(k):
                if s[i, j] < h:
                    e = exp(-(s[i, j] - mn) / alpha)
                    w[i, j] = e
                    tot += e
                else:
                    w[i, j] = 0.0
            q[i] = mn - alpha * log(tot)
            for j in range(k):
                w[i, j] = w[i, j] / tot
    return counts


def feasibility_matrix(const double[:, :, ::1] rot, const double[:, ::1] trans,
                       const double[:, ::1] gpos, const double[:, ::1] gapp,
                       const double[::1] center, double radius, double z_min, double cos_half,
                       double x_lo, double x_hi, double y_lo, double y_hi):
    cdef Py_ssize_t P = rot.shape[0], K = gpos.shape[0]
    cdef Py_ssize_t i, k
    cdef double cx, cy, cz, az, dx, dy, dz, r2 = radius * radius
    out = np.zeros((P, K), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    with nogil:
        for i in range(P):
            for k in range(K):
                az = rot[i, 2, 0] * gapp[k, 0] + rot[i, 2, 1] * gapp[k, 1] + rot[i, 2, 2] * gapp[k, 2]
                if not (-az >= cos_half):
                    continue
                cz = rot[i, 2, 0] * gpos[k, 0] + rot[i, 2, 1] * gpos[k, 1] + rot[i, 2, 2] * gpos[k, 2] + trans[i, 2]
                if not (cz > z_min):
                    continue
                cx = rot[i, 0, 0] * gpos[k, 0] + rot[i, 0, 1] * gpos[k, 1] + rot[i, 0, 2] * gpos[k, 2] + trans[i, 0]
                cy = rot[i, 1, 0] * gpos[k, 0] + rot[i, 1, 1] * gpos[k, 1] + rot[i, 1, 2] * gpos[k, 2] + trans[i, 1]
                if cx < x_lo or cx > x_hi or cy < y_lo or cy > y_hi:
                    continue
                dx = cx - center[0]
                dy = cy - center[1]
                dz = cz - center[2]
                if dx * dx + dy * dy + dz * dz <= r2:
                    o[i, k] = 1
    return out
