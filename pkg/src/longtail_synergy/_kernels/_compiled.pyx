# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled loss kernels. Same contracts as ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, fabs, INFINITY

cnp.import_array()


def scl_fwd_bwd(const double[:, ::1] z, const long long[::1] labels, double tau):
    cdef Py_ssize_t b = z.shape[0], d = z.shape[1]
    cdef Py_ssize_t i, k
    zn = np.asarray(z)
    # the two dense products go through BLAS; the masked softmax rows stay here
    sim_arr = np.ascontiguousarray(zn @ zn.T) / tau
    cdef double[:, ::1] sim = sim_arr
    g_arr = np.zeros((b, b))
    cdef double[:, ::1] g = g_arr
    cdef long long[::1] n_pos = np.zeros(b, dtype=np.int64)
    cdef double row_max, den, log_den, pos_sum, value = 0.0
    cdef long long n_anchor = 0

    for i in range(b):
        for k in range(b):
            if k != i and labels[k] == labels[i]:
                n_pos[i] += 1
        if n_pos[i] > 0:
            n_anchor += 1
    if n_anchor == 0:
        return 0.0, np.zeros((b, d))

    for i in range(b):
        if n_pos[i] == 0:
            continue
        row_max = -INFINITY
        for k in range(b):
            if k != i and sim[i, k] > row_max:
                row_max = sim[i, k]
        den = 0.0
        pos_sum = 0.0
        for k in range(b):
            if k == i:
                continue
            den += exp(sim[i, k] - row_max)
            if labels[k] == labels[i]:
                pos_sum += sim[i, k]
        log_den = log(den) + row_max
        value += log_den - pos_sum / n_pos[i]
        for k in range(b):
            if k == i:
                continue
            g[i, k] = exp(sim[i, k] - row_max) / den
            if labels[k] == labels[i]:
                g[i, k] -= 1.0 / n_pos[i]
            g[i, k] /= n_anchor

    out = ((g_arr + g_arr.T) / tau) @ zn
    return value / n_anchor, out


def ldam_fwd_bwd(const double[:, ::1] logits, const long long[::1] labels,
                 const double[::1] deltas, double s):
    cdef Py_ssize_t b = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef long long y
    cdef double a, a_max, den, value = 0.0
    out = np.empty((b, c))
    cdef double[:, ::1] grad = out
    for i in range(b):
        y = labels[i]
        a_max = -INFINITY
        for j in range(c):
            a = s * (logits[i, j] - (deltas[y] if j == y else 0.0))
            grad[i, j] = a
            if a > a_max:
                a_max = a
        den = 0.0
        for j in range(c):
            grad[i, j] = exp(grad[i, j] - a_max)
            den += grad[i, j]
        value += log(den) + a_max - s * (logits[i, y] - deltas[y])
        for j in range(c):
            grad[i, j] = grad[i, j] / den
        grad[i, y] -= 1.0
        for j in range(c):
            grad[i, j] *= s / b
    return value / b, out


def center_fwd_bwd(const double[:, ::1] x, const double[:, :, ::1] centers,
                   const double[:, ::1] gamma):
    cdef Py_ssize_t b = x.shape[0], kk = centers.shape[1], m = x.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double diff, dist, value = 0.0
    gx_arr = np.zeros((b, m))
    gc_arr = np.empty((b, kk, m))
    gg_arr = np.empty((b, kk))
    cdef double[:, ::1] g_x = gx_arr
    cdef double[:, :, ::1] g_c = gc_arr
    cdef double[:, ::1] g_gamma = gg_arr
    for i in range(b):
        for k in range(kk):
            dist = 0.0
            for j in range(m):
                diff = x[i, j] - centers[i, k, j]
                dist += diff * diff
                g_x[i, j] += 2.0 * gamma[i, k] * diff / b
                g_c[i, k, j] = -2.0 * gamma[i, k] * diff / b
            value += gamma[i, k] * dist
            g_gamma[i, k] = dist / b
    return value / b, gx_arr, gc_arr, gg_arr


def mv_fwd_bwd(const double[:, :, ::1] t, const double[:, :, ::1] r,
               const double[:, :, ::1] f, double eps):
    cdef Py_ssize_t n = t.shape[0], c = t.shape[1], p = t.shape[2]
    cdef Py_ssize_t i, j, q
    cdef double nt, nr, nf, ntf, nrf, dot, cos, dcos, inv, tc, rc, gap, sg
    cdef double term1 = 0.0, term2 = 0.0
    gt_arr = np.zeros((n, c, p))
    gr_arr = np.zeros((n, c, p))
    gf_arr = np.zeros((n, c, p))
    cdef double[:, :, ::1] g_t = gt_arr
    cdef double[:, :, ::1] g_r = gr_arr
    cdef double[:, :, ::1] g_f = gf_arr
    for i in range(n):
        for q in range(p):
            nt = 0.0
            nr = 0.0
            nf = 0.0
            dot = 0.0
            for j in range(c):
                nt += t[i, j, q] * t[i, j, q]
                nr += r[i, j, q] * r[i, j, q]
                nf += f[i, j, q] * f[i, j, q]
                dot += t[i, j, q] * r[i, j, q]
            nt = sqrt(nt)
            nr = sqrt(nr)
            nf = sqrt(nf)
            if nt >= eps or nr >= eps:
                ntf = nt if nt > eps else eps
                nrf = nr if nr > eps else eps
                cos = dot / (ntf * nrf)
                term1 += fabs(cos - 1.0)
                dcos = (1.0 if cos > 1.0 else -1.0) / n
                inv = 1.0 / (ntf * nrf)
                tc = cos / (ntf * ntf) if nt >= eps else 0.0
                rc = cos / (nrf * nrf) if nr >= eps else 0.0
                for j in range(c):
                    g_t[i, j, q] += dcos * (r[i, j, q] * inv - t[i, j, q] * tc)
                    g_r[i, j, q] += dcos * (t[i, j, q] * inv - r[i, j, q] * rc)
            gap = nt - nf
            term2 += fabs(gap)
            sg = (1.0 if gap > 0 else (-1.0 if gap < 0 else 0.0)) / n
            if sg != 0.0:
                for j in range(c):
                    if nt > 0:
                        g_t[i, j, q] += sg * t[i, j, q] / nt
                    if nf > 0:
                        g_f[i, j, q] -= sg * f[i, j, q] / nf
    return term1 / n, term2 / n, gt_arr, gr_arr, gf_arr


def icd(const double[:, ::1] features, const long long[::1] labels, Py_ssize_t num_classes):
    cdef Py_ssize_t n = features.shape[0], d = features.shape[1]
    cdef Py_ssize_t i, j
    cdef long long y
    cdef double acc, diff
    center_arr = np.zeros((num_classes, d))
    count_arr = np.zeros(num_classes, dtype=np.int64)
    out_arr = np.zeros(num_classes)
    cdef double[:, ::1] center = center_arr
    cdef long long[::1] count = count_arr
    cdef double[::1] out = out_arr
    for i in range(n):
        y = labels[i]
        count[y] += 1
        for j in range(d):
            center[y, j] += features[i, j]
    for y in range(num_classes):
        if count[y] > 0:
            for j in range(d):
                center[y, j] /= count[y]
    for i in range(n):
        y = labels[i]
        acc = 0.0
        for j in range(d):
            diff = features[i, j] - center[y, j]
            acc += diff * diff
        out[y] += sqrt(acc)
    for y in range(num_classes):
        out[y] = out[y] / count[y] if count[y] > 0 else np.nan
    return out_arr
