# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled DOP853 integration of the ERTBP augmented variational system.

Same layout, error norm and step control as the numpy path in dynamics.py;
each trajectory is integrated independently with its own adaptive step.
"""

from cython.parallel import prange
from libc.math cimport sqrt, cos, sin, fabs, pow, isfinite, fmin, fmax
from libc.stdlib cimport malloc, free

cdef int NS = 12
cdef double SAFETY = 0.9
cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 10.0
cdef double TWO_PI = 6.283185307179586


cdef struct Params:
    double mu
    double e
    double ahat
    double phi0
    int fM
    int fP
    int fE
    int fS
    int D


cdef inline void amul(const double* gh, const double* v, double* out) noexcept nogil:
    # A v with A the ERTBP Jacobian; gh is g * Hess(potential), row-major 3x3
    out[0] = v[1] + v[3]
    out[1] = -v[0] + v[4]
    out[2] = v[5]
    out[3] = -v[0] + gh[0] * v[0] + gh[1] * v[1] + gh[2] * v[2] + v[4]
    out[4] = -v[1] + gh[3] * v[0] + gh[4] * v[1] + gh[5] * v[2] - v[3]
    out[5] = -v[2] + gh[6] * v[0] + gh[7] * v[1] + gh[8] * v[2]


cdef int rhs(double t, const double* y, double* dy, Params* p) noexcept nogil:
    cdef double mu = p.mu
    cdef double m1 = 1.0 - mu
    cdef double m2 = mu
    cdef double d1[3]
    cdef double d2[3]
    cdef double grad[3]
    cdef double hess[9]
    cdef double gh[9]
    cdef double tmp[6]
    cdef double col[6]
    cdef double third[3]
    cdef double r1, r2, r1_3, r2_3, r1_5, r2_5, c, s, den, g, dge, dgp
    cdef double du, dw, uw, m, r5, r7
    cdef int i, j, k, off
    cdef const double* d
    d1[0] = y[0] - mu
    d1[1] = y[1]
    d1[2] = y[2]
    d2[0] = y[0] - mu + 1.0
    d2[1] = y[1]
    d2[2] = y[2]
    r1 = sqrt(d1[0] * d1[0] + d1[1] * d1[1] + d1[2] * d1[2])
    r2 = sqrt(d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2])
    if r1 < 1e-8 or r2 < 1e-8:
        return -1
    c = cos(TWO_PI * (p.phi0 + p.ahat * t))
    s = sin(TWO_PI * (p.phi0 + p.ahat * t))
    den = 1.0 + p.e * c
    g = 1.0 / den
    dge = -c / (den * den)
    dgp = TWO_PI * p.e * s / (den * den)
    r1_3 = r1 * r1 * r1
    r2_3 = r2 * r2 * r2
    r1_5 = r1_3 * r1 * r1
    r2_5 = r2_3 * r2 * r2
    for i in range(3):
        grad[i] = y[i] - m1 * d1[i] / r1_3 - m2 * d2[i] / r2_3
    dy[0] = y[3] + y[1]
    dy[1] = y[4] - y[0]
    dy[2] = y[5]
    dy[3] = dy[1] + g * grad[0]
    dy[4] = -dy[0] + g * grad[1]
    dy[5] = -y[2] + g * grad[2]
    if not (p.fM or p.fP or p.fE or p.fS):
        return 0
    for i in range(3):
        for j in range(3):
            hess[3 * i + j] = 3.0 * m1 * d1[i] * d1[j] / r1_5 + 3.0 * m2 * d2[i] * d2[j] / r2_5
        hess[4 * i] += 1.0 - m1 / r1_3 - m2 / r2_3
    for i in range(9):
        gh[i] = g * hess[i]
    off = 6
    if p.fM:
        for j in range(6):
            for i in range(6):
                col[i] = y[off + 6 * i + j]
            amul(gh, col, tmp)
            for i in range(6):
                dy[off + 6 * i + j] = tmp[i]
        off += 36
    if p.fP:
        amul(gh, y + off, dy + off)
        for i in range(3):
            dy[off + 3 + i] += dgp * grad[i]
        off += 6
    if p.fE:
        amul(gh, y + off, dy + off)
        for i in range(3):
            dy[off + 3 + i] += dge * grad[i]
        off += 6
    if p.fS:
        # u, w, V
        amul(gh, y + off, dy + off)
        amul(gh, y + off + 6, dy + off + 6)
        for i in range(3):
            dy[off + 9 + i] += dge * grad[i]
        amul(gh, y + off + 12, dy + off + 12)
        for i in range(3):
            third[i] = 0.0
        for k in range(2):
            if k == 0:
                d = d1
                m = m1
                r5 = r1_5
                r7 = r1_5 * r1 * r1
            else:
                d = d2
                m = m2
                r5 = r2_5
                r7 = r2_5 * r2 * r2
            du = d[0] * y[off] + d[1] * y[off + 1] + d[2] * y[off + 2]
            dw = d[0] * y[off + 6] + d[1] * y[off + 7] + d[2] * y[off + 8]
            uw = y[off] * y[off + 6] + y[off + 1] * y[off + 7] + y[off + 2] * y[off + 8]
            for i in range(3):
                third[i] += 3.0 * m / r5 * (y[off + i] * dw + y[off + 6 + i] * du + d[i] * uw)
                third[i] -= 15.0 * m / r7 * du * dw * d[i]
        for i in range(3):
            dy[off + 15 + i] += g * third[i] + dge * (hess[3 * i] * y[off] + hess[3 * i + 1] * y[off + 1] + hess[3 * i + 2] * y[off + 2])
    return 0


cdef double rms_scaled(const double* v, const double* y0, const double* y1, double rtol, double atol, int D) noexcept nogil:
    cdef double acc = 0.0, sc
    cdef int i
    for i in range(D):
        sc = atol + fabs(y0[i]) * rtol
        acc += (v[i] / sc) * (v[i] / sc)
    return sqrt(acc / D)


cdef int integrate_one(double* y, double tend, Params* p, double rtol, double atol, long max_steps, int event,
                       const double* A, const double* Bw, const double* C, const double* E3, const double* E5,
                       long* nsteps, long* nrej, double* ct, double* cy) noexcept nogil:
    cdef int D = p.D
    cdef double* K = <double*> malloc((NS + 1) * D * sizeof(double))
    cdef double* ys = <double*> malloc(D * sizeof(double))
    cdef double* yn = <double*> malloc(D * sizeof(double))
    cdef double* y1 = <double*> malloc(D * sizeof(double))
    cdef double* f1 = <double*> malloc(D * sizeof(double))
    cdef double t = 0.0, h, hs, dirn, d0, d1, d2, h0, h1, dm, remaining, err, n5, n3, sc, e5, e3, fac, denom
    cdef int i, s, j, status = 0, ok
    cdef long steps = 0, rej = 0
    if tend == 0.0:
        free(K); free(ys); free(yn); free(y1); free(f1)
        return 0
    dirn = 1.0 if tend > 0 else -1.0
    if rhs(0.0, y, K, p) != 0:
        status = -1
    if status == 0:
        d0 = rms_scaled(y, y, y, rtol, atol, D)
        d1 = rms_scaled(K, y, y, rtol, atol, D)
        if d0 < 1e-5 or d1 < 1e-5:
            h0 = 1e-6
        else:
            h0 = 0.01 * d0 / d1
        for i in range(D):
            y1[i] = y[i] + h0 * dirn * K[i]
        if rhs(h0 * dirn, y1, f1, p) != 0:
            status = -1
        else:
            for i in range(D):
                f1[i] = f1[i] - K[i]
            d2 = rms_scaled(f1, y, y, rtol, atol, D) / h0
            dm = fmax(d1, d2)
            if dm <= 1e-15:
                h1 = fmax(1e-6, h0 * 1e-3)
            else:
                h1 = pow(0.01 / dm, 1.0 / 8.0)
            h = fmin(100 * h0, h1)
    while status == 0:
        remaining = fabs(tend - t)
        if h > remaining:
            h = remaining
        hs = h * dirn
        for s in range(1, NS):
            for i in range(D):
                ys[i] = 0.0
            for j in range(s):
                for i in range(D):
                    ys[i] += A[s * NS + j] * K[j * D + i]
            for i in range(D):
                ys[i] = y[i] + ys[i] * hs
            if rhs(t + C[s] * hs, ys, K + s * D, p) != 0:
                status = -1
                break
        if status != 0:
            break
        for i in range(D):
            yn[i] = 0.0
        for j in range(NS):
            for i in range(D):
                yn[i] += Bw[j] * K[j * D + i]
        for i in range(D):
            yn[i] = y[i] + yn[i] * hs
            if not isfinite(yn[i]):
                status = -1
        if status != 0:
            break
        if rhs(t + hs, yn, K + NS * D, p) != 0:
            status = -1
            break
        n5 = 0.0
        n3 = 0.0
        for i in range(D):
            sc = atol + fmax(fabs(y[i]), fabs(yn[i])) * rtol
            e5 = 0.0
            e3 = 0.0
            for j in range(NS + 1):
                e5 += E5[j] * K[j * D + i]
                e3 += E3[j] * K[j * D + i]
            e5 /= sc
            e3 /= sc
            n5 += e5 * e5
            n3 += e3 * e3
        denom = n5 + 0.01 * n3
        if denom > 0:
            err = h * n5 / sqrt(denom * D)
        else:
            err = 0.0
        if err == 0.0:
            fac = MAX_FACTOR
        else:
            fac = fmin(MAX_FACTOR, fmax(MIN_FACTOR, SAFETY * pow(err, -1.0 / 8.0)))
        if err < 1.0:
            if event >= 0 and steps > 0 and y[event] <= 0 and yn[event] > 0:
                ct[0] = t
                for i in range(D):
                    cy[i] = y[i]
                status = 2
            for i in range(D):
                y[i] = yn[i]
                K[i] = K[NS * D + i]
            t = t + hs
            steps += 1
            if fabs(tend - t) <= 1e-15 * fmax(1.0, fabs(tend)):
                t = tend
                if status == 0:
                    status = 1
        else:
            fac = fmin(fac, 1.0)
            rej += 1
        h = h * fac
        if status == 0 and h < 1e-14 * fmax(1.0, fabs(tend)):
            status = -2
        if status == 0 and steps + rej > max_steps:
            status = -3
    nsteps[0] = steps
    nrej[0] = rej
    free(K); free(ys); free(yn); free(y1); free(f1)
    if status == 1:
        return 0
    return status


def integrate_ertbp(double[:, ::1] Y, const double[::1] phi0, const double[::1] tend, double mu, double e, double ahat,
                    const long[::1] flags, double rtol, double atol, long max_steps, int event,
                    long[::1] steps, long[::1] rej, long[::1] status, double[::1] cross_t, double[:, ::1] cross_y,
                    const double[:, ::1] A, const double[::1] Bw, const double[::1] C, const double[::1] E3, const double[::1] E5, int threads):
    cdef Py_ssize_t nb = Y.shape[0]
    cdef Py_ssize_t b
    cdef int D = Y.shape[1]
    cdef int nt = threads if threads > 0 else 1
    cdef Params p
    p.mu = mu
    p.e = e
    p.ahat = ahat
    p.fM = flags[0]
    p.fP = flags[1]
    p.fE = flags[2]
    p.fS = flags[3]
    p.D = D
    cdef Params q
    for b in prange(nb, nogil=True, num_threads=nt, schedule="dynamic"):
        q = p
        q.phi0 = phi0[b]
        status[b] = integrate_one(&Y[b, 0], tend[b], &q, rtol, atol, max_steps, event, &A[0, 0], &Bw[0], &C[0],
                                  &E3[0], &E5[0], &steps[b], &rej[b], &cross_t[b], &cross_y[b, 0])
