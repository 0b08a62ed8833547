# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

Mirrors ``_ref.py``: raw-sum moments over observations sorted by the
threshold variable, Cholesky solves with a single diagonal ridge retry, and
identical status-code semantics.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, NAN, isfinite, sqrt
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport ddot

cnp.import_array()


cdef inline double dot_range(const double* x, const double* y, int n) nogil:
    cdef int one = 1
    if n <= 0:
        return 0.0
    return ddot(&n, x, &one, y, &one)

OK = 0
TOO_SMALL = 1
SINGULAR = 2

cdef double RIDGE_SCALE = 1e-10


# ---------------------------------------------------------------------------
# small dense linear algebra (row-major, nogil)
# ---------------------------------------------------------------------------


cdef int chol_factor(double* a, int n) nogil:
    cdef int i, j, k
    cdef double s, d
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= a[j * n + k] * a[j * n + k]
        if not (s > 0.0) or not isfinite(s):
            return 1
        d = sqrt(s)
        a[j * n + j] = d
        for i in range(j + 1, n):
            s = a[i * n + j]
            for k in range(j):
                s -= a[i * n + k] * a[j * n + k]
            a[i * n + j] = s / d
    return 0


cdef void chol_solve(const double* L, double* b, int n, int m) nogil:
    # solves L L' X = B with B (n x m) row-major, in place
    cdef int i, j, k
    cdef double s
    for j in range(m):
        for i in range(n):
            s = b[i * m + j]
            for k in range(i):
                s -= L[i * n + k] * b[k * m + j]
            b[i * m + j] = s / L[i * n + i]
        for i in range(n - 1, -1, -1):
            s = b[i * m + j]
            for k in range(i + 1, n):
                s -= L[k * n + i] * b[k * m + j]
            b[i * m + j] = s / L[i * n + i]


cdef int pd_solve(const double* a, double* b, double* fac, int n, int m) nogil:
    # solve a X = B for symmetric PD a; B in place; one ridge retry
    cdef int i
    cdef double tr = 0.0, ridge
    memcpy(fac, a, n * n * sizeof(double))
    if chol_factor(fac, n) == 0:
        chol_solve(fac, b, n, m)
        return 0
    for i in range(n):
        tr += a[i * n + i]
    ridge = RIDGE_SCALE * tr / n
    if not ridge > 0.0:
        return 1
    memcpy(fac, a, n * n * sizeof(double))
    for i in range(n):
        fac[i * n + i] += ridge
    if chol_factor(fac, n) != 0:
        return 1
    chol_solve(fac, b, n, m)
    return 0


cdef void mat_mul(const double* a, const double* b, double* c, int n, int k, int m) nogil:
    # c (n x m) = a (n x k) @ b (k x m)
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += a[i * k + l] * b[l * m + j]
            c[i * m + j] = s


cdef void mat_mul_nt(const double* a, const double* b, double* c, int n, int k, int m) nogil:
    # c (n x m) = a (n x k) @ b' with b (m x k)
    cdef int i, j, l
    cdef double s
    for i in range(n):
        for j in range(m):
            s = 0.0
            for l in range(k):
                s += a[i * k + l] * b[j * k + l]
            c[i * m + j] = s


cdef void symmetrize(double* a, int n) nogil:
    cdef int i, j
    cdef double s
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (a[i * n + j] + a[j * n + i])
            a[i * n + j] = s
            a[j * n + i] = s


cdef bint all_zero(const double* d, int n) nogil:
    cdef int i
    for i in range(n):
        if d[i] != 0.0:
            return 0
    return 1


cdef double quad_form(const double* v, const double* d, double* work, double* fac, int n) nogil:
    # d' v^{-1} d with PD v; NAN on failure; exact-zero d gives 0
    cdef int i
    cdef double s = 0.0
    if all_zero(d, n):
        return 0.0
    memcpy(work, d, n * sizeof(double))
    if pd_solve(v, work, fac, n, 1):
        return NAN
    for i in range(n):
        s += d[i] * work[i]
    if not isfinite(s):
        return NAN
    return s if s > 0.0 else 0.0


# ---------------------------------------------------------------------------
# GMM kernels
# ---------------------------------------------------------------------------


cdef int gmm_theta(const double* nmat, const double* weight, const double* szy,
                   double* theta, double* rhs, double* amat, double* fac,
                   int p, int qz) nogil:
    # theta = (N W^{-1} N')^{-1} N W^{-1} szy; rhs (qz*(p+1)), amat (p*p),
    # fac max(p,qz)^2 scratch
    cdef int i, j, k
    cdef double s
    for i in range(qz):
        for j in range(p):
            rhs[i * (p + 1) + j] = nmat[j * qz + i]
        rhs[i * (p + 1) + p] = szy[i]
    if pd_solve(weight, rhs, fac, qz, p + 1):
        return 1
    for i in range(p):
        for j in range(p):
            s = 0.0
            for k in range(qz):
                s += nmat[i * qz + k] * rhs[k * (p + 1) + j]
            amat[i * p + j] = s
        s = 0.0
        for k in range(qz):
            s += nmat[i * qz + k] * rhs[k * (p + 1) + p]
        theta[i] = s
    symmetrize(amat, p)
    if pd_solve(amat, theta, fac, p, 1):
        return 1
    for i in range(p):
        if not isfinite(theta[i]):
            return 1
    return 0


cdef double gmm_wald(const double* n1, const double* n2, const double* h1,
                     const double* h2, const double* th1, const double* th2,
                     double* d, double* bmat, double* inner, double* vsum,
                     double* eye, double* fac, int p, int qz) nogil:
    # d' [sum_i (N_i H_i^{-1} N_i')^{-1}]^{-1} d; NAN on failure
    cdef int i, j, k, reg
    cdef double s
    cdef const double* nmat
    cdef const double* h
    for i in range(p):
        d[i] = th1[i] - th2[i]
    if all_zero(d, p):
        return 0.0
    memset(vsum, 0, p * p * sizeof(double))
    for reg in range(2):
        nmat = n1 if reg == 0 else n2
        h = h1 if reg == 0 else h2
        # bmat (qz x p) = H^{-1} N'
        for i in range(qz):
            for j in range(p):
                bmat[i * p + j] = nmat[j * qz + i]
        if pd_solve(h, bmat, fac, qz, p):
            return NAN
        mat_mul(nmat, bmat, inner, p, qz, p)
        symmetrize(inner, p)
        # eye <- inner^{-1}
        memset(eye, 0, p * p * sizeof(double))
        for i in range(p):
            eye[i * p + i] = 1.0
        if pd_solve(inner, eye, fac, p, p):
            return NAN
        for i in range(p * p):
            vsum[i] += eye[i]
    symmetrize(vsum, p)
    return quad_form(vsum, d, bmat, fac, p)


def gmm_fixed_resid_stats(prep, y, r, bint homosked, bint two_step):
    """Per-candidate GMM Wald with H from a fixed residual vector."""
    cdef double[:, ::1] z = prep.z
    cdef double[:, ::1] w = prep.w
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef cnp.int64_t[::1] cuts = prep.cuts
    cdef double[:, :, ::1] mzz_c = prep.mzz_c
    cdef double[:, :, ::1] nwz_c = prep.nwz_c
    cdef double[:, ::1] mzz_tot = prep.mzz_tot
    cdef double[:, ::1] nwz_tot = prep.nwz_tot
    cdef int T = z.shape[0], qz = z.shape[1], p = w.shape[1]
    cdef int G = cuts.shape[0], n_min = prep.n_min
    cdef int nmx = max(p, qz)

    vals_np = np.full(G, np.nan)
    status_np = np.zeros(G, dtype=np.uint8)
    cdef double[::1] vals = vals_np
    cdef unsigned char[::1] status = status_np

    # running prefix accumulators
    buf = np.zeros((13, nmx * nmx + nmx), dtype=np.float64)
    cdef double[:, ::1] B = buf
    cdef double* szy1 = &B[0, 0]
    cdef double* h1run = &B[1, 0]
    cdef double* m1 = &B[2, 0]
    cdef double* m2 = &B[3, 0]
    cdef double* h2 = &B[4, 0]
    cdef double* s2 = &B[5, 0]
    cdef double* th1 = &B[6, 0]
    cdef double* th2 = &B[7, 0]
    cdef double* rhs = &B[8, 0]
    cdef double* fac = &B[9, 0]
    cdef double* amat = &B[10, 0]
    cdef double* work = &B[11, 0]
    cdef double* dvec = &B[12, 0]
    big = np.zeros((6, (nmx + 1) * (nmx + 1)), dtype=np.float64)
    cdef double[:, ::1] BG = big
    cdef double* n1p = &BG[0, 0]
    cdef double* n2p = &BG[1, 0]
    cdef double* bmat = &BG[2, 0]
    cdef double* inner = &BG[3, 0]
    cdef double* vsum = &BG[4, 0]
    cdef double* eye = &BG[5, 0]

    szy_tot_np = (np.asarray(prep.z) * np.asarray(yv)[:, None]).sum(axis=0)
    cdef double[::1] szy_tot = np.ascontiguousarray(szy_tot_np)
    cdef double sig2 = 0.0
    cdef int g, i, j, t, k, kprev = 0
    cdef double rw, wald
    cdef double[::1] htot = np.zeros(qz * qz)
    cdef bint y_all_zero = not np.asarray(yv).any()

    with nogil:
        for t in range(T):
            sig2 += rv[t] * rv[t]
        sig2 /= T
        if not homosked:
            for t in range(T):
                rw = rv[t] * rv[t]
                for i in range(qz):
                    for j in range(qz):
                        htot[i * qz + j] += rw * z[t, i] * z[t, j]
        kprev = 0
        for g in range(G):
            k = <int> cuts[g]
            # advance running sums to cut k
            for t in range(kprev, k):
                for i in range(qz):
                    szy1[i] += z[t, i] * yv[t]
                if not homosked:
                    rw = rv[t] * rv[t]
                    for i in range(qz):
                        for j in range(qz):
                            h1run[i * qz + j] += rw * z[t, i] * z[t, j]
            kprev = k
            if k < n_min or T - k < n_min:
                status[g] = 1
                continue
            if y_all_zero:
                vals[g] = 0.0
                continue
            for i in range(qz):
                s2[i] = szy_tot[i] - szy1[i]
                for j in range(qz):
                    m1[i * qz + j] = mzz_c[g, i, j]
                    m2[i * qz + j] = mzz_tot[i, j] - mzz_c[g, i, j]
            for i in range(p):
                for j in range(qz):
                    n1p[i * qz + j] = nwz_c[g, i, j]
                    n2p[i * qz + j] = nwz_tot[i, j] - nwz_c[g, i, j]
            if homosked:
                for i in range(qz * qz):
                    work[i] = sig2 * m1[i]
                    h2[i] = sig2 * m2[i]
            else:
                for i in range(qz * qz):
                    work[i] = h1run[i]
                    h2[i] = htot[i] - h1run[i]
            # work holds H1 from here on
            if two_step:
                if gmm_theta(n1p, work, szy1, th1, rhs, amat, fac, p, qz) or \
                   gmm_theta(n2p, h2, s2, th2, rhs, amat, fac, p, qz):
                    status[g] = 2
                    continue
            else:
                if gmm_theta(n1p, m1, szy1, th1, rhs, amat, fac, p, qz) or \
                   gmm_theta(n2p, m2, s2, th2, rhs, amat, fac, p, qz):
                    status[g] = 2
                    continue
            wald = gmm_wald(n1p, n2p, work, h2, th1, th2,
                            dvec, bmat, inner, vsum, eye, fac, p, qz)
            if not isfinite(wald):
                status[g] = 2
                continue
            vals[g] = wald
    return vals_np, status_np


def _pergamma_impl(prep, Y, bint homosked, bint two_step, bint want_resid):
    cache = prep.gmm_cache()
    cdef double[:, ::1] yy = np.ascontiguousarray(np.atleast_2d(np.asarray(Y, dtype=np.float64)))
    cdef cnp.int64_t[::1] cuts = prep.cuts
    cdef double[:, :, ::1] nwz_c = prep.nwz_c
    cdef double[:, ::1] nwz_tot = prep.nwz_tot
    cdef double[:, ::1] zt = cache["zt"]
    cdef double[:, ::1] wt = cache["wt"]
    cdef double[:, ::1] zzt = cache["zzt"]
    cdef cnp.int64_t[::1] zz_iu = cache["zz_iu"]
    cdef cnp.int64_t[::1] zz_ju = cache["zz_ju"]
    cdef double[:, :, ::1] cww_c = cache["cww_c"]
    cdef double[:, ::1] cww_tot = cache["cww_tot"]
    cdef double[:, :, ::1] l1 = cache["l1"]
    cdef double[:, :, ::1] l2 = cache["l2"]
    cdef double[:, :, ::1] q_inv = cache["q_inv"]
    cdef unsigned char[::1] okc = cache["ok"]
    cdef int T = zt.shape[1], qz = zt.shape[0], p = wt.shape[0]
    cdef int G = cuts.shape[0], n_min = prep.n_min
    cdef int R = yy.shape[0]
    cdef int nzz = zzt.shape[0]
    cdef int nmx = max(p, qz)

    vals_np = np.full(G, np.nan)
    status_np = np.zeros(G, dtype=np.uint8)
    cdef double[::1] vals = vals_np
    cdef unsigned char[::1] status = status_np
    resid_np = np.full((G, T), np.nan) if want_resid else np.empty((1, 1))
    cdef double[:, ::1] resid = resid_np
    cdef double[::1] r1 = np.empty(T)
    cdef double[::1] rw_arr = np.empty(T)

    buf = np.zeros((16, nmx * nmx + nmx), dtype=np.float64)
    cdef double[:, ::1] B = buf
    cdef double* s1 = &B[0, 0]
    cdef double* s2 = &B[1, 0]
    cdef double* h1 = &B[2, 0]
    cdef double* h2 = &B[3, 0]
    cdef double* th1 = &B[4, 0]
    cdef double* th2 = &B[5, 0]
    cdef double* tw1 = &B[6, 0]
    cdef double* tw2 = &B[7, 0]
    cdef double* rhs = &B[8, 0]
    cdef double* fac = &B[9, 0]
    cdef double* amat = &B[10, 0]
    cdef double* dvec = &B[11, 0]
    cdef double* swy1 = &B[12, 0]
    cdef double* swy2 = &B[13, 0]
    cdef double* h1e = &B[14, 0]
    cdef double* h2e = &B[15, 0]
    big = np.zeros((6, (nmx + 1) * (nmx + 1)), dtype=np.float64)
    cdef double[:, ::1] BG = big
    cdef double* n1p = &BG[0, 0]
    cdef double* n2p = &BG[1, 0]
    cdef double* bmat = &BG[2, 0]
    cdef double* inner = &BG[3, 0]
    cdef double* vsum = &BG[4, 0]
    cdef double* eye = &BG[5, 0]

    cdef int g, i, j, t, k, row, e
    cdef double s, sig2, wald, sy2
    cdef const double* yrow

    with nogil:
        for g in range(G):
            k = <int> cuts[g]
            if k < n_min or T - k < n_min:
                status[g] = 1
                continue
            if okc[g] == 0:
                status[g] = 2
                continue
            row = g if R > 1 else 0
            yrow = &yy[row, 0]
            if all_zero(yrow, T):
                # all-zero pseudo-data: estimates and contrasts vanish
                vals[g] = 0.0
                if want_resid:
                    for t in range(T):
                        resid[g, t] = 0.0
                continue
            for i in range(qz):
                s1[i] = dot_range(&zt[i, 0], yrow, k)
                s2[i] = dot_range(&zt[i, k], yrow + k, T - k)
            # first-step estimates through the cached solve maps
            for i in range(p):
                s = 0.0
                for j in range(qz):
                    s += l1[g, i, j] * s1[j]
                th1[i] = s
                s = 0.0
                for j in range(qz):
                    s += l2[g, i, j] * s2[j]
                th2[i] = s
            if homosked:
                # sigma^2 via the moment identity; Wald through the cached
                # inverse of the summed homoskedastic kernel
                sy2 = dot_range(yrow, yrow, T)
                sig2 = sy2
                for i in range(p):
                    swy1[i] = dot_range(&wt[i, 0], yrow, k)
                    swy2[i] = dot_range(&wt[i, k], yrow + k, T - k)
                    sig2 -= 2.0 * (th1[i] * swy1[i] + th2[i] * swy2[i])
                for i in range(p):
                    for j in range(p):
                        sig2 += th1[i] * cww_c[g, i, j] * th1[j]
                        sig2 += th2[i] * (cww_tot[i, j] - cww_c[g, i, j]) * th2[j]
                sig2 /= T
                if sig2 < 0.0:
                    sig2 = 0.0
                for i in range(p):
                    dvec[i] = th1[i] - th2[i]
                    tw1[i] = th1[i]
                    tw2[i] = th2[i]
                if all_zero(dvec, p):
                    wald = 0.0
                elif sig2 <= 0.0:
                    status[g] = 2
                    continue
                else:
                    wald = 0.0
                    for i in range(p):
                        for j in range(p):
                            wald += dvec[i] * q_inv[g, i, j] * dvec[j]
                    wald /= sig2
                    if wald < 0.0:
                        wald = 0.0
            else:
                # split residuals, residual-weighted moments via entry dots
                for t in range(k):
                    s = yrow[t]
                    for i in range(p):
                        s -= wt[i, t] * th1[i]
                    r1[t] = s
                    rw_arr[t] = s * s
                for t in range(k, T):
                    s = yrow[t]
                    for i in range(p):
                        s -= wt[i, t] * th2[i]
                    r1[t] = s
                    rw_arr[t] = s * s
                for e in range(nzz):
                    h1e[e] = dot_range(&zzt[e, 0], &rw_arr[0], k)
                    h2e[e] = dot_range(&zzt[e, k], &rw_arr[k], T - k)
                for e in range(nzz):
                    i = <int> zz_iu[e]
                    j = <int> zz_ju[e]
                    h1[i * qz + j] = h1e[e]
                    h1[j * qz + i] = h1e[e]
                    h2[i * qz + j] = h2e[e]
                    h2[j * qz + i] = h2e[e]
                for i in range(p):
                    for j in range(qz):
                        n1p[i * qz + j] = nwz_c[g, i, j]
                        n2p[i * qz + j] = nwz_tot[i, j] - nwz_c[g, i, j]
                if two_step:
                    if gmm_theta(n1p, h1, s1, tw1, rhs, amat, fac, p, qz) or \
                       gmm_theta(n2p, h2, s2, tw2, rhs, amat, fac, p, qz):
                        status[g] = 2
                        continue
                else:
                    for i in range(p):
                        tw1[i] = th1[i]
                        tw2[i] = th2[i]
                wald = gmm_wald(n1p, n2p, h1, h2, tw1, tw2,
                                dvec, bmat, inner, vsum, eye, fac, p, qz)
            if not isfinite(wald):
                status[g] = 2
                continue
            vals[g] = wald
            if want_resid:
                for t in range(T):
                    s = yrow[t]
                    if t < k:
                        for i in range(p):
                            s -= wt[i, t] * tw1[i]
                    else:
                        for i in range(p):
                            s -= wt[i, t] * tw2[i]
                    resid[g, t] = s
    if want_resid:
        return resid_np, status_np
    return vals_np, status_np


def gmm_pergamma_stats(prep, y, bint homosked, bint two_step):
    """Per-candidate GMM Wald with split residuals in H; y is (T,), (1,T)
    shared, or (G,T) per-candidate rows."""
    return _pergamma_impl(prep, y, homosked, two_step, False)


def gmm_pergamma_resid2(prep, y, bint homosked, bint two_step):
    """Second-step split residual matrix (G, T) in sorted order."""
    return _pergamma_impl(prep, y, homosked, two_step, True)


def tfs_rho_ssr(prep, x, n_min=None):
    """Trace SSR of the split multivariate OLS of x on z at every cut."""
    cdef double[:, ::1] z = prep.z
    cdef double[:, ::1] xv = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    cdef cnp.int64_t[::1] cuts = prep.cuts
    cdef double[:, :, ::1] mzz_c = prep.mzz_c
    cdef double[:, ::1] mzz_tot = prep.mzz_tot
    cdef int T = z.shape[0], qz = z.shape[1], p1 = xv.shape[1]
    cdef int G = cuts.shape[0]
    cdef int nmin = prep.n_min if n_min is None else <int> n_min

    ssr_np = np.full(G, np.nan)
    status_np = np.zeros(G, dtype=np.uint8)
    cdef double[::1] ssr = ssr_np
    cdef unsigned char[::1] status = status_np

    cdef double[::1] s1run = np.zeros(qz * p1)
    cdef double[::1] stot = np.zeros(qz * p1)
    cdef double[::1] b1 = np.zeros(qz * p1)
    cdef double[::1] b2 = np.zeros(qz * p1)
    cdef double[::1] m1 = np.zeros(qz * qz)
    cdef double[::1] m2 = np.zeros(qz * qz)
    cdef double[::1] fac = np.zeros(qz * qz)
    cdef double total = 0.0
    cdef int g, i, j, t, k, kprev
    cdef double fit

    with nogil:
        for t in range(T):
            for j in range(p1):
                total += xv[t, j] * xv[t, j]
                for i in range(qz):
                    stot[i * p1 + j] += z[t, i] * xv[t, j]
        kprev = 0
        for g in range(G):
            k = <int> cuts[g]
            for t in range(kprev, k):
                for i in range(qz):
                    for j in range(p1):
                        s1run[i * p1 + j] += z[t, i] * xv[t, j]
            kprev = k
            if k < nmin or T - k < nmin:
                status[g] = 1
                continue
            for i in range(qz * p1):
                b1[i] = s1run[i]
                b2[i] = stot[i] - s1run[i]
            for i in range(qz):
                for j in range(qz):
                    m1[i * qz + j] = mzz_c[g, i, j]
                    m2[i * qz + j] = mzz_tot[i, j] - mzz_c[g, i, j]
            if pd_solve(&m1[0], &b1[0], &fac[0], qz, p1) or \
               pd_solve(&m2[0], &b2[0], &fac[0], qz, p1):
                status[g] = 2
                continue
            fit = 0.0
            for i in range(qz):
                for j in range(p1):
                    fit += s1run[i * p1 + j] * b1[i * p1 + j]
                    fit += (stot[i * p1 + j] - s1run[i * p1 + j]) * b2[i * p1 + j]
            ssr[g] = total - fit if total > fit else 0.0
    return ssr_np, status_np


# ---------------------------------------------------------------------------
# 2SLS kernels
# ---------------------------------------------------------------------------


cdef double lr_value(double ssr0, double ssr1, double dof) nogil:
    cdef double num = ssr0 - ssr1
    if num <= 0.0:
        return 0.0
    if ssr1 <= 0.0:
        return INFINITY
    return num / (ssr1 / dof)


cdef double sandwich_wald(const double* c1, const double* c2, const double* v1,
                          const double* v12, const double* v2, const double* d,
                          double* c1i, double* c2i, double* t1, double* t2,
                          double* vg, double* fac, int p) nogil:
    # d' [C1i V1 C1i - C1i V12 C2i - C2i V12' C1i + C2i V2 C2i]^{-1} d
    cdef int i, j
    if all_zero(d, p):
        return 0.0
    memset(c1i, 0, p * p * sizeof(double))
    memset(c2i, 0, p * p * sizeof(double))
    for i in range(p):
        c1i[i * p + i] = 1.0
        c2i[i * p + i] = 1.0
    if pd_solve(c1, c1i, fac, p, p) or pd_solve(c2, c2i, fac, p, p):
        return NAN
    # vg = C1i V1 C1i
    mat_mul(c1i, v1, t1, p, p, p)
    mat_mul(t1, c1i, vg, p, p, p)
    # vg -= C1i V12 C2i
    mat_mul(c1i, v12, t1, p, p, p)
    mat_mul(t1, c2i, t2, p, p, p)
    for i in range(p * p):
        vg[i] -= t2[i]
    # vg -= C2i V12' C1i  (= previous term transposed)
    for i in range(p):
        for j in range(p):
            vg[i * p + j] -= t2[j * p + i]
    # vg += C2i V2 C2i
    mat_mul(c2i, v2, t1, p, p, p)
    mat_mul(t1, c2i, t2, p, p, p)
    for i in range(p * p):
        vg[i] += t2[i]
    symmetrize(vg, p)
    return quad_form(vg, d, t1, fac, p)


cdef void a_sandwich(const double* a, const double* core, double* out,
                     double* tmp, int p, int qz) nogil:
    # out (p x p) = A core A' with A (p x qz), core (qz x qz)
    mat_mul(a, core, tmp, p, qz, qz)
    mat_mul_nt(tmp, a, out, p, qz, p)


def tsls_sequences_lfs(prep, what, y, eps, b, a_mat, double ssr0, double dof,
                       bint homosked, double s_ee, double s_eb, double s_bb,
                       bint want_lr, bint want_w):
    """LR and Wald sequences for split 2SLS with a linear first stage."""
    cdef double[:, ::1] z = prep.z
    cdef double[:, ::1] wh = np.ascontiguousarray(np.asarray(what, dtype=np.float64))
    cdef double[::1] yv = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    cdef double[::1] ev = np.ascontiguousarray(np.asarray(eps, dtype=np.float64))
    cdef double[::1] bv = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
    cdef double[:, ::1] am = np.ascontiguousarray(np.asarray(a_mat, dtype=np.float64))
    cdef cnp.int64_t[::1] cuts = prep.cuts
    cdef double[:, :, ::1] mzz_c = prep.mzz_c
    cdef double[:, ::1] mzz_tot = prep.mzz_tot
    cdef int T = z.shape[0], qz = z.shape[1], p = wh.shape[1]
    cdef int G = cuts.shape[0], n_min = prep.n_min
    cdef int nmx = max(p, qz)

    lr_np = np.full(G, np.nan)
    wv_np = np.full(G, np.nan)
    status_np = np.zeros(G, dtype=np.uint8)
    cdef double[::1] lr = lr_np
    cdef double[::1] wv = wv_np
    cdef unsigned char[::1] status = status_np

    # running accumulators: cww (p x p), swy (p), P_ee/eb/bb (qz x qz)
    nacc = p * p + p + 3 * qz * qz
    acc_np = np.zeros(nacc)
    tot_np = np.zeros(nacc)
    cdef double[::1] acc = acc_np
    cdef double[::1] tot = tot_np
    cdef int o_cww = 0, o_swy = p * p, o_pee = p * p + p
    cdef int o_peb = o_pee + qz * qz, o_pbb = o_peb + qz * qz

    cdef double yy = 0.0
    scratch_np = np.zeros((24, (nmx + 1) * (nmx + 1)))
    cdef double[:, ::1] S = scratch_np
    cdef double* c1 = &S[0, 0]
    cdef double* c2 = &S[1, 0]
    cdef double* th1 = &S[2, 0]
    cdef double* th2 = &S[3, 0]
    cdef double* fac = &S[4, 0]
    cdef double* r1m = &S[5, 0]
    cdef double* r2m = &S[6, 0]
    cdef double* e_tt = &S[7, 0]
    cdef double* e_tc = &S[8, 0]
    cdef double* e_ccf = &S[9, 0]
    cdef double* core = &S[10, 0]
    cdef double* tmp1 = &S[11, 0]
    cdef double* tmp2 = &S[12, 0]
    cdef double* v1 = &S[13, 0]
    cdef double* v2 = &S[14, 0]
    cdef double* v12 = &S[15, 0]
    cdef double* c1i = &S[16, 0]
    cdef double* c2i = &S[17, 0]
    cdef double* vg = &S[18, 0]
    cdef double* minv = &S[19, 0]
    cdef double* dvec = &S[20, 0]
    cdef double* s1 = &S[21, 0]
    cdef double* s2 = &S[22, 0]
    cdef double* etc2 = &S[23, 0]

    cdef int g, i, j, t, k, kprev
    cdef double s, ssr1, wee, web, wbb, wald

    # full-sample instrument moment inverse for R_i = M_i M^{-1}
    memset(minv, 0, qz * qz * sizeof(double))
    for i in range(qz):
        minv[i * qz + i] = 1.0
    cdef double[:, ::1] mtot_c = np.ascontiguousarray(prep.mzz_tot)
    if pd_solve(&mtot_c[0, 0], minv, fac, qz, qz):
        status_np[:] = SINGULAR
        return lr_np, wv_np, status_np

    with nogil:
        for t in range(T):
            yy += yv[t] * yv[t]
            for i in range(p):
                tot[o_swy + i] += wh[t, i] * yv[t]
                for j in range(p):
                    tot[o_cww + i * p + j] += wh[t, i] * wh[t, j]
            if want_w and not homosked:
                wee = ev[t] * ev[t]
                web = ev[t] * bv[t]
                wbb = bv[t] * bv[t]
                for i in range(qz):
                    for j in range(qz):
                        s = z[t, i] * z[t, j]
                        tot[o_pee + i * qz + j] += wee * s
                        tot[o_peb + i * qz + j] += web * s
                        tot[o_pbb + i * qz + j] += wbb * s
        kprev = 0
        for g in range(G):
            k = <int> cuts[g]
            for t in range(kprev, k):
                for i in range(p):
                    acc[o_swy + i] += wh[t, i] * yv[t]
                    for j in range(p):
                        acc[o_cww + i * p + j] += wh[t, i] * wh[t, j]
                if want_w and not homosked:
                    wee = ev[t] * ev[t]
                    web = ev[t] * bv[t]
                    wbb = bv[t] * bv[t]
                    for i in range(qz):
                        for j in range(qz):
                            s = z[t, i] * z[t, j]
                            acc[o_pee + i * qz + j] += wee * s
                            acc[o_peb + i * qz + j] += web * s
                            acc[o_pbb + i * qz + j] += wbb * s
            kprev = k
            if k < n_min or T - k < n_min:
                status[g] = 1
                continue
            for i in range(p):
                s1[i] = acc[o_swy + i]
                s2[i] = tot[o_swy + i] - s1[i]
                th1[i] = s1[i]
                th2[i] = s2[i]
                for j in range(p):
                    c1[i * p + j] = acc[o_cww + i * p + j]
                    c2[i * p + j] = tot[o_cww + i * p + j] - c1[i * p + j]
            if pd_solve(c1, th1, fac, p, 1) or pd_solve(c2, th2, fac, p, 1):
                status[g] = 2
                continue
            ssr1 = yy
            for i in range(p):
                if not isfinite(th1[i]) or not isfinite(th2[i]):
                    ssr1 = NAN
                    break
                ssr1 -= th1[i] * s1[i] + th2[i] * s2[i]
            if not isfinite(ssr1):
                status[g] = 2
                continue
            if ssr1 < 0.0:
                ssr1 = 0.0
            if want_lr:
                lr[g] = lr_value(ssr0, ssr1, dof)
            if not want_w:
                continue
            # R_1 = M_1 M^{-1}, R_2 = M_2 M^{-1}
            for i in range(qz):
                for j in range(qz):
                    tmp1[i * qz + j] = mzz_c[g, i, j]
            mat_mul(tmp1, minv, r1m, qz, qz, qz)
            for i in range(qz):
                for j in range(qz):
                    tmp1[i * qz + j] = mzz_tot[i, j] - mzz_c[g, i, j]
            mat_mul(tmp1, minv, r2m, qz, qz, qz)
            # contracted blocks for regime 1 / regime 2 / full sample
            for i in range(qz * qz):
                if homosked:
                    e_tt[i] = 0.0
                    e_tc[i] = 0.0
                    e_ccf[i] = 0.0
                else:
                    e_tt[i] = acc[o_pee + i] + 2.0 * acc[o_peb + i] + acc[o_pbb + i]
                    e_tc[i] = acc[o_peb + i] + acc[o_pbb + i]
                    e_ccf[i] = tot[o_pbb + i]
            if homosked:
                for i in range(qz):
                    for j in range(qz):
                        e_tt[i * qz + j] = (s_ee + 2.0 * s_eb + s_bb) * mzz_c[g, i, j]
                        e_tc[i * qz + j] = (s_eb + s_bb) * mzz_c[g, i, j]
                        e_ccf[i * qz + j] = s_bb * mzz_tot[i, j]
            # core1 = E_tt1 - E_tc1 R1' - R1 E_tc1 + R1 E_ccF R1'
            _lfs_core(e_tt, e_tc, e_ccf, r1m, core, tmp1, tmp2, qz)
            a_sandwich(&am[0, 0], core, v1, tmp1, p, qz)
            # regime 2 blocks
            for i in range(qz * qz):
                if homosked:
                    pass
                else:
                    e_tt[i] = (tot[o_pee + i] - acc[o_pee + i]) \
                        + 2.0 * (tot[o_peb + i] - acc[o_peb + i]) \
                        + (tot[o_pbb + i] - acc[o_pbb + i])
                    etc2[i] = (tot[o_peb + i] - acc[o_peb + i]) \
                        + (tot[o_pbb + i] - acc[o_pbb + i])
            if homosked:
                for i in range(qz):
                    for j in range(qz):
                        s = mzz_tot[i, j] - mzz_c[g, i, j]
                        e_tt[i * qz + j] = (s_ee + 2.0 * s_eb + s_bb) * s
                        etc2[i * qz + j] = (s_eb + s_bb) * s
            _lfs_core(e_tt, etc2, e_ccf, r2m, core, tmp1, tmp2, qz)
            a_sandwich(&am[0, 0], core, v2, tmp1, p, qz)
            # v12 core = -E_tc1 R2' - R1 E_tc2 + R1 E_ccF R2'
            mat_mul_nt(e_tc, r2m, core, qz, qz, qz)
            for i in range(qz * qz):
                core[i] = -core[i]
            mat_mul(r1m, etc2, tmp1, qz, qz, qz)
            for i in range(qz * qz):
                core[i] -= tmp1[i]
            mat_mul(r1m, e_ccf, tmp1, qz, qz, qz)
            mat_mul_nt(tmp1, r2m, tmp2, qz, qz, qz)
            for i in range(qz * qz):
                core[i] += tmp2[i]
            a_sandwich(&am[0, 0], core, v12, tmp1, p, qz)
            for i in range(p):
                dvec[i] = th1[i] - th2[i]
            symmetrize(v1, p)
            symmetrize(v2, p)
            wald = sandwich_wald(c1, c2, v1, v12, v2, dvec,
                                 c1i, c2i, tmp1, tmp2, vg, fac, p)
            if not isfinite(wald):
                status[g] = 2
                continue
            wv[g] = wald
    return lr_np, wv_np, status_np


cdef void _lfs_core(const double* e_tt, const double* e_tc, const double* e_ccf,
                    const double* r, double* core, double* tmp1, double* tmp2,
                    int qz) nogil:
    # core = E_tt - E_tc R' - R E_tc + R E_ccF R'  (E_tc symmetric)
    cdef int i, j
    mat_mul_nt(e_tc, r, tmp1, qz, qz, qz)
    for i in range(qz):
        for j in range(qz):
            core[i * qz + j] = e_tt[i * qz + j] - tmp1[i * qz + j] - tmp1[j * qz + i]
    mat_mul(r, e_ccf, tmp1, qz, qz, qz)
    mat_mul_nt(tmp1, r, tmp2, qz, qz, qz)
    for i in range(qz * qz):
        core[i] += tmp2[i]


def tsls_sequences_tfs(prep, what, y, eps, b, a1_mat, a2_mat, rho_cut,
                       double ssr0, double dof, bint homosked,
                       double s_ee, double s_eb, double s_bb,
                       bint want_lr, bint want_w):
    """LR and Wald sequences for split 2SLS with a threshold first stage."""
    cdef double[:, ::1] z = prep.z
    cdef double[:, ::1] wh = np.ascontiguousarray(np.asarray(what, dtype=np.float64))
    cdef double[::1] yv = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    cdef double[::1] ev = np.ascontiguousarray(np.asarray(eps, dtype=np.float64))
    cdef double[::1] bv = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
    cdef double[:, ::1] a1m = np.ascontiguousarray(np.asarray(a1_mat, dtype=np.float64))
    cdef double[:, ::1] a2m = np.ascontiguousarray(np.asarray(a2_mat, dtype=np.float64))
    cdef cnp.int64_t[::1] cuts = prep.cuts
    cdef double[:, :, ::1] mzz_c = prep.mzz_c
    cdef double[:, ::1] mzz_tot = prep.mzz_tot
    cdef int T = z.shape[0], qz = z.shape[1], p = wh.shape[1]
    cdef int G = cuts.shape[0], n_min = prep.n_min
    cdef int kr = <int> rho_cut
    cdef int nmx = max(p, qz)

    lr_np = np.full(G, np.nan)
    wv_np = np.full(G, np.nan)
    status_np = np.zeros(G, dtype=np.uint8)
    cdef double[::1] lr = lr_np
    cdef double[::1] wv = wv_np
    cdef unsigned char[::1] status = status_np

    nacc = p * p + p + 3 * qz * qz
    acc_np = np.zeros(nacc)
    tot_np = np.zeros(nacc)
    rho_np = np.zeros(nacc)
    cdef double[::1] acc = acc_np
    cdef double[::1] tot = tot_np
    cdef double[::1] rho_acc = rho_np
    cdef int o_cww = 0, o_swy = p * p, o_pee = p * p + p
    cdef int o_peb = o_pee + qz * qz, o_pbb = o_peb + qz * qz

    cdef double yy = 0.0
    scratch_np = np.zeros((28, (nmx + 1) * (nmx + 1)))
    cdef double[:, ::1] S = scratch_np
    cdef double* c1 = &S[0, 0]
    cdef double* c2 = &S[1, 0]
    cdef double* th1 = &S[2, 0]
    cdef double* th2 = &S[3, 0]
    cdef double* fac = &S[4, 0]
    cdef double* rmat = &S[5, 0]
    cdef double* m_rho1_inv = &S[6, 0]
    cdef double* m_rho2_inv = &S[7, 0]
    cdef double* core = &S[8, 0]
    cdef double* tmp1 = &S[9, 0]
    cdef double* tmp2 = &S[10, 0]
    cdef double* tmp3 = &S[11, 0]
    cdef double* v1 = &S[12, 0]
    cdef double* v2 = &S[13, 0]
    cdef double* v12 = &S[14, 0]
    cdef double* c1i = &S[15, 0]
    cdef double* c2i = &S[16, 0]
    cdef double* vg = &S[17, 0]
    cdef double* dvec = &S[18, 0]
    cdef double* s1 = &S[19, 0]
    cdef double* s2 = &S[20, 0]
    cdef double* vb = &S[21, 0]
    cdef double* dee = &S[24, 0]
    cdef double* deb = &S[25, 0]
    cdef double* dbb = &S[26, 0]
    cdef double* cov1b = &S[27, 0]
    # regime-1 weighted blocks at the cut (ee, eb, bb), packed contiguously
    pg_np = np.zeros(3 * qz * qz)
    cdef double[::1] pg_mv = pg_np
    cdef double* pg = &pg_mv[0]

    cdef int g, i, j, t, k, kprev
    cdef double s, ssr1, wee, web, wbb, wald

    with nogil:
        for t in range(T):
            yy += yv[t] * yv[t]
            for i in range(p):
                tot[o_swy + i] += wh[t, i] * yv[t]
                for j in range(p):
                    tot[o_cww + i * p + j] += wh[t, i] * wh[t, j]
            if want_w:
                wee = ev[t] * ev[t]
                web = ev[t] * bv[t]
                wbb = bv[t] * bv[t]
                for i in range(qz):
                    for j in range(qz):
                        s = z[t, i] * z[t, j]
                        tot[o_pee + i * qz + j] += wee * s
                        tot[o_peb + i * qz + j] += web * s
                        tot[o_pbb + i * qz + j] += wbb * s
                        if t < kr:
                            rho_acc[o_pee + i * qz + j] += wee * s
                            rho_acc[o_peb + i * qz + j] += web * s
                            rho_acc[o_pbb + i * qz + j] += wbb * s

    # M at rho and its complement, inverted once
    m_rho1 = np.asarray(prep.z)[:kr].T @ np.asarray(prep.z)[:kr]
    m_rho1 = np.ascontiguousarray(m_rho1)
    m_rho2 = np.ascontiguousarray(np.asarray(prep.mzz_tot) - m_rho1)
    cdef double[:, ::1] mr1 = m_rho1
    cdef double[:, ::1] mr2 = m_rho2
    for i in range(qz):
        for j in range(qz):
            m_rho1_inv[i * qz + j] = 1.0 if i == j else 0.0
            m_rho2_inv[i * qz + j] = 1.0 if i == j else 0.0
    if want_w and (pd_solve(&mr1[0, 0], m_rho1_inv, fac, qz, qz)
                   or pd_solve(&mr2[0, 0], m_rho2_inv, fac, qz, qz)):
        status_np[:] = SINGULAR
        return lr_np, wv_np, status_np

    # homoskedastic analogs: P blocks are scalars times M over the region
    if want_w and homosked:
        for i in range(qz):
            for j in range(qz):
                rho_acc[o_pee + i * qz + j] = s_ee * mr1[i, j]
                rho_acc[o_peb + i * qz + j] = s_eb * mr1[i, j]
                rho_acc[o_pbb + i * qz + j] = s_bb * mr1[i, j]
                tot[o_pee + i * qz + j] = s_ee * mzz_tot[i, j]
                tot[o_peb + i * qz + j] = s_eb * mzz_tot[i, j]
                tot[o_pbb + i * qz + j] = s_bb * mzz_tot[i, j]

    with nogil:
        if want_w:
            # V_B = A1 Pee(rho) A1' + A2 (Pee_tot - Pee(rho)) A2'
            a_sandwich(&a1m[0, 0], &rho_acc[o_pee], vb, tmp1, p, qz)
            for i in range(qz * qz):
                core[i] = tot[o_pee + i] - rho_acc[o_pee + i]
            a_sandwich(&a2m[0, 0], core, tmp2, tmp1, p, qz)
            for i in range(p * p):
                vb[i] += tmp2[i]
        kprev = 0
        for g in range(G):
            k = <int> cuts[g]
            for t in range(kprev, k):
                for i in range(p):
                    acc[o_swy + i] += wh[t, i] * yv[t]
                    for j in range(p):
                        acc[o_cww + i * p + j] += wh[t, i] * wh[t, j]
                if want_w and not homosked:
                    wee = ev[t] * ev[t]
                    web = ev[t] * bv[t]
                    wbb = bv[t] * bv[t]
                    for i in range(qz):
                        for j in range(qz):
                            s = z[t, i] * z[t, j]
                            acc[o_pee + i * qz + j] += wee * s
                            acc[o_peb + i * qz + j] += web * s
                            acc[o_pbb + i * qz + j] += wbb * s
            kprev = k
            if k < n_min or T - k < n_min:
                status[g] = 1
                continue
            for i in range(p):
                s1[i] = acc[o_swy + i]
                s2[i] = tot[o_swy + i] - s1[i]
                th1[i] = s1[i]
                th2[i] = s2[i]
                for j in range(p):
                    c1[i * p + j] = acc[o_cww + i * p + j]
                    c2[i * p + j] = tot[o_cww + i * p + j] - c1[i * p + j]
            if pd_solve(c1, th1, fac, p, 1) or pd_solve(c2, th2, fac, p, 1):
                status[g] = 2
                continue
            ssr1 = yy
            for i in range(p):
                if not isfinite(th1[i]) or not isfinite(th2[i]):
                    ssr1 = NAN
                    break
                ssr1 -= th1[i] * s1[i] + th2[i] * s2[i]
            if not isfinite(ssr1):
                status[g] = 2
                continue
            if ssr1 < 0.0:
                ssr1 = 0.0
            if want_lr:
                lr[g] = lr_value(ssr0, ssr1, dof)
            if not want_w:
                continue

            # regime-1 weighted blocks at this cut (homoskedastic: s * M1g)
            if homosked:
                for i in range(qz):
                    for j in range(qz):
                        pg[0 * qz * qz + i * qz + j] = s_ee * mzz_c[g, i, j]
                        pg[1 * qz * qz + i * qz + j] = s_eb * mzz_c[g, i, j]
                        pg[2 * qz * qz + i * qz + j] = s_bb * mzz_c[g, i, j]
            else:
                for i in range(qz * qz):
                    pg[0 * qz * qz + i] = acc[o_pee + i]
                    pg[1 * qz * qz + i] = acc[o_peb + i]
                    pg[2 * qz * qz + i] = acc[o_pbb + i]
            if k <= kr:
                # R1 = M1(g) M1(rho)^{-1}
                for i in range(qz):
                    for j in range(qz):
                        tmp1[i * qz + j] = mzz_c[g, i, j]
                mat_mul(tmp1, m_rho1_inv, rmat, qz, qz, qz)
                for i in range(qz * qz):
                    deb[i] = rho_acc[o_peb + i] - pg[1 * qz * qz + i]
                    dbb[i] = rho_acc[o_pbb + i] - pg[2 * qz * qz + i]
                    # E_tt, E_tc for regime 1
                    tmp2[i] = pg[0 * qz * qz + i] + 2.0 * pg[1 * qz * qz + i] \
                        + pg[2 * qz * qz + i]
                    tmp3[i] = pg[1 * qz * qz + i] + pg[2 * qz * qz + i]
                # core1 = E_tt - E_tc R1' - R1 E_tc + R1 (E_cc + dbb) R1'
                mat_mul_nt(tmp3, rmat, core, qz, qz, qz)
                for i in range(qz):
                    for j in range(qz):
                        tmp3[i * qz + j] = tmp2[i * qz + j] - core[i * qz + j] - core[j * qz + i]
                for i in range(qz * qz):
                    tmp2[i] = pg[2 * qz * qz + i] + dbb[i]
                mat_mul(rmat, tmp2, core, qz, qz, qz)
                mat_mul_nt(core, rmat, tmp2, qz, qz, qz)
                for i in range(qz * qz):
                    core[i] = tmp3[i] + tmp2[i]
                a_sandwich(&a1m[0, 0], core, v1, tmp1, p, qz)
                # cov(B1, B) = A1 [Pee(g) + Peb(g) - R1 (Peb(g) + deb)] A1'
                for i in range(qz * qz):
                    tmp2[i] = pg[1 * qz * qz + i] + deb[i]
                mat_mul(rmat, tmp2, tmp3, qz, qz, qz)
                for i in range(qz * qz):
                    core[i] = pg[0 * qz * qz + i] + pg[1 * qz * qz + i] - tmp3[i]
                a_sandwich(&a1m[0, 0], core, cov1b, tmp1, p, qz)
                for i in range(p * p):
                    v12[i] = cov1b[i] - v1[i]
            else:
                # R2 = M2(g) M2(rho)^{-1}
                for i in range(qz):
                    for j in range(qz):
                        tmp1[i * qz + j] = mzz_tot[i, j] - mzz_c[g, i, j]
                mat_mul(tmp1, m_rho2_inv, rmat, qz, qz, qz)
                for i in range(qz * qz):
                    dee[i] = pg[0 * qz * qz + i] - rho_acc[o_pee + i]
                    deb[i] = pg[1 * qz * qz + i] - rho_acc[o_peb + i]
                    dbb[i] = pg[2 * qz * qz + i] - rho_acc[o_pbb + i]
                    # regime-2 blocks
                    tmp2[i] = tot[o_peb + i] - pg[1 * qz * qz + i]  # peb_2g
                    tmp3[i] = tot[o_pbb + i] - pg[2 * qz * qz + i]  # pbb_2g
                # mid = dee + deb R2' + R2 deb + R2 dbb R2'
                mat_mul_nt(deb, rmat, core, qz, qz, qz)
                for i in range(qz):
                    for j in range(qz):
                        cov1b[i * qz + j] = dee[i * qz + j] + core[i * qz + j] + core[j * qz + i]
                mat_mul(rmat, dbb, core, qz, qz, qz)
                mat_mul_nt(core, rmat, dee, qz, qz, qz)
                for i in range(qz * qz):
                    cov1b[i] += dee[i]
                # tail = (R2 - I) pbb_2g (R2 - I)'
                for i in range(qz):
                    for j in range(qz):
                        dee[i * qz + j] = rmat[i * qz + j] - (1.0 if i == j else 0.0)
                mat_mul(dee, tmp3, core, qz, qz, qz)
                mat_mul_nt(core, dee, dbb, qz, qz, qz)
                for i in range(qz * qz):
                    cov1b[i] += dbb[i]
                a_sandwich(&a2m[0, 0], cov1b, v1, tmp1, p, qz)
                a_sandwich(&a1m[0, 0], &rho_acc[o_pee], cov1b, tmp1, p, qz)
                for i in range(p * p):
                    v1[i] += cov1b[i]
                # v12 core = (R2-I)[(peb2g+pbb2g) - pbb2g R2'] - [deb R2' + R2 dbb R2']
                for i in range(qz * qz):
                    core[i] = tmp2[i] + tmp3[i]
                mat_mul_nt(tmp3, rmat, dbb, qz, qz, qz)
                for i in range(qz * qz):
                    core[i] -= dbb[i]
                mat_mul(dee, core, tmp3, qz, qz, qz)  # dee still holds (R2 - I)
                mat_mul_nt(deb, rmat, core, qz, qz, qz)
                for i in range(qz * qz):
                    tmp3[i] -= core[i]
                # recompute dbb = pg_bb - rho_bb (was overwritten), then R2 dbb R2'
                for i in range(qz * qz):
                    dbb[i] = pg[2 * qz * qz + i] - rho_acc[o_pbb + i]
                mat_mul(rmat, dbb, core, qz, qz, qz)
                mat_mul_nt(core, rmat, dbb, qz, qz, qz)
                for i in range(qz * qz):
                    tmp3[i] -= dbb[i]
                a_sandwich(&a2m[0, 0], tmp3, v12, tmp1, p, qz)
            for i in range(p):
                for j in range(p):
                    v2[i * p + j] = vb[i * p + j] - v1[i * p + j] \
                        - v12[i * p + j] - v12[j * p + i]
            for i in range(p):
                dvec[i] = th1[i] - th2[i]
            symmetrize(v1, p)
            symmetrize(v2, p)
            wald = sandwich_wald(c1, c2, v1, v12, v2, dvec,
                                 c1i, c2i, tmp1, tmp2, vg, fac, p)
            if not isfinite(wald):
                status[g] = 2
                continue
            wv[g] = wald
    return lr_np, wv_np, status_np
