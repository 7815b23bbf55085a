# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ProxSkip-VR run loop.

Mirrors ``solver._run_python`` for logistic and quadratic objectives, the zero
and consensus regularizers, and the gd / sgd / variance-reduced estimators
(with optional rand-k compression). Random draws are taken straight from the
numpy bit generator and decoded exactly as in ``core``, so every discrete
decision (subsets, kept coordinates, coins) matches the Python path.
"""
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport exp, fabs, isfinite, log1p
from libc.stdint cimport int64_t, uint64_t
from libc.stdlib cimport free, malloc
from numpy.random cimport bitgen_t

cdef extern from *:
    """
    static inline uint64_t psvr_mulhi(uint64_t u, uint64_t n) {
        return (uint64_t)(((__uint128_t)u * (__uint128_t)n) >> 64);
    }
    """
    uint64_t psvr_mulhi(uint64_t u, uint64_t n) nogil

cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef struct Problem:
    int kind          # 0 logistic, 1 quadratic
    int M
    int m
    int d
    double *A         # (M, m, d)
    double *b         # (M, m)
    double lam
    double *H         # (M, m, d, d)
    double *c         # (M, m, d)


cdef struct Stream:
    bitgen_t *bg
    int64_t draws


cdef inline uint64_t next_raw(Stream *s) noexcept nogil:
    s.draws += 1
    return s.bg.next_uint64(s.bg.state)


cdef inline double next_uniform(Stream *s) noexcept nogil:
    return <double>(next_raw(s) >> 11) * INV_2_53


cdef void draw_subset(Stream *s, int n, int k, int *pool, int *out) noexcept nogil:
    """Partial Fisher-Yates over 0..n-1, k steps, result sorted ascending."""
    cdef int i, r, tmp, j, key
    for i in range(n):
        pool[i] = i
    for i in range(k):
        r = i + <int>psvr_mulhi(next_raw(s), <uint64_t>(n - i))
        tmp = pool[r]
        pool[r] = pool[i]
        pool[i] = tmp
    for i in range(k):
        out[i] = pool[i]
    for i in range(1, k):
        key = out[i]
        j = i - 1
        while j >= 0 and out[j] > key:
            out[j + 1] = out[j]
            j -= 1
        out[j + 1] = key


cdef inline double softplus(double z) noexcept nogil:
    return (z if z > 0.0 else 0.0) + log1p(exp(-fabs(z)))


cdef inline double sigmoid_neg(double z) noexcept nogil:
    cdef double e = exp(-fabs(z))
    if z >= 0.0:
        return e / (1.0 + e)
    return 1.0 / (1.0 + e)


cdef void comp_grad(Problem *P, int i, int j, const double *xi, double *out) noexcept nogil:
    cdef int d = P.d, a, e
    cdef const double *row
    cdef const double *Hij
    cdef const double *cij
    cdef double z, coef, bij, acc
    if P.kind == 0:
        row = P.A + (<Py_ssize_t>i * P.m + j) * d
        bij = P.b[i * P.m + j]
        z = 0.0
        for a in range(d):
            z += row[a] * xi[a]
        coef = -bij * sigmoid_neg(bij * z)
        for a in range(d):
            out[a] = coef * row[a] + P.lam * xi[a]
    else:
        Hij = P.H + (<Py_ssize_t>i * P.m + j) * d * d
        cij = P.c + (<Py_ssize_t>i * P.m + j) * d
        for a in range(d):
            acc = 0.0
            for e in range(d):
                acc += Hij[a * d + e] * (xi[e] - cij[e])
            out[a] = acc


cdef double comp_value(Problem *P, int i, int j, const double *xi) noexcept nogil:
    cdef int d = P.d, a, e
    cdef const double *row
    cdef const double *Hij
    cdef const double *cij
    cdef double z, sq, acc, total
    if P.kind == 0:
        row = P.A + (<Py_ssize_t>i * P.m + j) * d
        z = 0.0
        sq = 0.0
        for a in range(d):
            z += row[a] * xi[a]
            sq += xi[a] * xi[a]
        return softplus(-P.b[i * P.m + j] * z) + 0.5 * P.lam * sq
    Hij = P.H + (<Py_ssize_t>i * P.m + j) * d * d
    cij = P.c + (<Py_ssize_t>i * P.m + j) * d
    total = 0.0
    for a in range(d):
        acc = 0.0
        for e in range(d):
            acc += Hij[a * d + e] * (xi[e] - cij[e])
        total += (xi[a] - cij[a]) * acc
    return 0.5 * total


cdef double objective(Problem *P, const double *x) noexcept nogil:
    cdef int i, j
    cdef double hub, total = 0.0
    for i in range(P.M):
        hub = 0.0
        for j in range(P.m):
            hub += comp_value(P, i, j, x + i * P.d)
        total += hub / P.m
    return total / P.M


def run_loop(int obj_kind, double[:, :, ::1] A, double[:, ::1] b, double lam,
             double[:, :, :, ::1] H, double[:, :, ::1] c,
             int reg_kind, int est_kind, int tau, int k,
             double gamma, double p, double q,
             double[:, ::1] x, double[:, ::1] h,
             double[:, ::1] y, double[:, :, ::1] Gy, double[:, ::1] hy,
             double[:, ::1] xs, double[:, ::1] hs, double[:, :, ::1] Gs, int have_ref,
             double sig_c1, double sig_c2, double W, double sigma,
             double f_star, int track_fgap,
             Py_ssize_t t0, Py_ssize_t t1, double target_abs, object capsule,
             int64_t[::1] comms_col, int64_t[::1] ge_col, double[::1] dist_col, double[::1] psi_col,
             double[::1] fgap_col, int64_t[::1] theta_col, int64_t[::1] yupd_col,
             int64_t comms, int64_t ge):
    """Advance the run from local step ``t0`` to ``t1``; rows ``t0+1..`` are written.

    ``x``, ``h``, ``y``, ``Gy`` and ``hy`` are updated in place.

    Returns:
        ``(steps_done, status, draws, sigma)`` with status 0 (budget),
        1 (psi target reached) or 2 (non-finite iterate; state left at the
        last finite step).
    """
    cdef Problem P
    cdef Stream S
    S.bg = <bitgen_t *>PyCapsule_GetPointer(capsule, "BitGenerator")
    S.draws = 0
    P.kind = obj_kind
    P.M = x.shape[0]
    P.d = x.shape[1]
    P.lam = lam
    if obj_kind == 0:
        P.m = A.shape[1]
        P.A = &A[0, 0, 0]
        P.b = &b[0, 0]
    else:
        P.m = c.shape[1]
        P.H = &H[0, 0, 0, 0]
        P.c = &c[0, 0, 0]
    cdef int M = P.M, m = P.m, d = P.d
    cdef int n = M * d
    cdef double *px = &x[0, 0]
    cdef double *ph = &h[0, 0]
    cdef double *py = &y[0, 0]
    cdef double *pGy = &Gy[0, 0, 0]
    cdef double *phy = &hy[0, 0]
    cdef double *pxs = &xs[0, 0]
    cdef double *phs = &hs[0, 0]
    cdef double *pGs = &Gs[0, 0, 0]

    cdef int pool_n = m if m > d else d
    cdef double *g = <double *>malloc(n * sizeof(double))
    cdef double *xhat = <double *>malloc(n * sizeof(double))
    cdef double *xnew = <double *>malloc(n * sizeof(double))
    cdef double *hnew = <double *>malloc(n * sizeof(double))
    cdef double *xold = <double *>malloc(n * sizeof(double))
    cdef double *xproj = <double *>malloc(n * sizeof(double))
    cdef double *tmp = <double *>malloc(d * sizeof(double))
    cdef double *acc = <double *>malloc(d * sizeof(double))
    cdef double *mean = <double *>malloc(d * sizeof(double))
    cdef int *subs = <int *>malloc(M * m * sizeof(int))
    cdef int *pool = <int *>malloc(pool_n * sizeof(int))
    cdef int *kept = <int *>malloc(M * m * d * sizeof(int))
    cdef char *keep_mask = <char *>malloc(d * sizeof(char))

    cdef Py_ssize_t t
    cdef int i, j, s, a, theta, refreshed, status = 0, compress, bs
    cdef double step = gamma / p, ratio = p / gamma, scale = (<double>d) / k, ssq, dist, hsq, psi, v
    cdef double gp2 = (gamma / p) * (gamma / p)
    compress = 1 if (est_kind == 2 and k < d) else 0
    bs = tau if (est_kind != 0 and tau < m) else m
    t = t0
    with nogil:
        while t < t1:
            # --- direction ---
            if est_kind != 0 and tau < m:
                for i in range(M):
                    draw_subset(&S, m, tau, pool, subs + i * m)
            else:
                for i in range(M):
                    for j in range(m):
                        subs[i * m + j] = j
            if compress:
                for i in range(M):
                    for s in range(bs):
                        draw_subset(&S, d, k, pool, kept + (i * m + s) * d)
            for i in range(M):
                for a in range(d):
                    acc[a] = 0.0
                for s in range(bs):
                    j = subs[i * m + s]
                    comp_grad(&P, i, j, px + i * d, tmp)
                    if est_kind == 2:
                        for a in range(d):
                            tmp[a] = tmp[a] - pGy[(i * m + j) * d + a]
                        if compress:
                            for a in range(d):
                                keep_mask[a] = 0
                            for a in range(k):
                                keep_mask[kept[(i * m + s) * d + a]] = 1
                            for a in range(d):
                                tmp[a] = tmp[a] * scale if keep_mask[a] else 0.0
                    for a in range(d):
                        acc[a] += tmp[a]
                for a in range(d):
                    if est_kind == 2:
                        g[i * d + a] = (acc[a] / bs + phy[i * d + a]) / M
                    else:
                        g[i * d + a] = acc[a] / bs / M
            # --- shifted step, coin, prox ---
            for a in range(n):
                xhat[a] = px[a] - gamma * (g[a] - ph[a])
            theta = 1 if next_uniform(&S) < p else 0
            if theta:
                for a in range(n):
                    xnew[a] = xhat[a] - step * ph[a]
                if reg_kind == 1:
                    for a in range(d):
                        mean[a] = 0.0
                    for i in range(M):
                        for a in range(d):
                            mean[a] += xnew[i * d + a]
                    for a in range(d):
                        mean[a] = mean[a] / M
                    for i in range(M):
                        for a in range(d):
                            xnew[i * d + a] = mean[a]
            else:
                for a in range(n):
                    xnew[a] = xhat[a]
            for a in range(n):
                hnew[a] = ph[a] + ratio * (xnew[a] - xhat[a])
            # --- q-coin ---
            refreshed = 0
            if est_kind == 2:
                refreshed = 1 if next_uniform(&S) < q else 0
            status = 0
            for a in range(n):
                if not (isfinite(xnew[a]) and isfinite(hnew[a])):
                    status = 2
                    break
            if status == 2:
                break
            for a in range(n):
                xold[a] = px[a]
                px[a] = xnew[a]
                ph[a] = hnew[a]
            if refreshed:
                for a in range(n):
                    py[a] = xold[a]
                for i in range(M):
                    for a in range(d):
                        phy[i * d + a] = 0.0
                    for j in range(m):
                        comp_grad(&P, i, j, py + i * d, pGy + (i * m + j) * d)
                        for a in range(d):
                            phy[i * d + a] += pGy[(i * m + j) * d + a]
                    for a in range(d):
                        phy[i * d + a] = phy[i * d + a] / m
                if have_ref:
                    ssq = 0.0
                    for a in range(M * m * d):
                        v = pGy[a] - pGs[a]
                        ssq += v * v
                    sigma = sig_c1 * ssq / m / (<double>M * M)
                    if sig_c2 != 0.0:
                        ssq = 0.0
                        for a in range(n):
                            v = phy[a] / M - phs[a]
                            ssq += v * v
                        sigma += sig_c2 * ssq
            # --- bookkeeping ---
            t += 1
            comms += theta
            if est_kind == 0:
                ge += m
            elif est_kind == 1:
                ge += tau
            else:
                ge += tau + (m if refreshed else tau)
            comms_col[t] = comms
            ge_col[t] = ge
            theta_col[t] = theta
            yupd_col[t] = refreshed
            if have_ref:
                dist = 0.0
                hsq = 0.0
                for a in range(n):
                    v = px[a] - pxs[a]
                    dist += v * v
                    v = ph[a] - phs[a]
                    hsq += v * v
                psi = dist + gp2 * hsq
                if W != 0.0:
                    psi += gamma * gamma * W * sigma
                dist_col[t] = dist
                psi_col[t] = psi
                if track_fgap:
                    if reg_kind == 1:
                        for a in range(d):
                            mean[a] = 0.0
                        for i in range(M):
                            for a in range(d):
                                mean[a] += px[i * d + a]
                        for a in range(d):
                            mean[a] = mean[a] / M
                        for i in range(M):
                            for a in range(d):
                                xproj[i * d + a] = mean[a]
                        fgap_col[t] = objective(&P, xproj) - f_star
                    else:
                        fgap_col[t] = objective(&P, px) - f_star
                if target_abs >= 0.0 and psi <= target_abs:
                    status = 1
                    break
    free(g)
    free(xhat)
    free(xnew)
    free(hnew)
    free(xold)
    free(xproj)
    free(tmp)
    free(acc)
    free(mean)
    free(subs)
    free(pool)
    free(kept)
    free(keep_mask)
    return t, status, S.draws, sigma


def objective_value(int obj_kind, double[:, :, ::1] A, double[:, ::1] b, double lam,
                    double[:, :, :, ::1] H, double[:, :, ::1] c, double[:, ::1] x):
    """Smooth objective value, same summation order as the run loop."""
    cdef Problem P
    P.kind = obj_kind
    P.M = x.shape[0]
    P.d = x.shape[1]
    P.lam = lam
    if obj_kind == 0:
        P.m = A.shape[1]
        P.A = &A[0, 0, 0]
        P.b = &b[0, 0]
    else:
        P.m = c.shape[1]
        P.H = &H[0, 0, 0, 0]
        P.c = &c[0, 0, 0]
    return objective(&P, &x[0, 0])
