"""Compiled inner loops: sparse projection and the sampler sweep.

Everything here works on flat 0-based arrays. Random numbers arrive as a
pre-drawn ``(n_iter, per_iter)`` block of uniforms on [0, 1) so that chunking
never changes the trajectory.
"""

import math

import numpy as np
from numba import njit

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

# integer config slots
CI_N0 = 0
CI_THIN = 1
CI_HASTINGS = 2
CI_KERNEL_MODE = 3      # 0 free, 1 parametric
CI_PER_BIN = 4
CI_PRESERVE = 5
CI_N_ENG = 6
CI_SAMPLE_KERNEL = 7
CI_SAMPLE_P = 8
CI_KERNEL_RW = 9        # 0 exponential independence draws, 1 folded random walk
CI_SIZE = 10

# float config slots
CF_P_LO = 0
CF_P_HI = 1
CF_P_STEP = 2
CF_Q_MAX = 3
CF_ETA0_MAX = 4
CF_Q_STEP = 5
CF_ETA0_STEP = 6
CF_ETA_SURFACE = 7
CF_SD_FLOOR = 8
CF_Q_MEAN = 9
CF_Q_SD = 10
CF_S_MEAN = 11
CF_S_SD = 12
CF_KERNEL_STEP = 13     # random-walk sd as a fraction of each parameter's seed value
CF_SIZE = 14

# scalar state slots
S_P = 0
S_Q = 1
S_ETA0 = 2
S_WIDTH = 3
S_SIZE = 4

# counters
K_XI_PROP = 0
K_XI_ACC = 1
K_P_PROP = 2
K_P_ACC = 3
K_KERNEL_PROP = 4
K_KERNEL_ACC = 5
K_KERNEL_INFEASIBLE = 6
K_KERNEL_NEGATIVE = 7
K_HYPER_PROP = 8
K_HYPER_ACC = 9
K_HYPER_INFEASIBLE = 10
K_RECORDED = 11
K_HIST = 12
K_SIZE = 13


def uniforms_per_iteration(n_voxels, n_eng):
    return 4 * n_voxels + 2 + 3 * max(n_eng, 2) + 3


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

@njit(cache=True)
def project_row(row_ptr, cols, lags, weights, kernel, xi, r):
    s = 0.0
    for e in range(row_ptr[r], row_ptr[r + 1]):
        s += weights[e] * kernel[lags[e]] * xi[cols[e]]
    return s


@njit(cache=True)
def project_rows_all(row_ptr, cols, lags, weights, kernel, xi, out):
    for r in range(out.shape[0]):
        out[r] = project_row(row_ptr, cols, lags, weights, kernel, xi, r)


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------

@njit(cache=True)
def folded_normal_logpdf(x, mean, sd):
    if x < 0.0:
        return -np.inf
    a = -(x - mean) ** 2 / (2.0 * sd * sd)
    b = -(x + mean) ** 2 / (2.0 * sd * sd)
    hi = max(a, b)
    return hi + math.log(math.exp(a - hi) + math.exp(b - hi)) - math.log(sd) - LOG_SQRT_2PI


@njit(cache=True)
def folded_shape(z, q, eta0, s):
    return q * (math.exp(-(z - eta0) ** 2 / (2.0 * s * s)) + math.exp(-(z + eta0) ** 2 / (2.0 * s * s)))


@njit(cache=True)
def _surface_excess(log_s, q, eta0, eta_surface):
    s = math.exp(log_s)
    return folded_normal_logpdf(eta_surface, folded_shape(0.0, q, eta0, s), s)


@njit(cache=True)
def solve_free_width(q, eta0, eta_surface):
    """Largest prior width giving unit density at the surface value; -1 if none."""
    # the folded-normal density never exceeds 2 / (s sqrt(2 pi)), so no root above this
    hi = math.log(2.0 / math.sqrt(2.0 * math.pi)) + 1e-9
    step = math.log(1.02)
    lo = hi - step
    while _surface_excess(lo, q, eta0, eta_surface) < 0.0:
        hi = lo
        lo -= step
        if lo < math.log(1e-10):
            return -1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _surface_excess(mid, q, eta0, eta_surface) >= 0.0:
            lo = mid
        else:
            hi = mid
    return math.exp(lo)


@njit(cache=True)
def cell_loglik(c, data, lognorm, inv2var):
    d = c - data
    return lognorm - d * d * inv2var


@njit(cache=True)
def sparsity_tau(proj, r, n_eng):
    if r % n_eng == 0:
        return 1.0
    prev = proj[r - 1]
    cur = proj[r]
    if prev != 0.0 and cur <= prev:
        return cur / prev
    return 1.0


@njit(cache=True)
def voxel_logprior(x, tau, log_p, log_1mp):
    nu = math.exp(tau * log_p + (1.0 - tau) * log_1mp)
    v = x * nu
    return -v * v


@njit(cache=True)
def kernel_logprior(kernel, z, mode, q, eta0, s, cf):
    if mode == 0:
        total = 0.0
        for k in range(kernel.shape[0]):
            total += folded_normal_logpdf(kernel[k], folded_shape(z[k], q, eta0, s), s)
        return total
    log_term = 2.0 * math.log(2.0 * q / cf[CF_ETA_SURFACE])
    if log_term <= 0.0:
        return -np.inf
    return (folded_normal_logpdf(q, cf[CF_Q_MEAN], cf[CF_Q_SD])
            + folded_normal_logpdf(s, cf[CF_S_MEAN], cf[CF_S_SD])
            - 0.5 * math.log(log_term))


@njit(cache=True)
def _reflect(x, lo, hi):
    width = hi - lo
    if width <= 0.0:
        return lo
    y = (x - lo) % (2.0 * width)
    if y > width:
        y = 2.0 * width - y
    return lo + y


@njit(cache=True)
def _log_accept_u(u):
    # u in [0, 1) -> log of a variate in (0, 1]
    return math.log(1.0 - u)


@njit(cache=True)
def _normal(u1, u2):
    return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True)
def deconvolve_column(y, kernel, out):
    """Solve the lower-triangular Toeplitz system kernel * out = y."""
    n = y.shape[0]
    for t in range(n):
        acc = y[t]
        for m in range(t):
            acc -= kernel[t - m] * out[m]
        out[t] = acc / kernel[0]


@njit(cache=True)
def convolve_column(x, kernel, out):
    n = x.shape[0]
    for t in range(n):
        acc = 0.0
        for m in range(t + 1):
            acc += kernel[t - m] * x[m]
        out[t] = acc


# --------------------------------------------------------------------------
# full-state helpers
# --------------------------------------------------------------------------

@njit(cache=True)
def refresh_terms(xi, proj, data, lognorm, inv2var, p, n_eng, ll, lp):
    log_p = math.log(p)
    log_1mp = math.log(1.0 - p)
    for r in range(xi.shape[0]):
        ll[r] = cell_loglik(proj[r], data[r], lognorm[r], inv2var[r])
        lp[r] = voxel_logprior(xi[r], sparsity_tau(proj, r, n_eng), log_p, log_1mp)


# --------------------------------------------------------------------------
# sampler sweep
# --------------------------------------------------------------------------

@njit(cache=True)
def run_chunk(uniforms, n_start,
              row_ptr, cols, lags, weights, col_ptr, col_rows,
              data, lognorm, inv2var,
              xi, kernel, proj, ll, lp, scal,
              ci, cf, seed_xi, rates, z,
              sum1, sum2, counters,
              rec_xi, rec_kernel, rec_scal, rec_comp):
    n_vox = xi.shape[0]
    n_eng = ci[CI_N_ENG]
    n0 = ci[CI_N0]
    thin = ci[CI_THIN]
    hastings = ci[CI_HASTINGS] != 0

    old_proj = np.empty(n_vox)
    new_ll = np.empty(n_vox)
    new_lp = np.empty(n_vox)
    mark = np.full(n_vox, -1, dtype=np.int64)
    touched = np.empty(n_vox, dtype=np.int64)
    cand_kernel = np.empty(n_eng)
    cand_xi = np.empty(n_vox)
    cand_proj = np.empty(n_vox)
    col_y = np.empty(n_eng)
    col_x = np.empty(n_eng)

    for it in range(uniforms.shape[0]):
        n = n_start + it
        u = uniforms[it]
        base = 0
        p = scal[S_P]
        log_p = math.log(p)
        log_1mp = math.log(1.0 - p)
        hist = counters[K_HIST]

        # ---- density block, one voxel at a time
        for c in range(n_vox):
            u1 = u[base]
            u2 = u[base + 1]
            ut = u[base + 2]
            ua = u[base + 3]
            base += 4
            x = xi[c]
            sd = 0.0
            if n >= n0 and hist >= 2:
                mean = sum1[c] / hist
                var = (sum2[c] - hist * mean * mean) / (hist - 1)
                if var > 0.0:
                    sd = math.sqrt(var)
            if sd == 0.0:
                sd = (1.0 - ut) * max(seed_xi[c], cf[CF_SD_FLOOR])
            x_new = abs(x + sd * _normal(u1, u2))
            counters[K_XI_PROP] += 1
            if x_new == x:
                counters[K_XI_ACC] += 1
                continue

            # stage affected cells
            n_touch = 0
            start = col_ptr[c]
            stop = col_ptr[c + 1]
            d_ll = 0.0
            xi[c] = x_new
            for e in range(start, stop):
                r = col_rows[e]
                old_proj[r] = proj[r]
                proj[r] = project_row(row_ptr, cols, lags, weights, kernel, xi, r)
                new_ll[r] = cell_loglik(proj[r], data[r], lognorm[r], inv2var[r])
                d_ll += new_ll[r] - ll[r]
                for rr in (r, r + 1):
                    if rr < n_vox and (rr == r or rr % n_eng != 0) and mark[rr] != c:
                        mark[rr] = c
                        touched[n_touch] = rr
                        n_touch += 1
            if mark[c] != c:
                mark[c] = c
                touched[n_touch] = c
                n_touch += 1
            d_lp = 0.0
            for a in range(n_touch):
                v = touched[a]
                new_lp[v] = voxel_logprior(xi[v], sparsity_tau(proj, v, n_eng), log_p, log_1mp)
                d_lp += new_lp[v] - lp[v]
            log_q = 0.0
            if hastings:
                log_q = folded_normal_logpdf(x, x_new, sd) - folded_normal_logpdf(x_new, x, sd)
            log_ratio = d_ll + d_lp + log_q
            if _log_accept_u(ua) <= log_ratio:
                counters[K_XI_ACC] += 1
                for e in range(start, stop):
                    r = col_rows[e]
                    ll[r] = new_ll[r]
                for a in range(n_touch):
                    v = touched[a]
                    lp[v] = new_lp[v]
            else:
                xi[c] = x
                for e in range(start, stop):
                    r = col_rows[e]
                    proj[r] = old_proj[r]
            # clear marks so a voxel index reused as a stamp later is safe
            for a in range(n_touch):
                mark[touched[a]] = -1

        # ---- sparsity hyperparameter
        up = u[base]
        ua = u[base + 1]
        base += 2
        if ci[CI_SAMPLE_P] != 0:
            p_new = _reflect(p + cf[CF_P_STEP] * (2.0 * up - 1.0), cf[CF_P_LO], cf[CF_P_HI])
            counters[K_P_PROP] += 1
            lpn = math.log(p_new)
            l1n = math.log(1.0 - p_new)
            d = 0.0
            for v in range(n_vox):
                new_lp[v] = voxel_logprior(xi[v], sparsity_tau(proj, v, n_eng), lpn, l1n)
                d += new_lp[v] - lp[v]
            if _log_accept_u(ua) <= d:
                counters[K_P_ACC] += 1
                scal[S_P] = p_new
                for v in range(n_vox):
                    lp[v] = new_lp[v]

        # ---- kernel block: three uniforms per parameter slot
        kbase = base
        base += 3 * max(n_eng, 2)
        if ci[CI_SAMPLE_KERNEL] != 0:
            rw = ci[CI_KERNEL_RW] != 0
            step = cf[CF_KERNEL_STEP]
            if ci[CI_KERNEL_MODE] == 0:
                per_bin = ci[CI_PER_BIN] != 0
                for kk in range(n_eng):
                    cand_kernel[kk] = kernel[kk]
                log_q = 0.0
                for k in range(1, n_eng):
                    a = kbase + 3 * k
                    if rw:
                        cand_kernel[k] = abs(kernel[k] + step / rates[k] * _normal(u[a], u[a + 1]))
                        dq = 0.0
                    else:
                        cand_kernel[k] = -math.log(1.0 - u[a]) / rates[k]
                        dq = rates[k] * (cand_kernel[k] - kernel[k])
                    if per_bin:
                        _kernel_move(cand_kernel, dq, u[a + 2], scal, scal[S_Q],
                                     scal[S_ETA0], scal[S_WIDTH],
                                     row_ptr, cols, lags, weights, data, lognorm, inv2var,
                                     xi, kernel, proj, ll, lp, ci, cf, z, hastings,
                                     cand_xi, cand_proj, new_ll, new_lp, col_y, col_x, counters)
                        for kk in range(n_eng):
                            cand_kernel[kk] = kernel[kk]
                    else:
                        log_q += dq
                if not per_bin:
                    _kernel_move(cand_kernel, log_q, u[kbase + 2], scal, scal[S_Q],
                                 scal[S_ETA0], scal[S_WIDTH],
                                 row_ptr, cols, lags, weights, data, lognorm, inv2var,
                                 xi, kernel, proj, ll, lp, ci, cf, z, hastings,
                                 cand_xi, cand_proj, new_ll, new_lp, col_y, col_x, counters)
            else:
                if rw:
                    q_new = abs(scal[S_Q] + step / rates[0] * _normal(u[kbase], u[kbase + 1]))
                    e_new = abs(scal[S_ETA0] + step / rates[1] * _normal(u[kbase + 3], u[kbase + 4]))
                    log_q = 0.0
                else:
                    q_new = -math.log(1.0 - u[kbase]) / rates[0]
                    e_new = -math.log(1.0 - u[kbase + 3]) / rates[1]
                    log_q = rates[0] * (q_new - scal[S_Q]) + rates[1] * (e_new - scal[S_ETA0])
                log_term = 2.0 * math.log(2.0 * q_new / cf[CF_ETA_SURFACE]) if q_new > 0.0 else -1.0
                if log_term <= 0.0 or e_new <= 0.0:
                    counters[K_KERNEL_PROP] += 1
                    counters[K_KERNEL_INFEASIBLE] += 1
                else:
                    s_new = e_new / math.sqrt(log_term)
                    for k in range(n_eng):
                        cand_kernel[k] = folded_shape(z[k], q_new, e_new, s_new)
                    _kernel_move(cand_kernel, log_q, u[kbase + 2], scal, q_new, e_new, s_new,
                                 row_ptr, cols, lags, weights, data, lognorm, inv2var,
                                 xi, kernel, proj, ll, lp, ci, cf, z, hastings,
                                 cand_xi, cand_proj, new_ll, new_lp, col_y, col_x, counters)

        # ---- free-kernel prior hyperparameters
        if ci[CI_SAMPLE_KERNEL] != 0 and ci[CI_KERNEL_MODE] == 0:
            uq = u[base]
            ue = u[base + 1]
            ua = u[base + 2]
            counters[K_HYPER_PROP] += 1
            q_new = _reflect(scal[S_Q] + cf[CF_Q_STEP] * (2.0 * uq - 1.0), 0.0, cf[CF_Q_MAX])
            e_new = _reflect(scal[S_ETA0] + cf[CF_ETA0_STEP] * (2.0 * ue - 1.0), 0.0, cf[CF_ETA0_MAX])
            s_new = solve_free_width(q_new, e_new, cf[CF_ETA_SURFACE]) if q_new > 0.0 else -1.0
            if s_new <= 0.0:
                counters[K_HYPER_INFEASIBLE] += 1
            else:
                d = (kernel_logprior(kernel, z, 0, q_new, e_new, s_new, cf)
                     - kernel_logprior(kernel, z, 0, scal[S_Q], scal[S_ETA0], scal[S_WIDTH], cf))
                if _log_accept_u(ua) <= d:
                    counters[K_HYPER_ACC] += 1
                    scal[S_Q] = q_new
                    scal[S_ETA0] = e_new
                    scal[S_WIDTH] = s_new
        base += 3

        # ---- adaptation history and recording
        if n >= n0:
            for c in range(n_vox):
                sum1[c] += xi[c]
                sum2[c] += xi[c] * xi[c]
            counters[K_HIST] += 1
        if (n + 1) % thin == 0:
            j = counters[K_RECORDED]
            if j < rec_xi.shape[0]:
                for c in range(n_vox):
                    rec_xi[j, c] = xi[c]
                for k in range(n_eng):
                    rec_kernel[j, k] = kernel[k]
                for a in range(S_SIZE):
                    rec_scal[j, a] = scal[a]
                tot_ll = 0.0
                tot_lp = 0.0
                for c in range(n_vox):
                    tot_ll += ll[c]
                    tot_lp += lp[c]
                rec_comp[j, 0] = n + 1
                rec_comp[j, 1] = tot_ll
                rec_comp[j, 2] = tot_lp
                rec_comp[j, 3] = kernel_logprior(kernel, z, ci[CI_KERNEL_MODE], scal[S_Q],
                                                 scal[S_ETA0], scal[S_WIDTH], cf)
                counters[K_RECORDED] = j + 1


@njit(cache=True)
def _kernel_move(cand_kernel, log_q, ua, scal, q_new, e_new, s_new,
                 row_ptr, cols, lags, weights, data, lognorm, inv2var,
                 xi, kernel, proj, ll, lp, ci, cf, z, hastings,
                 cand_xi, cand_proj, new_ll, new_lp, col_y, col_x, counters):
    """Propose a whole new kernel (and optionally a compensating density)."""
    n_vox = xi.shape[0]
    n_eng = ci[CI_N_ENG]
    counters[K_KERNEL_PROP] += 1
    for c in range(n_vox):
        cand_xi[c] = xi[c]
    if ci[CI_PRESERVE] != 0:
        # keep every column's convolved profile fixed; unit Jacobian since
        # both triangular operators share the fixed surface diagonal
        for j in range(n_vox // n_eng):
            off = j * n_eng
            convolve_column(xi[off:off + n_eng], kernel, col_y)
            deconvolve_column(col_y, cand_kernel, col_x)
            for m in range(n_eng):
                if col_x[m] < 0.0:
                    counters[K_KERNEL_NEGATIVE] += 1
                    return
                cand_xi[off + m] = col_x[m]
    project_rows_all(row_ptr, cols, lags, weights, cand_kernel, cand_xi, cand_proj)
    p = scal[S_P]
    refresh_terms(cand_xi, cand_proj, data, lognorm, inv2var, p, n_eng, new_ll, new_lp)
    d = 0.0
    for r in range(n_vox):
        d += (new_ll[r] - ll[r]) + (new_lp[r] - lp[r])
    mode = ci[CI_KERNEL_MODE]
    d += (kernel_logprior(cand_kernel, z, mode, q_new, e_new, s_new, cf)
          - kernel_logprior(kernel, z, mode, scal[S_Q], scal[S_ETA0], scal[S_WIDTH], cf))
    if hastings:
        d += log_q
    if not (d == d):
        return
    if _log_accept_u(ua) <= d:
        counters[K_KERNEL_ACC] += 1
        for k in range(n_eng):
            kernel[k] = cand_kernel[k]
        for r in range(n_vox):
            xi[r] = cand_xi[r]
            proj[r] = cand_proj[r]
            ll[r] = new_ll[r]
            lp[r] = new_lp[r]
        if mode == 1:
            scal[S_Q] = q_new
            scal[S_ETA0] = e_new
            scal[S_WIDTH] = s_new
