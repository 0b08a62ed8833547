"""NumPy reference backend for the sequence kernels.

Semantically identical to the compiled backend in ``_fast.pyx``; used as the
import-time fallback and as the comparison baseline in the backend benchmark.
All moments are raw sums over observations sorted by the threshold variable.
"""

from __future__ import annotations

import numpy as np

from ._prep import OK, SINGULAR, TOO_SMALL, PreparedSample, pd_solve_np, prefix_at_cuts

_pd_solve = pd_solve_np


def _quad_form(v: np.ndarray, d: np.ndarray):
    """d' v^{-1} d for PD v; exact-zero d short-circuits to 0."""
    if not d.any():
        return 0.0
    x = _pd_solve(v, d)
    if x is None or not np.isfinite(x).all():
        return None
    return max(float(d @ x), 0.0)


def _gmm_theta(n_mat, weight, szy):
    """GMM estimate (N W^{-1} N')^{-1} N W^{-1} szy with PD weight."""
    rhs = _pd_solve(weight, np.column_stack([n_mat.T, szy]))
    if rhs is None:
        return None, None
    a = n_mat @ rhs[:, :-1]
    c = n_mat @ rhs[:, -1]
    theta = _pd_solve(0.5 * (a + a.T), c)
    if theta is None or not np.isfinite(theta).all():
        return None, None
    return theta, 0.5 * (a + a.T)


def _gmm_wald(n1, n2, h1, h2, th1, th2):
    """Wald value d' [sum_i (N_i H_i^{-1} N_i')^{-1}]^{-1} d (raw sums)."""
    d = th1 - th2
    if not d.any():
        return 0.0
    v = 0.0
    for n_mat, h in ((n1, h1), (n2, h2)):
        x = _pd_solve(h, n_mat.T)
        if x is None:
            return None
        inner = n_mat @ x
        vi = _pd_solve(0.5 * (inner + inner.T), np.eye(n_mat.shape[0]))
        if vi is None:
            return None
        v = v + vi
    return _quad_form(0.5 * (v + v.T), d)


def _h_blocks(prep, g, r, homosked, szz_r_c=None, szz_r_tot=None, sig2=None):
    """Per-regime raw H for a residual vector (robust or sigma^2 * M analog)."""
    if homosked:
        h1 = sig2 * prep.mzz_c[g]
        h2 = sig2 * (prep.mzz_tot - prep.mzz_c[g])
    else:
        h1 = szz_r_c[g]
        h2 = szz_r_tot - h1
    return h1, h2


def gmm_fixed_resid_stats(prep: PreparedSample, y, r, homosked, two_step):
    """Per-candidate GMM Wald statistics with H built from a fixed residual
    vector (sorted order). Returns (values, status)."""
    T, G = prep.T, prep.G
    vals = np.full(G, np.nan)
    status = np.full(G, OK, dtype=np.uint8)
    zy = prep.z * y[:, None]
    szy_c = prefix_at_cuts(zy, prep.cuts)
    szy_tot = zy.sum(axis=0)
    sig2 = float(r @ r) / T
    szz_r_c = szz_r_tot = None
    if not homosked:
        zzr = np.einsum("t,ti,tj->tij", r * r, prep.z, prep.z)
        szz_r_c = prefix_at_cuts(zzr, prep.cuts)
        szz_r_tot = zzr.sum(axis=0)
    y_all_zero = not y.any()
    for g in range(G):
        k = prep.cuts[g]
        if k < prep.n_min or T - k < prep.n_min:
            status[g] = TOO_SMALL
            continue
        if y_all_zero:
            # all-zero pseudo-data: estimates and contrasts are exactly zero
            vals[g] = 0.0
            continue
        n1 = prep.nwz_c[g]
        n2 = prep.nwz_tot - n1
        s1 = szy_c[g]
        s2 = szy_tot - s1
        h1, h2 = _h_blocks(prep, g, r, homosked, szz_r_c, szz_r_tot, sig2)
        if two_step:
            th1, _ = _gmm_theta(n1, h1, s1)
            th2, _ = _gmm_theta(n2, h2, s2)
        else:
            m1 = prep.mzz_c[g]
            th1, _ = _gmm_theta(n1, m1, s1)
            th2, _ = _gmm_theta(n2, prep.mzz_tot - m1, s2)
        if th1 is None or th2 is None:
            status[g] = SINGULAR
            continue
        wald = _gmm_wald(n1, n2, h1, h2, th1, th2)
        if wald is None or not np.isfinite(wald):
            status[g] = SINGULAR
            continue
        vals[g] = wald
    return vals, status


def _pergamma_core(prep, y, homosked, two_step, want_resid):
    """Shared per-candidate loop for the split-residual GMM variant."""
    T, G = prep.T, prep.G
    vals = np.full(G, np.nan)
    status = np.full(G, OK, dtype=np.uint8)
    resid = np.full((G, T), np.nan) if want_resid else None
    multi_y = y.ndim == 2 and y.shape[0] > 1
    for g in range(G):
        k = prep.cuts[g]
        if k < prep.n_min or T - k < prep.n_min:
            status[g] = TOO_SMALL
            continue
        yg = y[g] if multi_y else (y[0] if y.ndim == 2 else y)
        if not yg.any():
            # all-zero pseudo-data: estimates and contrasts are exactly zero
            vals[g] = 0.0
            if want_resid:
                resid[g] = 0.0
            continue
        n1 = prep.nwz_c[g]
        n2 = prep.nwz_tot - n1
        m1 = prep.mzz_c[g]
        m2 = prep.mzz_tot - m1
        s1 = prep.z[:k].T @ yg[:k]
        s2 = prep.z[k:].T @ yg[k:]
        th1, _ = _gmm_theta(n1, m1, s1)
        th2, _ = _gmm_theta(n2, m2, s2)
        if th1 is None or th2 is None:
            status[g] = SINGULAR
            continue
        r1 = np.concatenate([yg[:k] - prep.w[:k] @ th1, yg[k:] - prep.w[k:] @ th2])
        if homosked:
            sig2 = float(r1 @ r1) / T
            h1, h2 = sig2 * m1, sig2 * m2
            tw1, tw2 = th1, th2  # weight proportional to M: second step coincides
        else:
            zr = prep.z * r1[:, None]
            h1 = zr[:k].T @ zr[:k]
            h2 = zr[k:].T @ zr[k:]
            if two_step:
                tw1, _ = _gmm_theta(n1, h1, s1)
                tw2, _ = _gmm_theta(n2, h2, s2)
                if tw1 is None or tw2 is None:
                    status[g] = SINGULAR
                    continue
            else:
                tw1, tw2 = th1, th2
        wald = _gmm_wald(n1, n2, h1, h2, tw1, tw2)
        if wald is None or not np.isfinite(wald):
            status[g] = SINGULAR
            continue
        vals[g] = wald
        if want_resid:
            resid[g, :k] = yg[:k] - prep.w[:k] @ tw1
            resid[g, k:] = yg[k:] - prep.w[k:] @ tw2
    return vals, status, resid


def gmm_pergamma_stats(prep: PreparedSample, y, homosked, two_step):
    """Per-candidate GMM Wald statistics with split (per-candidate) residuals
    in H; ``y`` may be (T,), (1, T) shared, or (G, T) per-candidate rows."""
    vals, status, _ = _pergamma_core(prep, np.asarray(y), homosked, two_step, False)
    return vals, status


def gmm_pergamma_resid2(prep: PreparedSample, y, homosked, two_step):
    """Second-step split residual matrix (G, T) in sorted order."""
    _, status, resid = _pergamma_core(prep, np.asarray(y), homosked, two_step, True)
    return resid, status


def tfs_rho_ssr(prep: PreparedSample, x, n_min=None):
    """Trace SSR of the split multivariate OLS of x on z at every cut."""
    T, G = prep.T, prep.G
    n_min = prep.n_min if n_min is None else n_min
    ssr = np.full(G, np.nan)
    status = np.full(G, OK, dtype=np.uint8)
    zx = np.einsum("ti,tj->tij", prep.z, x)
    szx_c = prefix_at_cuts(zx, prep.cuts)
    szx_tot = zx.sum(axis=0)
    total = float(np.einsum("ij,ij->", x, x))
    for g in range(G):
        k = prep.cuts[g]
        if k < n_min or T - k < n_min:
            status[g] = TOO_SMALL
            continue
        s1 = szx_c[g]
        s2 = szx_tot - s1
        m1 = prep.mzz_c[g]
        m2 = prep.mzz_tot - m1
        b1 = _pd_solve(m1, s1)
        b2 = _pd_solve(m2, s2)
        if b1 is None or b2 is None:
            status[g] = SINGULAR
            continue
        fit = float(np.einsum("ij,ij->", s1, b1) + np.einsum("ij,ij->", s2, b2))
        ssr[g] = max(total - fit, 0.0)
    return ssr, status


def _lr_value(ssr0, ssr1, dof):
    num = ssr0 - ssr1
    if num <= 0.0:
        return 0.0
    if ssr1 <= 0.0:
        return np.inf
    return num / (ssr1 / dof)


def _weighted_zz_prefixes(prep, eps, b):
    """Raw prefix sums of eps^2, eps*b and b^2 weighted z z' at the cuts."""
    out = []
    for wgt in (eps * eps, eps * b, b * b):
        zz = np.einsum("t,ti,tj->tij", wgt, prep.z, prep.z)
        out.append((prefix_at_cuts(zz, prep.cuts), zz.sum(axis=0)))
    return out


def _split_theta(cww1, cww2, s1, s2):
    th1 = _pd_solve(cww1, s1)
    th2 = _pd_solve(cww2, s2)
    if th1 is None or th2 is None or not np.isfinite(th1).all() or not np.isfinite(th2).all():
        return None, None
    return th1, th2


def tsls_sequences_lfs(
    prep: PreparedSample,
    what,
    y,
    eps,
    b,
    a_mat,
    ssr0,
    dof,
    homosked,
    s_ee,
    s_eb,
    s_bb,
    want_lr,
    want_w,
):
    """LR and Wald sequences for split 2SLS with a linear first stage.

    ``eps`` are structural null residuals, ``b = uhat @ theta_x``; the Wald
    variance uses the eps/b contractions of the Kronecker blocks.
    """
    T, G = prep.T, prep.G
    lr = np.full(G, np.nan)
    wv = np.full(G, np.nan)
    status = np.full(G, OK, dtype=np.uint8)

    ww = np.einsum("ti,tj->tij", what, what)
    cww_c = prefix_at_cuts(ww, prep.cuts)
    cww_tot = ww.sum(axis=0)
    wy = what * y[:, None]
    swy_c = prefix_at_cuts(wy, prep.cuts)
    swy_tot = wy.sum(axis=0)
    yy = float(y @ y)

    if want_w and not homosked:
        (pee_c, pee_t), (peb_c, peb_t), (pbb_c, pbb_t) = _weighted_zz_prefixes(prep, eps, b)
    m_inv = _pd_solve(prep.mzz_tot, np.eye(prep.z.shape[1]))
    if m_inv is None:
        status[:] = SINGULAR
        return lr, wv, status

    for g in range(G):
        k = prep.cuts[g]
        if k < prep.n_min or T - k < prep.n_min:
            status[g] = TOO_SMALL
            continue
        c1 = cww_c[g]
        c2 = cww_tot - c1
        s1 = swy_c[g]
        s2 = swy_tot - s1
        th1, th2 = _split_theta(c1, c2, s1, s2)
        if th1 is None:
            status[g] = SINGULAR
            continue
        ssr1 = max(yy - float(th1 @ s1) - float(th2 @ s2), 0.0)
        if want_lr:
            lr[g] = _lr_value(ssr0, ssr1, dof)
        if not want_w:
            continue
        m1 = prep.mzz_c[g]
        r1 = m1 @ m_inv
        r2 = (prep.mzz_tot - m1) @ m_inv
        if homosked:
            e_tt1 = (s_ee + 2 * s_eb + s_bb) * m1
            e_tc1 = (s_eb + s_bb) * m1
            e_cc1 = s_bb * m1
            m2 = prep.mzz_tot - m1
            e_tt2 = (s_ee + 2 * s_eb + s_bb) * m2
            e_tc2 = (s_eb + s_bb) * m2
            e_ccf = s_bb * prep.mzz_tot
        else:
            e_tt1 = pee_c[g] + 2 * peb_c[g] + pbb_c[g]
            e_tc1 = peb_c[g] + pbb_c[g]
            e_cc1 = pbb_c[g]
            e_tt2 = (pee_t - pee_c[g]) + 2 * (peb_t - peb_c[g]) + (pbb_t - pbb_c[g])
            e_tc2 = (peb_t - peb_c[g]) + (pbb_t - pbb_c[g])
            e_ccf = pbb_t
        v1 = a_mat @ (e_tt1 - e_tc1 @ r1.T - r1 @ e_tc1 + r1 @ e_ccf @ r1.T) @ a_mat.T
        v2 = a_mat @ (e_tt2 - e_tc2 @ r2.T - r2 @ e_tc2 + r2 @ e_ccf @ r2.T) @ a_mat.T
        v12 = a_mat @ (-e_tc1 @ r2.T - r1 @ e_tc2 + r1 @ e_ccf @ r2.T) @ a_mat.T
        wald = _sandwich_wald(c1, c2, v1, v12, v2, th1 - th2)
        if wald is None:
            status[g] = SINGULAR
            continue
        wv[g] = wald
    return lr, wv, status


def _sandwich_wald(c1, c2, v1, v12, v2, d):
    if not d.any():
        return 0.0
    eye = np.eye(c1.shape[0])
    c1i = _pd_solve(c1, eye)
    c2i = _pd_solve(c2, eye)
    if c1i is None or c2i is None:
        return None
    vg = c1i @ v1 @ c1i - c1i @ v12 @ c2i - c2i @ v12.T @ c1i + c2i @ v2 @ c2i
    out = _quad_form(0.5 * (vg + vg.T), d)
    if out is None or not np.isfinite(out):
        return None
    return out


def tsls_sequences_tfs(
    prep: PreparedSample,
    what,
    y,
    eps,
    b,
    a1_mat,
    a2_mat,
    rho_cut,
    ssr0,
    dof,
    homosked,
    s_ee,
    s_eb,
    s_bb,
    want_lr,
    want_w,
):
    """LR and Wald sequences for split 2SLS with a threshold first stage.

    Variance blocks branch on the candidate cut versus the first-stage cut
    ``rho_cut`` (ties use the low branch).
    """
    T, G = prep.T, prep.G
    lr = np.full(G, np.nan)
    wv = np.full(G, np.nan)
    status = np.full(G, OK, dtype=np.uint8)

    ww = np.einsum("ti,tj->tij", what, what)
    cww_c = prefix_at_cuts(ww, prep.cuts)
    cww_tot = ww.sum(axis=0)
    wy = what * y[:, None]
    swy_c = prefix_at_cuts(wy, prep.cuts)
    swy_tot = wy.sum(axis=0)
    yy = float(y @ y)
    qz = prep.z.shape[1]

    if want_w:
        if homosked:
            def p_cut(which, g):
                scal = {"ee": s_ee, "eb": s_eb, "bb": s_bb}[which]
                return scal * prep.mzz_c[g]

            def p_rho(which):
                scal = {"ee": s_ee, "eb": s_eb, "bb": s_bb}[which]
                return scal * m_rho1

            def p_tot(which):
                scal = {"ee": s_ee, "eb": s_eb, "bb": s_bb}[which]
                return scal * prep.mzz_tot

        else:
            (pee_c, pee_t), (peb_c, peb_t), (pbb_c, pbb_t) = _weighted_zz_prefixes(
                prep, eps, b
            )
            zs = prep.z[:rho_cut]
            rho_sums = {}
            for which, wgt in (("ee", eps * eps), ("eb", eps * b), ("bb", b * b)):
                rho_sums[which] = (zs * wgt[:rho_cut, None]).T @ zs

            _cuts = {"ee": pee_c, "eb": peb_c, "bb": pbb_c}
            _tots = {"ee": pee_t, "eb": peb_t, "bb": pbb_t}

            def p_cut(which, g):
                return _cuts[which][g]

            def p_rho(which):
                return rho_sums[which]

            def p_tot(which):
                return _tots[which]

        m_rho1 = prep.z[:rho_cut].T @ prep.z[:rho_cut]
        m_rho2 = prep.mzz_tot - m_rho1
        m_rho1_inv = _pd_solve(m_rho1, np.eye(qz))
        m_rho2_inv = _pd_solve(m_rho2, np.eye(qz))
        if m_rho1_inv is None or m_rho2_inv is None:
            status[:] = SINGULAR
            return lr, wv, status
        # V_B = A1 D H1rho D' A1' + A2 D H2rho D' A2' with D the eps-selector
        pee_rho = p_rho("ee")
        v_b = a1_mat @ pee_rho @ a1_mat.T + a2_mat @ (p_tot("ee") - pee_rho) @ a2_mat.T

    for g in range(G):
        k = prep.cuts[g]
        if k < prep.n_min or T - k < prep.n_min:
            status[g] = TOO_SMALL
            continue
        c1 = cww_c[g]
        c2 = cww_tot - c1
        s1 = swy_c[g]
        s2 = swy_tot - s1
        th1, th2 = _split_theta(c1, c2, s1, s2)
        if th1 is None:
            status[g] = SINGULAR
            continue
        ssr1 = max(yy - float(th1 @ s1) - float(th2 @ s2), 0.0)
        if want_lr:
            lr[g] = _lr_value(ssr0, ssr1, dof)
        if not want_w:
            continue

        m1g = prep.mzz_c[g]
        if k <= rho_cut:
            r1 = m1g @ m_rho1_inv
            pee_g, peb_g, pbb_g = p_cut("ee", g), p_cut("eb", g), p_cut("bb", g)
            d_eb = p_rho("eb") - peb_g
            d_bb = p_rho("bb") - pbb_g
            e_tt = pee_g + 2 * peb_g + pbb_g
            e_tc = peb_g + pbb_g
            core1 = (
                e_tt
                - e_tc @ r1.T
                - r1 @ e_tc
                + r1 @ pbb_g @ r1.T
                + r1 @ d_bb @ r1.T
            )
            v1 = a1_mat @ core1 @ a1_mat.T
            cov1b = a1_mat @ (pee_g + peb_g - r1 @ (peb_g + d_eb)) @ a1_mat.T
            v12 = cov1b - v1
        else:
            m2g = prep.mzz_tot - m1g
            r2 = m2g @ m_rho2_inv
            d_ee = p_cut("ee", g) - pee_rho
            d_eb = p_cut("eb", g) - p_rho("eb")
            d_bb = p_cut("bb", g) - p_rho("bb")
            pee_2g = p_tot("ee") - p_cut("ee", g)
            peb_2g = p_tot("eb") - p_cut("eb", g)
            pbb_2g = p_tot("bb") - p_cut("bb", g)
            mid = d_ee + d_eb @ r2.T + r2 @ d_eb + r2 @ d_bb @ r2.T
            tail = (r2 - np.eye(qz)) @ pbb_2g @ (r2 - np.eye(qz)).T
            v1 = a1_mat @ pee_rho @ a1_mat.T + a2_mat @ (mid + tail) @ a2_mat.T
            # (D - Dbar2) H2 Dbar2' - (F2 + D) (H1g - H1rho) F2'
            left = (r2 - np.eye(qz)) @ ((peb_2g + pbb_2g) - pbb_2g @ r2.T)
            right = d_eb @ r2.T + r2 @ d_bb @ r2.T
            v12 = a2_mat @ (left - right) @ a2_mat.T
        v2 = v_b - v1 - v12 - v12.T
        wald = _sandwich_wald(c1, c2, 0.5 * (v1 + v1.T), v12, 0.5 * (v2 + v2.T), th1 - th2)
        if wald is None:
            status[g] = SINGULAR
            continue
        wv[g] = wald
    return lr, wv, status
