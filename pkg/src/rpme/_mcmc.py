"""JIT-compiled Markov-chain kernels for the latent-variable sampler.

Layout conventions shared with sampler.py:

* survey mode state:  v[Tt] (+ v_b[Tt] collective), lam[Tt] (static / iu),
  c*[Tt, L], d (+ d_b collective), slack[nslk].  Tt = observed periods,
  plus one extension row for counterfactual queries.
* experiment mode state: one [T, L] block of true quantities (trembling
  hand) or true prices (misperception), each row tied to its observed
  budget by Walras' law and the whole array kept GARP-consistent.

Chains record, per state r: the theta-free moment vector (float32), any
raw features needed by theta-indexed moments, and the log-uniform used by
the exponential-tilt replay.  The tilt itself is a separate O(cl) replay
(`tilt_replay`), so objective evaluations never re-run a chain.

Model codes: 0 static, 1 exponential discounting, 2 income uncertainty,
3 collective.  Base-moment codes mirror moments.py (BASE_*), raw-feature
codes mirror RAW_*.
"""

import numpy as np
from numba import njit, prange

BIG = 1e300
DIR_EPS = 1e-14


# ---------------------------------------------------------------------------
# base-moment evaluation (survey mode: w_p = 0, c* is the error-bearing block)

@njit(cache=True)
def _g_survey(bc_code, bc_aux, z_all, rho, c, e_obs, cst, xi_c, step,
              lam, slack, slack2g, t_obs, n_goods, g_out):
    """Theta-free moments at (c* + step*xi_c, lam, slack)."""
    j = 0
    for k in range(bc_code.shape[0]):
        code = bc_code[k]
        if code == 0:  # budget neutrality: rho_t'(c_t - c*_t)
            for t in range(t_obs):
                acc = 0.0
                for l in range(n_goods):
                    acc += rho[t, l] * (cst[t, l] + step * xi_c[t, l])
                g_out[j] = e_obs[t] - acc
                j += 1
        elif code == 1:  # trembling hand: w_c componentwise
            for t in range(t_obs):
                for l in range(n_goods):
                    g_out[j] = c[t, l] - (cst[t, l] + step * xi_c[t, l])
                    j += 1
        elif code == 2 or code == 3:  # price moments vanish when w_p = 0
            for t in range(t_obs):
                for l in range(n_goods):
                    g_out[j] = 0.0
                    j += 1
        elif code == 4:  # instrument: z_t'w_c_t
            zi = bc_aux[k]
            for t in range(t_obs):
                acc = 0.0
                for l in range(n_goods):
                    acc += z_all[zi, t, l] * (c[t, l] - cst[t, l]
                                              - step * xi_c[t, l])
                g_out[j] = acc
                j += 1
        elif code == 5:  # martingale increments
            for t in range(t_obs - 1):
                g_out[j] = lam[t + 1] - lam[t]
                j += 1
    for m in range(slack2g.shape[0]):
        g_out[slack2g[m]] -= slack[m]
    return j


@njit(cache=True)
def _norm2(g, scale):
    acc = 0.0
    for k in range(g.shape[0]):
        acc += g[k] * g[k]
    return acc / scale


@njit(cache=True)
def _theta_pen(raw_row, th_code, th_a, th_b):
    """||centered theta moments||^2 for the chain weight."""
    acc = 0.0
    for j in range(th_code.shape[0]):
        if th_code[j] == 0:
            val = raw_row[j] - th_a[j]
        elif th_code[j] == 1:
            val = (1.0 if raw_row[j] <= th_a[j] else 0.0) - th_b[j]
        else:
            val = (1.0 if th_a[j] <= raw_row[j] <= th_b[j] else 0.0) - 1.0
        acc += val * val
    return acc


@njit(cache=True)
def _record_raw(raw_kind, raw_aux, cst, d, rho, tt, n_goods, out_row):
    j = 0
    for k in range(raw_kind.shape[0]):
        kind = raw_kind[k]
        if kind == 0:  # discount factor
            out_row[j] = d
            j += 1
        elif kind == 1:  # c*_tau
            tau = raw_aux[k]
            for l in range(n_goods):
                out_row[j] = cst[tau, l]
                j += 1
        elif kind == 2:  # c*_{tau+1} - c*_tau
            tau = raw_aux[k]
            for l in range(n_goods):
                out_row[j] = cst[tau + 1, l] - cst[tau, l]
                j += 1
        elif kind == 3:  # counterfactual consumption (extension row)
            for l in range(n_goods):
                out_row[j] = cst[tt - 1, l]
                j += 1
        elif kind == 4:  # counterfactual expenditure
            acc = 0.0
            for l in range(n_goods):
                acc += rho[tt - 1, l] * cst[tt - 1, l]
            out_row[j] = acc
            j += 1
        elif kind == 5:  # counterfactual budget share of one good
            acc = 0.0
            for l in range(n_goods):
                acc += rho[tt - 1, l] * cst[tt - 1, l]
            g = raw_aux[k]
            out_row[j] = rho[tt - 1, g] * cst[tt - 1, g] / acc if acc > 0 else 0.0
            j += 1


@njit(cache=True)
def _pack_state(v, vb, lam, cst, d, db, slack, tt, n_goods, has_vb, has_lam,
                nslk, out):
    j = 0
    for t in range(tt):
        out[j] = v[t]
        j += 1
    if has_vb:
        for t in range(tt):
            out[j] = vb[t]
            j += 1
    if has_lam:
        for t in range(tt):
            out[j] = lam[t]
            j += 1
    for t in range(tt):
        for l in range(n_goods):
            out[j] = cst[t, l]
            j += 1
    out[j] = d
    j += 1
    out[j] = db
    j += 1
    for m in range(nslk):
        out[j] = slack[m]
        j += 1


@njit(cache=True)
def _unpack_state(state, v, vb, lam, cst, tt, n_goods, has_vb, has_lam, nslk,
                  slack):
    j = 0
    for t in range(tt):
        v[t] = state[j]
        j += 1
    if has_vb:
        for t in range(tt):
            vb[t] = state[j]
            j += 1
    if has_lam:
        for t in range(tt):
            lam[t] = state[j]
            j += 1
    else:
        for t in range(tt):
            lam[t] = 1.0
    for t in range(tt):
        for l in range(n_goods):
            cst[t, l] = state[j]
            j += 1
    d = state[j]
    j += 1
    db = state[j]
    j += 1
    for m in range(nslk):
        slack[m] = state[j]
        j += 1
    return d, db


def state_dim(tt: int, n_goods: int, has_vb: bool, has_lam: bool,
              nslk: int) -> int:
    return tt * (1 + has_vb + has_lam) + tt * n_goods + 2 + nslk


@njit(cache=True)
def _survey_chain_one(rho, c, e_obs, model, d_lo, d_hi, db_lo, db_hi,
                      v_cap, lam_cap, c_lo, c_hi, s_cap, w_scale_loc,
                      eta_code, eta_scale, bc_code, bc_aux, z_all, slack2g,
                      raw_kind, raw_aux, th_code, th_a, th_b,
                      walras_next, qb, state,
                      n_steps, mode, g_rec, raw_rec, logu_rec, state_rec,
                      rec_every, acc_out):
    """Advance one household's survey chain for n_steps states.

    mode 0: sample from eta-tilde, recording moments/raws/log-uniforms.
    mode 1: greedy descent on ||g||^2 (records nothing).

    Theta-indexed components enter the Gaussian weight through their
    closed-form centering (th_code/th_a/th_b over the raw coordinates),
    so the chain concentrates where the full moment vector is small.
    """
    tt = rho.shape[0]
    n_goods = rho.shape[1]
    t_obs = c.shape[0]
    has_vb = model == 3
    has_lam = model == 0 or model == 2
    nslk = slack2g.shape[0]

    v = np.empty(tt)
    vb = np.empty(tt)
    lam = np.empty(tt)
    cst = np.empty((tt, n_goods))
    slack = np.empty(max(nslk, 1))
    d, db = _unpack_state(state, v, vb, lam, cst, tt, n_goods, has_vb,
                          has_lam, nslk, slack)

    xi_v = np.empty(tt)
    xi_vb = np.empty(tt)
    xi_c = np.empty((tt, n_goods))
    cross = np.empty((tt, tt))
    a_mat = np.empty((tt, tt))  # a_mat[t, s] = rho_t'c*_s
    for t in range(tt):
        for s in range(tt):
            acc = 0.0
            for l in range(n_goods):
                acc += rho[t, l] * cst[s, l]
            a_mat[t, s] = acc

    dpow = np.empty(tt)
    dbpow = np.empty(tt)
    for t in range(tt):
        dpow[t] = d ** t
        dbpow[t] = db ** t

    qg = max(qb, 1)
    g_cur = np.zeros(qg)
    g_prop = np.zeros(qg)
    zero_xi = np.zeros((tt, n_goods))
    _g_survey(bc_code, bc_aux, z_all, rho, c, e_obs, cst, zero_xi, 0.0,
              lam, slack, slack2g, t_obs, n_goods, g_cur)
    nrm_cur = _norm2(g_cur, eta_scale)

    qr_w = th_code.shape[0]
    use_pen = qr_w > 0 and (eta_code == 1 or mode == 1)
    raw_scr = np.zeros(max(qr_w, 1))
    cprop = np.empty((tt, n_goods))
    pen_cur = 0.0
    pen_d = False
    if use_pen:
        _record_raw(raw_kind, raw_aux, cst, d, rho, tt, n_goods, raw_scr)
        pen_cur = _theta_pen(raw_scr, th_code, th_a, th_b) / eta_scale
        for k in range(raw_kind.shape[0]):
            if raw_kind[k] == 0:
                pen_d = True

    rho_next_nrm2 = 0.0
    if walras_next == 1:
        for l in range(n_goods):
            rho_next_nrm2 += rho[tt - 1, l] * rho[tt - 1, l]

    n_prop = 0
    n_acc = 0
    rec_idx = 0
    for r in range(n_steps):
        # ---------------- (v, c*) hit-and-run move --------------------
        use_local = (r & 1) == 0 and eta_code == 1 and mode == 0
        # Even rounds freeze the utility coordinates: no moment reads v,
        # and a v-component sized to the v box would throttle every chord
        # to a sliver of the consumption slack.  Odd rounds sweep the
        # full box jointly; the Gibbs pass below does the real v mixing.
        v_scale = 0.0 if (r & 1) == 0 else v_cap / 8.0
        for t in range(tt):
            xi_v[t] = np.random.normal() * v_scale
            if has_vb:
                xi_vb[t] = np.random.normal() * v_scale
        for t in range(tt):
            for l in range(n_goods):
                sc = w_scale_loc[t, l] if use_local else \
                    (c_hi[t, l] - c_lo[t, l]) / 8.0
                xi_c[t, l] = np.random.normal() * sc
        if walras_next == 1 and rho_next_nrm2 > 0:
            acc = 0.0
            for l in range(n_goods):
                acc += rho[tt - 1, l] * xi_c[tt - 1, l]
            coef = acc / rho_next_nrm2
            for l in range(n_goods):
                xi_c[tt - 1, l] -= coef * rho[tt - 1, l]

        for t in range(tt):
            for s in range(tt):
                acc = 0.0
                for l in range(n_goods):
                    acc += rho[t, l] * xi_c[s, l]
                cross[t, s] = acc

        alo = -BIG
        ahi = BIG
        for t in range(tt):  # v box [0, v_cap]
            if xi_v[t] > DIR_EPS:
                alo = max(alo, (0.0 - v[t]) / xi_v[t])
                ahi = min(ahi, (v_cap - v[t]) / xi_v[t])
            elif xi_v[t] < -DIR_EPS:
                alo = max(alo, (v_cap - v[t]) / xi_v[t])
                ahi = min(ahi, (0.0 - v[t]) / xi_v[t])
            if has_vb:
                if xi_vb[t] > DIR_EPS:
                    alo = max(alo, (0.0 - vb[t]) / xi_vb[t])
                    ahi = min(ahi, (v_cap - vb[t]) / xi_vb[t])
                elif xi_vb[t] < -DIR_EPS:
                    alo = max(alo, (v_cap - vb[t]) / xi_vb[t])
                    ahi = min(ahi, (0.0 - vb[t]) / xi_vb[t])
        for t in range(tt):  # c* box
            for l in range(n_goods):
                x = xi_c[t, l]
                if x > DIR_EPS:
                    alo = max(alo, (c_lo[t, l] - cst[t, l]) / x)
                    ahi = min(ahi, (c_hi[t, l] - cst[t, l]) / x)
                elif x < -DIR_EPS:
                    alo = max(alo, (c_hi[t, l] - cst[t, l]) / x)
                    ahi = min(ahi, (c_lo[t, l] - cst[t, l]) / x)
        for t in range(tt):  # Afriat pairs
            if model == 3:
                wa = dpow[t]
                wb = dbpow[t]
                for s in range(tt):
                    if s == t:
                        continue
                    b = a_mat[t, t] - a_mat[t, s]
                    f = wa * (v[t] - v[s]) + wb * (vb[t] - vb[s]) - b
                    grad = (wa * (xi_v[t] - xi_v[s]) + wb * (xi_vb[t] - xi_vb[s])
                            - (cross[t, t] - cross[t, s]))
                    if grad > DIR_EPS:
                        alo = max(alo, -f / grad)
                    elif grad < -DIR_EPS:
                        ahi = min(ahi, -f / grad)
            else:
                coef = lam[t] / dpow[t] if model != 0 else lam[t]
                for s in range(tt):
                    if s == t:
                        continue
                    b = a_mat[t, t] - a_mat[t, s]
                    f = v[t] - v[s] - coef * b
                    grad = (xi_v[t] - xi_v[s]
                            - coef * (cross[t, t] - cross[t, s]))
                    if grad > DIR_EPS:
                        alo = max(alo, -f / grad)
                    elif grad < -DIR_EPS:
                        ahi = min(ahi, -f / grad)
        if alo > 0.0:
            alo = 0.0
        if ahi < 0.0:
            ahi = 0.0
        step = alo + np.random.random() * (ahi - alo)

        _g_survey(bc_code, bc_aux, z_all, rho, c, e_obs, cst, xi_c, step,
                  lam, slack, slack2g, t_obs, n_goods, g_prop)
        nrm_prop = _norm2(g_prop, eta_scale)
        pen_prop = pen_cur
        if use_pen:
            for t in range(tt):
                for l in range(n_goods):
                    cprop[t, l] = cst[t, l] + step * xi_c[t, l]
            _record_raw(raw_kind, raw_aux, cprop, d, rho, tt, n_goods,
                        raw_scr)
            pen_prop = _theta_pen(raw_scr, th_code, th_a, th_b) / eta_scale
        if mode == 1:
            take = nrm_prop + pen_prop < nrm_cur + pen_cur
        elif eta_code == 1:
            take = np.log(np.random.random()) < \
                (nrm_cur + pen_cur) - (nrm_prop + pen_prop)
        else:
            take = True
        n_prop += 1
        if take:
            n_acc += 1
            for t in range(tt):
                v[t] += step * xi_v[t]
                if has_vb:
                    vb[t] += step * xi_vb[t]
                for l in range(n_goods):
                    cst[t, l] += step * xi_c[t, l]
                for s in range(tt):
                    a_mat[t, s] += step * cross[t, s]
            for k in range(qg):
                g_cur[k] = g_prop[k]
            nrm_cur = nrm_prop
            pen_cur = pen_prop

        # ---------------- utility Gibbs sweep --------------------------
        # The weight never involves v, so conditional on everything else
        # each v_t is uniform on a closed-form interval.  Resampling it
        # exactly is free mixing and reopens the Afriat slacks that the
        # consumption chords run up against.
        for t in range(tt):
            vlo = 0.0
            vhi = v_cap
            if model == 3:
                for s in range(tt):
                    if s == t:
                        continue
                    gap = dbpow[t] * (vb[t] - vb[s])
                    vlo = max(vlo, v[s]
                              + (a_mat[t, t] - a_mat[t, s] - gap) / dpow[t])
                    gap = dbpow[s] * (vb[s] - vb[t])
                    vhi = min(vhi, v[s]
                              + (gap - a_mat[s, s] + a_mat[s, t]) / dpow[s])
            else:
                coef_t = lam[t] if model == 0 else lam[t] / dpow[t]
                for s in range(tt):
                    if s == t:
                        continue
                    coef_s = lam[s] if model == 0 else lam[s] / dpow[s]
                    vlo = max(vlo,
                              v[s] + coef_t * (a_mat[t, t] - a_mat[t, s]))
                    vhi = min(vhi,
                              v[s] - coef_s * (a_mat[s, s] - a_mat[s, t]))
            if vlo > v[t]:
                vlo = v[t]
            if vhi < v[t]:
                vhi = v[t]
            v[t] = vlo + np.random.random() * (vhi - vlo)
        if has_vb:
            for t in range(tt):
                vlo = 0.0
                vhi = v_cap
                for s in range(tt):
                    if s == t:
                        continue
                    gap = dpow[t] * (v[t] - v[s])
                    vlo = max(vlo, vb[s]
                              + (a_mat[t, t] - a_mat[t, s] - gap) / dbpow[t])
                    gap = dpow[s] * (v[s] - v[t])
                    vhi = min(vhi, vb[s]
                              + (gap - a_mat[s, s] + a_mat[s, t]) / dbpow[s])
                if vlo > vb[t]:
                    vlo = vb[t]
                if vhi < vb[t]:
                    vhi = vb[t]
                vb[t] = vlo + np.random.random() * (vhi - vlo)

        # ---------------- lambda Gibbs moves --------------------------
        if has_lam:
            t0 = 1 if model == 2 else 0  # iu pins lam_0 = 1
            for t in range(t0, tt):
                llo = 1e-8
                lhi = lam_cap
                for s in range(tt):
                    if s == t:
                        continue
                    kcoef = (a_mat[t, t] - a_mat[t, s])
                    if model == 2:
                        kcoef /= dpow[t]
                    rgap = v[t] - v[s]
                    if kcoef > DIR_EPS:
                        lhi = min(lhi, rgap / kcoef)
                    elif kcoef < -DIR_EPS:
                        llo = max(llo, rgap / kcoef)
                if llo > lam[t]:
                    llo = lam[t]
                if lhi < lam[t]:
                    lhi = lam[t]
                lam_new = llo + np.random.random() * (lhi - llo)
                if model == 2:  # weight sees the martingale increments
                    old = lam[t]
                    lam[t] = lam_new
                    _g_survey(bc_code, bc_aux, z_all, rho, c, e_obs, cst,
                              zero_xi, 0.0, lam, slack, slack2g, t_obs,
                              n_goods, g_prop)
                    nrm_prop = _norm2(g_prop, eta_scale)
                    if mode == 1:
                        take = nrm_prop < nrm_cur
                    else:
                        take = np.log(np.random.random()) < nrm_cur - nrm_prop
                    if take:
                        for k in range(qg):
                            g_cur[k] = g_prop[k]
                        nrm_cur = nrm_prop
                    else:
                        lam[t] = old
                else:
                    lam[t] = lam_new

        # ---------------- discount Gibbs moves ------------------------
        if model == 1 or model == 2:
            dlo_c = d_lo
            dhi_c = d_hi
            for t in range(1, tt):
                for s in range(tt):
                    if s == t:
                        continue
                    rgap = v[t] - v[s]
                    qv = lam[t] * (a_mat[t, t] - a_mat[t, s])
                    if rgap > DIR_EPS and qv > 0.0:
                        bound = (qv / rgap) ** (1.0 / t)
                        if bound > dlo_c:
                            dlo_c = bound
                    elif rgap < -DIR_EPS and qv < 0.0:
                        bound = (qv / rgap) ** (1.0 / t)
                        if bound < dhi_c:
                            dhi_c = bound
            if dlo_c > d:
                dlo_c = d
            if dhi_c < d:
                dhi_c = d
            d_new = dlo_c + np.random.random() * (dhi_c - dlo_c)
            take_d = True
            if pen_d:  # weight reads d: uniform draw becomes an MH proposal
                _record_raw(raw_kind, raw_aux, cst, d_new, rho, tt, n_goods,
                            raw_scr)
                pen_prop = _theta_pen(raw_scr, th_code, th_a, th_b) / eta_scale
                if mode == 1:
                    take_d = pen_prop <= pen_cur
                else:
                    take_d = np.log(np.random.random()) < pen_cur - pen_prop
                if take_d:
                    pen_cur = pen_prop
            if take_d:
                d = d_new
                for t in range(tt):
                    dpow[t] = d ** t
        elif model == 3:
            for member in range(2):
                dlo_c = d_lo if member == 0 else db_lo
                dhi_c = d_hi if member == 0 else db_hi
                cur = d if member == 0 else db
                for t in range(1, tt):
                    for s in range(tt):
                        if s == t:
                            continue
                        if member == 0:
                            rgap = v[t] - v[s]
                            qv = (a_mat[t, t] - a_mat[t, s]
                                  - dbpow[t] * (vb[t] - vb[s]))
                        else:
                            rgap = vb[t] - vb[s]
                            qv = (a_mat[t, t] - a_mat[t, s]
                                  - dpow[t] * (v[t] - v[s]))
                        if rgap > DIR_EPS and qv > 0.0:
                            bound = (qv / rgap) ** (1.0 / t)
                            if bound > dlo_c:
                                dlo_c = bound
                        elif rgap < -DIR_EPS and qv < 0.0:
                            bound = (qv / rgap) ** (1.0 / t)
                            if bound < dhi_c:
                                dhi_c = bound
                if dlo_c > cur:
                    dlo_c = cur
                if dhi_c < cur:
                    dhi_c = cur
                cur = dlo_c + np.random.random() * (dhi_c - dlo_c)
                if member == 0:
                    take_d = True
                    if pen_d:  # raw discount features track member A
                        _record_raw(raw_kind, raw_aux, cst, cur, rho, tt,
                                    n_goods, raw_scr)
                        pen_prop = _theta_pen(raw_scr, th_code, th_a,
                                              th_b) / eta_scale
                        if mode == 1:
                            take_d = pen_prop <= pen_cur
                        else:
                            take_d = np.log(np.random.random()) < \
                                pen_cur - pen_prop
                        if take_d:
                            pen_cur = pen_prop
                    if take_d:
                        d = cur
                        for t in range(tt):
                            dpow[t] = d ** t
                else:
                    db = cur
                    for t in range(tt):
                        dbpow[t] = db ** t

        # ---------------- slack moves ---------------------------------
        for m in range(nslk):
            j = slack2g[m]
            inner = g_cur[j] + slack[m]
            if mode == 1:
                s_new = min(max(inner, 0.0), s_cap)
            else:
                s_new = np.random.random() * s_cap
            g_new = inner - s_new
            if eta_code == 1 and mode == 0:
                delta = (g_new * g_new - g_cur[j] * g_cur[j]) / eta_scale
                if np.log(np.random.random()) < -delta:
                    slack[m] = s_new
                    nrm_cur += delta
                    g_cur[j] = g_new
            else:
                if mode == 1 and g_new * g_new > g_cur[j] * g_cur[j]:
                    continue
                nrm_cur += (g_new * g_new - g_cur[j] * g_cur[j]) / eta_scale
                slack[m] = s_new
                g_cur[j] = g_new

        # ---------------- record --------------------------------------
        if mode == 0:
            for k in range(qb):
                g_rec[r, k] = g_cur[k]
            if raw_rec.shape[1] > 0:
                _record_raw(raw_kind, raw_aux, cst, d, rho, tt, n_goods,
                            raw_rec[r])
            logu_rec[r] = np.log(np.random.random())
            if rec_every > 0 and r % rec_every == 0 and \
                    rec_idx < state_rec.shape[0]:
                _pack_state(v, vb, lam, cst, d, db, slack, tt, n_goods,
                            has_vb, has_lam, nslk, state_rec[rec_idx])
                rec_idx += 1

    _pack_state(v, vb, lam, cst, d, db, slack, tt, n_goods, has_vb, has_lam,
                nslk, state)
    acc_out[0] = n_prop
    acc_out[1] = n_acc
    return rec_idx


@njit(cache=True, parallel=True)
def survey_streams(rho_all, c_all, e_obs_all, keys, states, model,
                   d_lo, d_hi, db_lo, db_hi, v_caps, lam_cap,
                   c_lo_all, c_hi_all, s_cap, w_scale_all,
                   eta_code, eta_scale, bc_code, bc_aux, z_all, slack2g,
                   raw_kind, raw_aux, th_code, th_a, th_b,
                   walras_next, n_steps,
                   g_out, raw_out, logu_out, state_out, rec_every, acc_out):
    """Generate eta-tilde streams for all households (parallel over rows)."""
    n = rho_all.shape[0]
    qb = g_out.shape[2]
    for i in prange(n):
        np.random.seed(keys[i])
        _survey_chain_one(rho_all[i], c_all[i], e_obs_all[i], model,
                          d_lo, d_hi, db_lo, db_hi, v_caps[i], lam_cap,
                          c_lo_all[i], c_hi_all[i], s_cap, w_scale_all[i],
                          eta_code, eta_scale, bc_code, bc_aux, z_all,
                          slack2g, raw_kind, raw_aux, th_code, th_a, th_b,
                          walras_next, qb,
                          states[i], n_steps, 0, g_out[i], raw_out[i],
                          logu_out[i], state_out[i], rec_every, acc_out[i])


@njit(cache=True, parallel=True)
def survey_descent(rho_all, c_all, e_obs_all, keys, states, model,
                   d_lo, d_hi, db_lo, db_hi, v_caps, lam_cap,
                   c_lo_all, c_hi_all, s_cap, w_scale_all,
                   eta_scale, bc_code, bc_aux, z_all, slack2g,
                   raw_kind, raw_aux, th_code, th_a, th_b, qb,
                   walras_next, n_steps):
    """Greedy ||g||^2 descent from the packed states, in place."""
    n = rho_all.shape[0]
    g_dummy = np.zeros((n, 0, 1), dtype=np.float32)
    raw_dummy = np.zeros((n, 0, 0), dtype=np.float32)
    logu_dummy = np.zeros((n, 0), dtype=np.float32)
    state_dummy = np.zeros((n, 0, 1))
    acc = np.zeros((n, 2), dtype=np.int64)
    for i in prange(n):
        np.random.seed(keys[i])
        _survey_chain_one(rho_all[i], c_all[i], e_obs_all[i], model,
                          d_lo, d_hi, db_lo, db_hi, v_caps[i], lam_cap,
                          c_lo_all[i], c_hi_all[i], s_cap, w_scale_all[i],
                          1, eta_scale, bc_code, bc_aux, z_all, slack2g,
                          raw_kind, raw_aux, th_code, th_a, th_b,
                          walras_next, qb, states[i],
                          n_steps, 1, g_dummy[i], raw_dummy[i],
                          logu_dummy[i], state_dummy[i], 0, acc[i])


# ---------------------------------------------------------------------------
# experiment mode: true quantities/prices uniform on budgets, GARP-consistent

@njit(cache=True)
def _garp_ok(m, weak, reach, eps):
    tt = m.shape[0]
    for t in range(tt):
        own = m[t, t]
        for s in range(tt):
            weak[t, s] = own >= m[t, s]
        weak[t, t] = True
    for t in range(tt):
        for s in range(tt):
            reach[t, s] = weak[t, s]
    for k in range(tt):
        for t in range(tt):
            if reach[t, k]:
                for s in range(tt):
                    if reach[k, s]:
                        reach[t, s] = True
    for t in range(tt):
        own = m[t, t]
        for s in range(tt):
            if s != t and reach[t, s]:
                # strict s -> t closes a violating cycle
                if m[s, s] - m[s, t] > eps * m[s, s]:
                    return False
    return True


@njit(cache=True)
def _g_experiment(bc_code, bc_aux, z_all, rho, c, y, vary_price, t_obs,
                  n_goods, g_out):
    """Theta-free moments in experiment mode.

    vary_price == 0: y = c* (w_p = 0);  vary_price == 1: y = rho* (w_c = 0).
    """
    j = 0
    for k in range(bc_code.shape[0]):
        code = bc_code[k]
        if code == 0:  # budget neutrality
            for t in range(t_obs):
                acc = 0.0
                if vary_price == 0:
                    for l in range(n_goods):
                        acc += rho[t, l] * (c[t, l] - y[t, l])
                g_out[j] = acc
                j += 1
        elif code == 1:  # trembling hand
            for t in range(t_obs):
                for l in range(n_goods):
                    g_out[j] = (c[t, l] - y[t, l]) if vary_price == 0 else 0.0
                    j += 1
        elif code == 2:  # price misperception
            for t in range(t_obs):
                for l in range(n_goods):
                    g_out[j] = (rho[t, l] - y[t, l]) if vary_price == 1 else 0.0
                    j += 1
        elif code == 3:  # log price centering
            for t in range(t_obs):
                for l in range(n_goods):
                    if vary_price == 1:
                        g_out[j] = np.log(rho[t, l]) - np.log(y[t, l])
                    else:
                        g_out[j] = 0.0
                    j += 1
        elif code == 4:  # instrument
            zi = bc_aux[k]
            for t in range(t_obs):
                acc = 0.0
                if vary_price == 0:
                    for l in range(n_goods):
                        acc += z_all[zi, t, l] * (c[t, l] - y[t, l])
                g_out[j] = acc
                j += 1
        elif code == 5:
            for t in range(t_obs - 1):
                g_out[j] = 0.0
                j += 1
    return j


@njit(cache=True)
def _experiment_chain_one(rho, c, vary_price, eta_code, eta_scale,
                          bc_code, bc_aux, z_all, y, n_steps,
                          g_rec, logu_rec, state_rec, rec_every, acc_out):
    t_obs = rho.shape[0]
    n_goods = rho.shape[1]
    qb = g_rec.shape[1]

    e_obs = np.empty(t_obs)
    for t in range(t_obs):
        acc = 0.0
        for l in range(n_goods):
            acc += rho[t, l] * c[t, l]
        e_obs[t] = acc

    # m[u, s] = price_u' bundle_s with the error-bearing side substituted
    m = np.empty((t_obs, t_obs))
    for u in range(t_obs):
        for s in range(t_obs):
            acc = 0.0
            for l in range(n_goods):
                pu = y[u, l] if vary_price == 1 else rho[u, l]
                cs = c[s, l] if vary_price == 1 else y[s, l]
                acc += pu * cs
            m[u, s] = acc

    weak = np.zeros((t_obs, t_obs), dtype=np.bool_)
    reach = np.zeros((t_obs, t_obs), dtype=np.bool_)
    buf = np.empty(t_obs)
    prop = np.empty(n_goods)
    g_cur = np.zeros(max(qb, 1))
    g_prop = np.zeros(max(qb, 1))
    _g_experiment(bc_code, bc_aux, z_all, rho, c, y, vary_price, t_obs,
                  n_goods, g_cur)
    nrm_cur = _norm2(g_cur, eta_scale)

    n_acc = 0
    rec_idx = 0
    for r in range(n_steps):
        t_move = r % t_obs
        total = 0.0
        for l in range(n_goods):
            prop[l] = -np.log(np.random.random())
            total += prop[l]
        # uniform draw on the Walras simplex of period t_move
        if vary_price == 1:
            for l in range(n_goods):
                prop[l] = prop[l] / total * e_obs[t_move] / c[t_move, l]
            for s in range(t_obs):  # new row t_move of m
                acc = 0.0
                for l in range(n_goods):
                    acc += prop[l] * c[s, l]
                buf[s] = acc
            for s in range(t_obs):
                tmp = m[t_move, s]
                m[t_move, s] = buf[s]
                buf[s] = tmp
        else:
            for l in range(n_goods):
                prop[l] = prop[l] / total * e_obs[t_move] / rho[t_move, l]
            for u in range(t_obs):  # new column t_move of m
                acc = 0.0
                for l in range(n_goods):
                    acc += rho[u, l] * prop[l]
                buf[u] = acc
            for u in range(t_obs):
                tmp = m[u, t_move]
                m[u, t_move] = buf[u]
                buf[u] = tmp

        ok = _garp_ok(m, weak, reach, 1e-12)
        if ok and eta_code == 1:
            old_row = np.empty(n_goods)
            for l in range(n_goods):
                old_row[l] = y[t_move, l]
                y[t_move, l] = prop[l]
            _g_experiment(bc_code, bc_aux, z_all, rho, c, y, vary_price,
                          t_obs, n_goods, g_prop)
            nrm_prop = _norm2(g_prop, eta_scale)
            if np.log(np.random.random()) < nrm_cur - nrm_prop:
                nrm_cur = nrm_prop
                for k in range(qb):
                    g_cur[k] = g_prop[k]
                n_acc += 1
            else:
                ok = False
                for l in range(n_goods):
                    y[t_move, l] = old_row[l]
        elif ok:
            for l in range(n_goods):
                y[t_move, l] = prop[l]
            _g_experiment(bc_code, bc_aux, z_all, rho, c, y, vary_price,
                          t_obs, n_goods, g_cur)
            n_acc += 1
        if not ok:  # restore the substituted row/column
            if vary_price == 1:
                for s in range(t_obs):
                    m[t_move, s] = buf[s]
            else:
                for u in range(t_obs):
                    m[u, t_move] = buf[u]

        for k in range(qb):
            g_rec[r, k] = g_cur[k]
        logu_rec[r] = np.log(np.random.random())
        if rec_every > 0 and r % rec_every == 0 and rec_idx < state_rec.shape[0]:
            for t in range(t_obs):
                for l in range(n_goods):
                    state_rec[rec_idx, t * n_goods + l] = y[t, l]
            rec_idx += 1
    acc_out[0] = n_steps
    acc_out[1] = n_acc
    return rec_idx


@njit(cache=True, parallel=True)
def experiment_streams(rho_all, c_all, keys, y_all, vary_price, eta_code,
                       eta_scale, bc_code, bc_aux, z_all, n_steps,
                       g_out, logu_out, state_out, rec_every, acc_out):
    n = rho_all.shape[0]
    for i in prange(n):
        np.random.seed(keys[i])
        _experiment_chain_one(rho_all[i], c_all[i], vary_price, eta_code,
                              eta_scale, bc_code, bc_aux, z_all, y_all[i],
                              n_steps, g_out[i], logu_out[i], state_out[i],
                              rec_every, acc_out[i])


# ---------------------------------------------------------------------------
# exponential-tilt replay (the gamma-dependent part of the integrator)

@njit(cache=True, parallel=True)
def tilt_replay(g_base, g_theta, logu, gamma_base, gamma_theta, burn, thin,
                h_out):
    """Independence-MH replay of the exponential tilt over recorded streams.

    h_out[i] = average of the stacked moment vector over the post-burn
    tilted chain of household i.
    """
    n, cl, qb = g_base.shape
    qt = g_theta.shape[2]
    q = qb + qt
    for i in prange(n):
        acc = np.zeros(q)
        cur = 0
        s_cur = 0.0
        for k in range(qb):
            s_cur += g_base[i, 0, k] * gamma_base[k]
        for k in range(qt):
            s_cur += g_theta[i, 0, k] * gamma_theta[k]
        cnt = 0
        for r in range(cl):
            if r > 0:
                s = 0.0
                for k in range(qb):
                    s += g_base[i, r, k] * gamma_base[k]
                for k in range(qt):
                    s += g_theta[i, r, k] * gamma_theta[k]
                if s - s_cur > logu[i, r]:
                    cur = r
                    s_cur = s
            if r >= burn and (r - burn) % thin == 0:
                for k in range(qb):
                    acc[k] += g_base[i, cur, k]
                for k in range(qt):
                    acc[qb + k] += g_theta[i, cur, k]
                cnt += 1
        for k in range(q):
            h_out[i, k] = acc[k] / cnt


# ---------------------------------------------------------------------------
# difference-constraint feasibility (initial-point helper)

@njit(cache=True)
def potentials_feasible(b, tol):
    """Feasibility of v_t - v_s >= b[t, s] plus witness potentials.

    Bellman-Ford on the implied constraint graph; returns (feasible, v)
    with v shifted to min 1 when feasible.
    """
    tt = b.shape[0]
    dist = np.zeros(tt)
    changed = True
    for _ in range(tt):
        if not changed:
            break
        changed = False
        for t in range(tt):
            for s in range(tt):
                if s != t:
                    nd = dist[t] - b[t, s]
                    if nd < dist[s] - tol:
                        dist[s] = nd
                        changed = True
    if changed:  # verification sweep
        changed = False
        for t in range(tt):
            for s in range(tt):
                if s != t and dist[t] - b[t, s] < dist[s] - tol:
                    changed = True
    v = dist - dist.min() + 1.0
    return (not changed), v
