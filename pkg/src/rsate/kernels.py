"""Hot numeric kernels for the selective-borrowing pipeline.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version.  The public names at the bottom of the module
dispatch on :data:`rsate._accel.USE_NUMBA`; both paths consume the same
pre-drawn random indices, so they agree up to floating-point rounding.

Array conventions shared by all kernels:

``Z``
    ``n x P`` shared-covariate design, intercept column first.
``V``
    ``n x Q`` outcome design for the target-only model (intercept, X, U).
    Rows outside the target region are ignored; fill them with zeros.
``R``
    boolean target-region indicator.
``A``
    int64 treatment indicator.
``g_t`` / ``g_a``
    ``P(A=1 | X)`` under the target and the auxiliary randomisation designs,
    evaluated on every row.
"""

from __future__ import annotations

import numpy as np

from rsate._accel import USE_NUMBA, njit

_PIVOT_TOL = 1e-12
_ETA_CAP = 30.0


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit
def _chol_solve_nb(G, b):
    p = G.shape[0]
    L = np.zeros((p, p))
    scale = 0.0
    for j in range(p):
        if G[j, j] > scale:
            scale = G[j, j]
    x = np.zeros(p)
    if scale <= 0.0:
        return x, False
    for j in range(p):
        s = G[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= _PIVOT_TOL * scale:
            return x, False
        L[j, j] = np.sqrt(s)
        for i in range(j + 1, p):
            t = G[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
    z = np.zeros(p)
    for i in range(p):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * z[k]
        z[i] = t / L[i, i]
    for i in range(p - 1, -1, -1):
        t = z[i]
        for k in range(i + 1, p):
            t -= L[k, i] * x[k]
        x[i] = t / L[i, i]
    return x, True


@njit
def _ols_masked_nb(Z, y, mask):
    n, p = Z.shape
    G = np.zeros((p, p))
    b = np.zeros(p)
    rows = np.flatnonzero(mask)
    cnt = rows.shape[0]
    for i in rows:
        for j in range(p):
            zj = Z[i, j]
            b[j] += zj * y[i]
            for k in range(j + 1):
                G[j, k] += zj * Z[i, k]
    for j in range(p):
        for k in range(j + 1, p):
            G[j, k] = G[k, j]
    beta, ok = _chol_solve_nb(G, b)
    if ok:
        return beta
    sub = np.empty((cnt, p))
    ys = np.empty(cnt)
    for r in range(cnt):
        for j in range(p):
            sub[r, j] = Z[rows[r], j]
        ys[r] = y[rows[r]]
    return np.linalg.pinv(sub) @ ys


@njit
def _logistic_masked_nb(Z, label, mask, max_iter, tol, init):
    n, p = Z.shape
    beta = init.copy()
    ll_old = -np.inf
    converged = False
    it = 0
    rows = np.flatnonzero(mask)
    for it in range(1, max_iter + 1):
        G = np.zeros((p, p))
        g = np.zeros(p)
        ll = 0.0
        for i in rows:
            eta = 0.0
            for j in range(p):
                eta += Z[i, j] * beta[j]
            if eta > _ETA_CAP:
                eta = _ETA_CAP
            elif eta < -_ETA_CAP:
                eta = -_ETA_CAP
            # one exponential serves both the mean and the log-likelihood
            if eta > 0:
                ex = np.exp(-eta)
                mu = 1.0 / (1.0 + ex)
                ll += label[i] * eta - eta - np.log1p(ex)
            else:
                ex = np.exp(eta)
                mu = ex / (1.0 + ex)
                ll += label[i] * eta - np.log1p(ex)
            w = mu * (1.0 - mu)
            resid = label[i] - mu
            for j in range(p):
                zj = Z[i, j]
                g[j] += zj * resid
                for k in range(j + 1):
                    G[j, k] += w * zj * Z[i, k]
        for j in range(p):
            for k in range(j + 1, p):
                G[j, k] = G[k, j]
        if abs(ll - ll_old) < tol:
            converged = True
            break
        ll_old = ll
        step, ok = _chol_solve_nb(G, g)
        if not ok:
            step = np.linalg.pinv(G) @ g
        big = 0.0
        for j in range(p):
            beta[j] += step[j]
            if abs(step[j]) > big:
                big = abs(step[j])
        if big < tol:
            converged = True
            break
    return beta, converged, it


@njit
def _sigmoid_clip_nb(eta, clip):
    if eta > _ETA_CAP:
        eta = _ETA_CAP
    elif eta < -_ETA_CAP:
        eta = -_ETA_CAP
    v = 1.0 / (1.0 + np.exp(-eta))
    if v < clip:
        return clip
    if v > 1.0 - clip:
        return 1.0 - clip
    return v


@njit
def _conformal_nb(Z, Y, calib, fold, K, aux):
    m = calib.shape[0]
    na = aux.shape[0]
    p = Z.shape[1]
    s = np.empty(m)
    aux_s = np.empty((na, K))
    low = np.zeros(K, dtype=np.bool_)
    n = Z.shape[0]
    for k in range(K):
        mask = np.zeros(n, dtype=np.bool_)
        cnt = 0
        for t in range(m):
            if fold[t] != k:
                mask[calib[t]] = True
                cnt += 1
        beta = np.zeros(p)
        if cnt >= p:
            beta = _ols_masked_nb(Z, Y, mask)
        else:
            low[k] = True
            tot = 0.0
            for t in range(m):
                if fold[t] != k:
                    tot += Y[calib[t]]
            beta[0] = tot / max(cnt, 1)
        for t in range(m):
            if fold[t] == k:
                i = calib[t]
                pred = 0.0
                for j in range(p):
                    pred += Z[i, j] * beta[j]
                s[t] = abs(Y[i] - pred)
        for u in range(na):
            jrow = aux[u]
            pred = 0.0
            for j in range(p):
                pred += Z[jrow, j] * beta[j]
            aux_s[u, k] = abs(Y[jrow] - pred)
    pv = np.empty(na)
    for u in range(na):
        c = 0
        for t in range(m):
            if s[t] >= aux_s[u, fold[t]]:
                c += 1
        pv[u] = (c + 1.0) / (m + 1.0)
    return pv, s, aux_s, low


@njit
def _arm_theta_grid_nb(Z, V, R, A, Y, pi, gat, gaa, pv, arm, grid, use_u,
                       clip, max_iter, tol):
    n, P = Z.shape
    G = grid.shape[0]
    n_r = 0
    mask_nb = np.zeros(n, dtype=np.bool_)
    aux_arm = np.zeros(n, dtype=np.bool_)
    n_aux_arm = 0
    for i in range(n):
        if R[i]:
            n_r += 1
            if A[i] == arm:
                mask_nb[i] = True
        elif A[i] == arm:
            aux_arm[i] = True
            n_aux_arm += 1
    D = V if use_u else Z
    beta_nb = _ols_masked_nb(D, Y, mask_nb)
    mu_nb = np.zeros(n)
    v_nb = 0.0
    m_nb = 0
    theta_nb = 0.0
    for i in range(n):
        if R[i]:
            pred = 0.0
            for j in range(D.shape[1]):
                pred += D[i, j] * beta_nb[j]
            mu_nb[i] = pred
            theta_nb += pred
            if mask_nb[i]:
                theta_nb += (Y[i] - pred) / gat[i]
                v_nb += (Y[i] - pred) ** 2
                m_nb += 1
    theta_nb /= n_r
    v_nb /= m_nb

    out = np.empty(G)
    beta_q = np.zeros(P)
    for gi in range(G):
        gam = grid[gi]
        if gam >= 1.0:
            out[gi] = theta_nb
            continue
        sel = np.zeros(n, dtype=np.bool_)
        pooled = mask_nb.copy()
        n_sel = 0
        for i in range(n):
            if aux_arm[i] and pv[i] >= gam:
                sel[i] = True
                pooled[i] = True
                n_sel += 1
        if n_sel == 0:
            out[gi] = theta_nb
            continue
        beta_fb = _ols_masked_nb(Z, Y, pooled)
        mu_fb = np.zeros(n)
        v_fb = 0.0
        m_fb = 0
        for i in range(n):
            if R[i] or pooled[i]:
                pred = 0.0
                for j in range(P):
                    pred += Z[i, j] * beta_fb[j]
                mu_fb[i] = pred
                if pooled[i]:
                    v_fb += (Y[i] - pred) ** 2
                    m_fb += 1
        v_fb /= m_fb
        if use_u:
            tot = v_nb + v_fb
            if tot > 0.0:
                w_nb = v_fb / tot
            else:
                w_nb = 0.5
        else:
            w_nb = 0.0
        w_fb = 1.0 - w_nb
        all_sel = n_sel == n_aux_arm
        if not all_sel:
            # selected sets shrink along the grid: warm-start from the last fit
            beta_q, _c, _it = _logistic_masked_nb(Z, sel.astype(np.float64),
                                                  aux_arm, max_iter, tol, beta_q)
        acc = 0.0
        for i in range(n):
            yhat = mu_fb[i]
            if R[i]:
                yhat = w_nb * mu_nb[i] + w_fb * mu_fb[i]
                acc += yhat
            if pooled[i]:
                if all_sel:
                    q = 1.0
                else:
                    eta = 0.0
                    for j in range(P):
                        eta += Z[i, j] * beta_q[j]
                    q = _sigmoid_clip_nb(eta, clip)
                e_hat = pi[i] * gat[i] + (1.0 - pi[i]) * gaa[i] * q
                acc += pi[i] / e_hat * (Y[i] - yhat)
        out[gi] = acc / n_r
    return out, theta_nb


@njit
def _resample_thetas_nb(Z, V, R, A, Y, g_t, g_a, rows, folds0, folds1, K0, K1,
                        grid, use_u, clip, max_iter, tol):
    m = rows.shape[0]
    Zl = np.empty((m, Z.shape[1]))
    Vl = np.empty((m, V.shape[1]))
    Rl = np.empty(m, dtype=np.bool_)
    Al = np.empty(m, dtype=np.int64)
    Yl = np.empty(m)
    gtl = np.empty(m)
    gal = np.empty(m)
    for t in range(m):
        i = rows[t]
        Zl[t] = Z[i]
        Vl[t] = V[i]
        Rl[t] = R[i]
        Al[t] = A[i]
        Yl[t] = Y[i]
        gtl[t] = g_t[i]
        gal[t] = g_a[i]
    ones = np.ones(m, dtype=np.bool_)
    beta_pi, _c, _it = _logistic_masked_nb(Zl, Rl.astype(np.float64), ones,
                                           max_iter, tol, np.zeros(Zl.shape[1]))
    pi = np.empty(m)
    for t in range(m):
        eta = 0.0
        for j in range(Zl.shape[1]):
            eta += Zl[t, j] * beta_pi[j]
        pi[t] = _sigmoid_clip_nb(eta, clip)
    G = grid.shape[0]
    thetas = np.empty((2, G))
    nbs = np.empty(2)
    pv_all = np.ones(m)
    for arm in range(2):
        n_cal = 0
        n_aux = 0
        for t in range(m):
            if Al[t] == arm:
                if Rl[t]:
                    n_cal += 1
                else:
                    n_aux += 1
        calib = np.empty(n_cal, dtype=np.int64)
        aux = np.empty(n_aux, dtype=np.int64)
        c1 = 0
        c2 = 0
        for t in range(m):
            if Al[t] == arm:
                if Rl[t]:
                    calib[c1] = t
                    c1 += 1
                else:
                    aux[c2] = t
                    c2 += 1
        fold = folds1 if arm == 1 else folds0
        K = K1 if arm == 1 else K0
        if n_aux > 0:
            pv, _s, _as, _low = _conformal_nb(Zl, Yl, calib, fold, K, aux)
            for u in range(n_aux):
                pv_all[aux[u]] = pv[u]
        if arm == 1:
            gat = gtl
            gaa = gal
        else:
            gat = 1.0 - gtl
            gaa = 1.0 - gal
        th, nb = _arm_theta_grid_nb(Zl, Vl, Rl, Al, Yl, pi, gat, gaa, pv_all,
                                    arm, grid, use_u, clip, max_iter, tol)
        thetas[arm] = th
        nbs[arm] = nb
    return thetas, nbs, pv_all


@njit
def _bootstrap_thetas_nb(Z, V, R, A, Y, g_t, g_a, rows, folds0, folds1, K0,
                         K1, grid, use_u, clip, max_iter, tol):
    L = rows.shape[0]
    G = grid.shape[0]
    thetas = np.empty((L, 2, G))
    nbs = np.empty((L, 2))
    for l in range(L):
        th, nb, _pv = _resample_thetas_nb(Z, V, R, A, Y, g_t, g_a, rows[l],
                                          folds0[l], folds1[l], K0, K1, grid,
                                          use_u, clip, max_iter, tol)
        thetas[l] = th
        nbs[l] = nb
    return thetas, nbs


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _ols_masked_np(Z, y, mask):
    beta, *_ = np.linalg.lstsq(Z[mask], y[mask], rcond=None)
    return beta


def _logistic_masked_np(Z, label, mask, max_iter, tol, init=None):
    X = Z[mask]
    y = label[mask]
    beta = np.zeros(X.shape[1]) if init is None else np.array(init, dtype=float)
    ll_old = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = np.clip(X @ beta, -_ETA_CAP, _ETA_CAP)
        mu = 1.0 / (1.0 + np.exp(-eta))
        ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        if abs(ll - ll_old) < tol:
            converged = True
            break
        ll_old = ll
        w = mu * (1.0 - mu)
        H = (X * w[:, None]).T @ X
        g = X.T @ (y - mu)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.pinv(H) @ g
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    return beta, converged, it


def _sigmoid_clip_np(eta, clip):
    eta = np.clip(eta, -_ETA_CAP, _ETA_CAP)
    return np.clip(1.0 / (1.0 + np.exp(-eta)), clip, 1.0 - clip)


def _conformal_np(Z, Y, calib, fold, K, aux):
    m = calib.shape[0]
    p = Z.shape[1]
    s = np.empty(m)
    aux_s = np.empty((aux.shape[0], K))
    low = np.zeros(K, dtype=bool)
    for k in range(K):
        train = calib[fold != k]
        if train.shape[0] >= p:
            beta, *_ = np.linalg.lstsq(Z[train], Y[train], rcond=None)
        else:
            low[k] = True
            beta = np.zeros(p)
            beta[0] = Y[train].mean() if train.shape[0] else 0.0
        held = fold == k
        s[held] = np.abs(Y[calib[held]] - Z[calib[held]] @ beta)
        aux_s[:, k] = np.abs(Y[aux] - Z[aux] @ beta)
    # aux_s[:, fold] expands per-fold scores to one column per calibration row
    counts = np.sum(s[None, :] >= aux_s[:, fold], axis=1)
    pv = (counts + 1.0) / (m + 1.0)
    return pv, s, aux_s, low


def _arm_theta_grid_np(Z, V, R, A, Y, pi, gat, gaa, pv, arm, grid, use_u,
                       clip, max_iter, tol):
    n_r = int(R.sum())
    mask_nb = R & (A == arm)
    aux_arm = ~R & (A == arm)
    D = V if use_u else Z
    beta_nb = _ols_masked_np(D, Y, mask_nb)
    mu_nb = np.where(R, D @ beta_nb, 0.0)
    resid_nb = (Y - mu_nb)[mask_nb]
    v_nb = float(np.mean(resid_nb**2))
    theta_nb = (mu_nb[R].sum() + np.sum(resid_nb / gat[mask_nb])) / n_r
    out = np.empty(grid.shape[0])
    beta_q = np.zeros(Z.shape[1])
    for gi, gam in enumerate(grid):
        if gam >= 1.0:
            out[gi] = theta_nb
            continue
        sel = aux_arm & (pv >= gam)
        n_sel = int(sel.sum())
        if n_sel == 0:
            out[gi] = theta_nb
            continue
        pooled = mask_nb | sel
        beta_fb = _ols_masked_np(Z, Y, pooled)
        mu_fb = Z @ beta_fb
        v_fb = float(np.mean((Y[pooled] - mu_fb[pooled]) ** 2))
        if use_u:
            tot = v_nb + v_fb
            w_nb = v_fb / tot if tot > 0.0 else 0.5
        else:
            w_nb = 0.0
        yhat = np.where(R, w_nb * mu_nb + (1.0 - w_nb) * mu_fb, mu_fb)
        if n_sel == int(aux_arm.sum()):
            q = np.ones(Z.shape[0])
        else:
            beta_q, _c, _it = _logistic_masked_np(Z, sel.astype(float),
                                                  aux_arm, max_iter, tol, beta_q)
            q = _sigmoid_clip_np(Z @ beta_q, clip)
        e_hat = pi * gat + (1.0 - pi) * gaa * q
        aug = np.where(pooled, pi / e_hat * (Y - yhat), 0.0)
        out[gi] = (yhat[R].sum() + aug.sum()) / n_r
    return out, theta_nb


def _resample_thetas_np(Z, V, R, A, Y, g_t, g_a, rows, folds0, folds1, K0,
                        K1, grid, use_u, clip, max_iter, tol):
    Zl, Vl, Rl, Al, Yl = Z[rows], V[rows], R[rows], A[rows], Y[rows]
    gtl, gal = g_t[rows], g_a[rows]
    beta_pi, _c, _it = _logistic_masked_np(Zl, Rl.astype(float),
                                           np.ones(rows.shape[0], dtype=bool),
                                           max_iter, tol)
    pi = _sigmoid_clip_np(Zl @ beta_pi, clip)
    thetas = np.empty((2, grid.shape[0]))
    nbs = np.empty(2)
    pv_all = np.ones(rows.shape[0])
    for arm in (0, 1):
        calib = np.flatnonzero(Rl & (Al == arm))
        aux = np.flatnonzero(~Rl & (Al == arm))
        fold, K = (folds1, K1) if arm == 1 else (folds0, K0)
        if aux.shape[0]:
            pv, *_ = _conformal_np(Zl, Yl, calib, fold, K, aux)
            pv_all[aux] = pv
        if arm == 1:
            gat, gaa = gtl, gal
        else:
            gat, gaa = 1.0 - gtl, 1.0 - gal
        thetas[arm], nbs[arm] = _arm_theta_grid_np(
            Zl, Vl, Rl, Al, Yl, pi, gat, gaa, pv_all, arm, grid, use_u, clip,
            max_iter, tol)
    return thetas, nbs, pv_all


def _bootstrap_thetas_np(Z, V, R, A, Y, g_t, g_a, rows, folds0, folds1, K0,
                         K1, grid, use_u, clip, max_iter, tol):
    L = rows.shape[0]
    thetas = np.empty((L, 2, grid.shape[0]))
    nbs = np.empty((L, 2))
    for l in range(L):
        thetas[l], nbs[l], _pv = _resample_thetas_np(
            Z, V, R, A, Y, g_t, g_a, rows[l], folds0[l], folds1[l], K0, K1,
            grid, use_u, clip, max_iter, tol)
    return thetas, nbs


IMPLEMENTATIONS = {
    "numba": {
        "conformal": _conformal_nb,
        "arm_theta_grid": _arm_theta_grid_nb,
        "resample_thetas": _resample_thetas_nb,
        "bootstrap_thetas": _bootstrap_thetas_nb,
    },
    "numpy": {
        "conformal": _conformal_np,
        "arm_theta_grid": _arm_theta_grid_np,
        "resample_thetas": _resample_thetas_np,
        "bootstrap_thetas": _bootstrap_thetas_np,
    },
}

BACKEND = "numba" if USE_NUMBA else "numpy"

conformal = IMPLEMENTATIONS[BACKEND]["conformal"]
arm_theta_grid = IMPLEMENTATIONS[BACKEND]["arm_theta_grid"]
resample_thetas = IMPLEMENTATIONS[BACKEND]["resample_thetas"]
bootstrap_thetas = IMPLEMENTATIONS[BACKEND]["bootstrap_thetas"]
