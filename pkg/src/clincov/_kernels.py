"""Compiled single-trajectory loops.

These mirror :class:`clincov.uav.UAV` for one vehicle and are what the nominal
generator and the planner call thousands of times. Tests check them against
the vectorized numpy model.
"""

import math

import numpy as np
from numba import njit

# Layout of the packed parameter vector.
P_VBAR, P_DRAG, P_MASS, P_J, P_SIGU, P_LU, P_TAUT, P_PF, P_IF, P_PT, P_IT, P_DT, P_PSIINF, P_KPATH = range(14)

# Termination modes for integrate_nominal.
MODE_WAYPOINTS = 0
MODE_EDGE = 1

STATUS_OK = 0
STATUS_TIMEOUT = 1
STATUS_NONFINITE = 2


@njit(cache=True)
def wrap(a):
    two_pi = 2.0 * math.pi
    a = (a + math.pi) - two_pi * math.floor((a + math.pi) / two_pi)
    a -= math.pi
    if a == -math.pi:
        a = math.pi
    return a


@njit(cache=True)
def closed_loop_rhs(z, r_n, r_e, psi_q, prm, w_u, w_t, eta_a, eta_w, out, uy):
    V = z[2]
    psi = z[3]
    om = z[4]
    uw = z[5]
    Td = z[6]
    pn_h = z[7]
    pe_h = z[8]
    V_h = z[9]
    psi_h = z[10]
    e_path = -math.sin(psi_q) * (pn_h - r_n) + math.cos(psi_q) * (pe_h - r_e)
    psi_star = wrap(psi_q - prm[P_PSIINF] * (2.0 / math.pi) * math.atan(prm[P_KPATH] * e_path))
    V_star = prm[P_VBAR]
    gyro = om + eta_w
    heading_err = wrap(psi_star - psi_h)
    F_c = prm[P_PF] * (V_star - V_h) + prm[P_IF] * z[11]
    T_c = prm[P_DT] * (prm[P_PT] * heading_err + prm[P_IT] * z[12] - gyro)
    acc = (F_c - 0.5 * prm[P_DRAG] * (V - uw) ** 2) / prm[P_MASS]
    out[0] = V * math.cos(psi)
    out[1] = V * math.sin(psi)
    out[2] = acc
    out[3] = om
    out[4] = (T_c + Td) / prm[P_J]
    out[5] = -V / prm[P_LU] * uw + prm[P_SIGU] * math.sqrt(2.0 * V / prm[P_LU]) * w_u
    out[6] = -Td / prm[P_TAUT] + w_t
    out[7] = V_h * math.cos(psi_h)
    out[8] = V_h * math.sin(psi_h)
    out[9] = acc + eta_a
    out[10] = gyro
    out[11] = V_star - V_h
    out[12] = heading_err
    uy[0] = F_c
    uy[1] = T_c
    uy[2] = acc + eta_a
    uy[3] = gyro


@njit(cache=True)
def rk4_closed_loop(z, r_n, r_e, psi_q, prm, dt, out_z, uy):
    n = z.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    scratch = np.empty(4)
    closed_loop_rhs(z, r_n, r_e, psi_q, prm, 0.0, 0.0, 0.0, 0.0, k1, uy)
    for i in range(n):
        tmp[i] = z[i] + 0.5 * dt * k1[i]
    closed_loop_rhs(tmp, r_n, r_e, psi_q, prm, 0.0, 0.0, 0.0, 0.0, k2, scratch)
    for i in range(n):
        tmp[i] = z[i] + 0.5 * dt * k2[i]
    closed_loop_rhs(tmp, r_n, r_e, psi_q, prm, 0.0, 0.0, 0.0, 0.0, k3, scratch)
    for i in range(n):
        tmp[i] = z[i] + dt * k3[i]
    closed_loop_rhs(tmp, r_n, r_e, psi_q, prm, 0.0, 0.0, 0.0, 0.0, k4, scratch)
    for i in range(n):
        out_z[i] = z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    out_z[3] = wrap(out_z[3])
    out_z[10] = wrap(out_z[10])


@njit(cache=True)
def filter_F(V, psi, F):
    F[:, :] = 0.0
    F[0, 2] = math.cos(psi)
    F[0, 3] = -V * math.sin(psi)
    F[1, 2] = math.sin(psi)
    F[1, 3] = V * math.cos(psi)


@njit(cache=True)
def lyap_rhs(P, F, Q):
    FP = F @ P
    R = FP + FP.T + Q
    return 0.5 * (R + R.T)


@njit(cache=True)
def rk4_lyap(P, F0, F1, Q0, Q1, dt):
    Fm = 0.5 * (F0 + F1)
    Qm = 0.5 * (Q0 + Q1)
    k1 = lyap_rhs(P, F0, Q0)
    k2 = lyap_rhs(P + 0.5 * dt * k1, Fm, Qm)
    k3 = lyap_rhs(P + 0.5 * dt * k2, Fm, Qm)
    k4 = lyap_rhs(P + dt * k3, F1, Q1)
    out = P + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (out + out.T)


@njit(cache=True)
def in_rects(pn, pe, rects):
    for i in range(rects.shape[0]):
        if rects[i, 0] <= pn <= rects[i, 1] and rects[i, 2] <= pe <= rects[i, 3]:
            return True
    return False


@njit(cache=True)
def passed(pn, pe, wn, we, qn, qe):
    return (pn - wn) * qn + (pe - we) * qe >= 0.0


@njit(cache=True)
def integrate_nominal(z0, P0, prm, waypoints, mode, rects, dt, gps_every, step0,
                      max_steps, Q_hat, R_hat):
    """
    Noise-free closed-loop integration with the navigation filter covariance.

    Returns arrays sized to the number of recorded points plus a status code.
    ``seg`` holds the index of the segment used for the step that starts at
    each point.
    """
    n_pts = max_steps + 1
    Z = np.zeros((n_pts, 13))
    UY = np.zeros((n_pts, 4))
    SEG = np.zeros(n_pts, dtype=np.int64)
    PH = np.zeros((n_pts, 4, 4))
    UPD = np.zeros(n_pts, dtype=np.bool_)
    KK = np.zeros((n_pts, 4, 3))
    n_seg = waypoints.shape[0] - 1
    qn = np.empty(n_seg)
    qe = np.empty(n_seg)
    for i in range(n_seg):
        dn = waypoints[i + 1, 0] - waypoints[i, 0]
        de = waypoints[i + 1, 1] - waypoints[i, 1]
        L = math.sqrt(dn * dn + de * de)
        qn[i] = dn / L
        qe[i] = de / L
    edge_len = 0.0
    if mode == MODE_EDGE:
        dn = waypoints[1, 0] - waypoints[0, 0]
        de = waypoints[1, 1] - waypoints[0, 1]
        edge_len = math.sqrt(dn * dn + de * de)

    Bh = np.zeros((4, 2))
    Bh[2, 0] = 1.0
    Bh[3, 1] = 1.0
    BQB = Bh @ Q_hat @ Bh.T
    Hh = np.zeros((3, 4))
    Hh[0, 0] = 1.0
    Hh[1, 1] = 1.0
    Hh[2, 2] = 1.0
    eye4 = np.eye(4)

    z = z0.copy()
    znew = np.empty(13)
    uy = np.empty(4)
    P = P0.copy()
    F0 = np.zeros((4, 4))
    F1 = np.zeros((4, 4))
    seg = 0
    Z[0] = z
    PH[0] = P
    status = STATUS_TIMEOUT
    k = 0
    while k < max_steps:
        SEG[k] = seg
        rn = waypoints[seg, 0]
        re = waypoints[seg, 1]
        psi_q = math.atan2(qe[seg], qn[seg])
        rk4_closed_loop(z, rn, re, psi_q, prm, dt, znew, uy)
        UY[k] = uy
        filter_F(z[9], z[10], F0)
        filter_F(znew[9], znew[10], F1)
        P = rk4_lyap(P, F0, F1, BQB, BQB, dt)
        z[:] = znew
        finite = True
        for i in range(13):
            if not math.isfinite(z[i]):
                finite = False
        if not finite:
            status = STATUS_NONFINITE
            k += 1
            break
        k += 1
        if (step0 + k) % gps_every == 0 and not in_rects(z[0], z[1], rects):
            W = Hh @ P @ Hh.T + R_hat
            K = np.linalg.solve(W, (P @ Hh.T).T).T
            # nominal residual h(x) - h_hat(x_hat)
            for i in range(4):
                acc = 0.0
                for j in range(3):
                    acc += K[i, j] * (z[j] - z[7 + j])
                z[7 + i] += acc
            z[10] = wrap(z[10])
            A = eye4 - K @ Hh
            P = A @ P @ A.T + K @ R_hat @ K.T
            P = 0.5 * (P + P.T)
            UPD[k] = True
            KK[k] = K
        Z[k] = z
        PH[k] = P
        # segment bookkeeping on the estimated position
        if mode == MODE_EDGE:
            along = (z[7] - waypoints[0, 0]) * qn[0] + (z[8] - waypoints[0, 1]) * qe[0]
            if along >= edge_len:
                status = STATUS_OK
                break
        else:
            last = seg == n_seg - 1
            wn = waypoints[seg + 1, 0]
            we = waypoints[seg + 1, 1]
            if last:
                if passed(z[7], z[8], wn, we, qn[seg], qe[seg]):
                    status = STATUS_OK
                    break
            else:
                nn = qn[seg] + qn[seg + 1]
                ne = qe[seg] + qe[seg + 1]
                if math.sqrt(nn * nn + ne * ne) < 1e-12:
                    nn = qn[seg]
                    ne = qe[seg]
                if passed(z[7], z[8], wn, we, nn, ne):
                    seg += 1
    # values at the final point: segment of the last step, u/y re-evaluated there
    SEG[k] = SEG[k - 1] if k > 0 else seg
    rn = waypoints[SEG[k], 0]
    re = waypoints[SEG[k], 1]
    psi_q = math.atan2(qe[SEG[k]], qn[SEG[k]])
    scratch = np.empty(13)
    closed_loop_rhs(z, rn, re, psi_q, prm, 0.0, 0.0, 0.0, 0.0, scratch, uy)
    UY[k] = uy
    n_out = k + 1
    return (Z[:n_out].copy(), UY[:n_out].copy(), SEG[:n_out].copy(), PH[:n_out].copy(),
            UPD[:n_out].copy(), KK[:n_out].copy(), status)


@njit(cache=True)
def lincov_series(C0, Fs, Fe, Qs, Qe, upd, A, BRB, dt, n_sub):
    """
    Propagate the augmented covariance across a whole nominal.

    ``Fs[k]``/``Fe[k]`` are the system matrices at the start/end of step k;
    ``upd[k+1]`` applies ``C <- A[k+1] C A[k+1]^T + BRB[k+1]`` after the step.
    Each step is split into ``n_sub`` RK4 substeps with linearly interpolated
    matrices, which keeps the stiff rate-loop modes from eroding definiteness.
    """
    n = Fs.shape[0] + 1
    m = C0.shape[0]
    out = np.empty((n, m, m))
    C = C0.copy()
    out[0] = C
    h = dt / n_sub
    for k in range(n - 1):
        dF = (Fe[k] - Fs[k]) / n_sub
        dQ = (Qe[k] - Qs[k]) / n_sub
        for j in range(n_sub):
            C = rk4_lyap(C, Fs[k] + j * dF, Fs[k] + (j + 1) * dF,
                         Qs[k] + j * dQ, Qs[k] + (j + 1) * dQ, h)
        if upd[k + 1]:
            C = A[k + 1] @ C @ A[k + 1].T + BRB[k + 1]
            C = 0.5 * (C + C.T)
        out[k + 1] = C
    return out
