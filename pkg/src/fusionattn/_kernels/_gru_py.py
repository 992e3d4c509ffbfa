"""Pure numpy GRU recurrence (fallback when the compiled kernel is unavailable).

Gate layout along the last axis of the 3H-wide arrays is (reset, update, new).
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(xp, w_hh, b_hh, reverse=False):
    """Run the recurrence over pre-projected inputs.

    xp: (B, T, 3H) input projections ``x @ W_ih.T + b_ih``.
    Returns hidden states (B, T, H) and the gate cache ``(r, z, n, ghn)``.
    """
    B, T, H3 = xp.shape
    H = H3 // 3
    hs = np.empty((B, T, H))
    r_all = np.empty((B, T, H))
    z_all = np.empty((B, T, H))
    n_all = np.empty((B, T, H))
    ghn_all = np.empty((B, T, H))
    h = np.zeros((B, H))
    w_t = w_hh.T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        gh = h @ w_t + b_hh
        x_t = xp[:, t]
        r = _sigmoid(x_t[:, :H] + gh[:, :H])
        z = _sigmoid(x_t[:, H : 2 * H] + gh[:, H : 2 * H])
        ghn = gh[:, 2 * H :]
        n = np.tanh(x_t[:, 2 * H :] + r * ghn)
        h = n + z * (h - n)
        hs[:, t] = h
        r_all[:, t] = r
        z_all[:, t] = z
        n_all[:, t] = n
        ghn_all[:, t] = ghn
    return hs, (r_all, z_all, n_all, ghn_all)


def gru_backward(dhs, w_hh, hs, cache, reverse=False):
    """Backpropagate through :func:`gru_forward`.

    Returns ``(dxp, dw_hh, db_hh)``.
    """
    r_all, z_all, n_all, ghn_all = cache
    B, T, H = hs.shape
    dxp = np.empty((B, T, 3 * H))
    h_prev_all = np.zeros((B, T, H))
    if reverse:
        h_prev_all[:, :-1] = hs[:, 1:]
    else:
        h_prev_all[:, 1:] = hs[:, :-1]
    dgh_all = np.empty((B, T, 3 * H))
    dh_next = np.zeros((B, H))
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        r = r_all[:, t]
        z = z_all[:, t]
        n = n_all[:, t]
        dh = dhs[:, t] + dh_next
        dn_pre = dh * (1.0 - z) * (1.0 - n * n)
        dz_pre = dh * (h_prev_all[:, t] - n) * z * (1.0 - z)
        dr_pre = dn_pre * ghn_all[:, t] * r * (1.0 - r)
        dxp[:, t, :H] = dr_pre
        dxp[:, t, H : 2 * H] = dz_pre
        dxp[:, t, 2 * H :] = dn_pre
        dgh = dgh_all[:, t]
        dgh[:, :H] = dr_pre
        dgh[:, H : 2 * H] = dz_pre
        dgh[:, 2 * H :] = dn_pre * r
        dh_next = dh * z + dgh @ w_hh
    dgh_flat = dgh_all.reshape(B * T, 3 * H)
    dw_hh = dgh_flat.T @ h_prev_all.reshape(B * T, H)
    db_hh = dgh_flat.sum(axis=0)
    return dxp, dw_hh, db_hh
