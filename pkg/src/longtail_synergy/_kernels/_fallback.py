"""Vectorised numpy kernels. Reference path and fallback for the compiled core.

Every kernel takes C-contiguous float64 arrays (int64 labels) and returns the
value together with closed-form gradients.
"""
import numpy as np


def scl_fwd_bwd(z, labels, tau):
    b = z.shape[0]
    sim = z @ z.T / tau
    not_self = ~np.eye(b, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & not_self
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        return 0.0, np.zeros_like(z)

    masked = np.where(not_self, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    ex = np.where(not_self, np.exp(masked - row_max), 0.0)
    den = ex.sum(axis=1, keepdims=True)
    log_den = np.log(den[:, 0]) + row_max[:, 0]
    softmax = ex / den

    safe_pos = np.maximum(n_pos, 1)
    pos_sum = np.where(pos, sim, 0.0).sum(axis=1)
    per_anchor = log_den - pos_sum / safe_pos
    value = float(per_anchor[anchors].sum() / n_anchor)

    g = (softmax - pos / safe_pos[:, None]) / n_anchor
    g[~anchors] = 0.0
    grad = (g + g.T) @ z / tau
    return value, grad


def ldam_fwd_bwd(logits, labels, deltas, s):
    b = logits.shape[0]
    rows = np.arange(b)
    adj = logits.copy()
    adj[rows, labels] -= deltas[labels]
    a = s * adj
    a_max = a.max(axis=1, keepdims=True)
    ex = np.exp(a - a_max)
    den = ex.sum(axis=1, keepdims=True)
    lse = np.log(den[:, 0]) + a_max[:, 0]
    value = float(np.mean(lse - a[rows, labels]))
    grad = ex / den
    grad[rows, labels] -= 1.0
    grad *= s / b
    return value, grad


def center_fwd_bwd(x, centers, gamma):
    b = x.shape[0]
    diff = x[:, None, :] - centers
    dist = np.einsum("bkm,bkm->bk", diff, diff)
    value = float(np.sum(gamma * dist) / b)
    g_x = 2.0 * np.einsum("bk,bkm->bm", gamma, diff) / b
    g_c = -2.0 * gamma[:, :, None] * diff / b
    g_gamma = dist / b
    return value, g_x, g_c, g_gamma


def mv_fwd_bwd(t, r, f, eps):
    n = t.shape[0]
    nt = np.sqrt(np.einsum("ncp,ncp->np", t, t))
    nr = np.sqrt(np.einsum("ncp,ncp->np", r, r))
    nf = np.sqrt(np.einsum("ncp,ncp->np", f, f))

    nt_f = np.maximum(nt, eps)
    nr_f = np.maximum(nr, eps)
    live = (nt >= eps) | (nr >= eps)
    dot = np.einsum("ncp,ncp->np", t, r)
    cos = dot / (nt_f * nr_f)
    term1 = float(np.sum(np.where(live, np.abs(cos - 1.0), 0.0)) / n)
    # d|cos - 1|/dcos; cos <= 1 up to rounding
    d_cos = np.where(live, np.where(cos > 1.0, 1.0, -1.0), 0.0) / n
    inv = 1.0 / (nt_f * nr_f)
    t_coef = np.where(nt >= eps, cos / (nt_f * nt_f), 0.0)
    r_coef = np.where(nr >= eps, cos / (nr_f * nr_f), 0.0)
    g_t = d_cos[:, None, :] * (r * inv[:, None, :] - t * t_coef[:, None, :])
    g_r = d_cos[:, None, :] * (t * inv[:, None, :] - r * r_coef[:, None, :])

    gap = nt - nf
    term2 = float(np.sum(np.abs(gap)) / n)
    sg = np.sign(gap) / n
    g_t += (sg * np.where(nt > 0, 1.0 / np.where(nt > 0, nt, 1.0), 0.0))[:, None, :] * t
    g_f = -(sg * np.where(nf > 0, 1.0 / np.where(nf > 0, nf, 1.0), 0.0))[:, None, :] * f
    return term1, term2, g_t, g_r, g_f


def icd(features, labels, num_classes):
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        members = features[labels == c]
        if len(members) == 0:
            continue
        center = members.mean(axis=0)
        out[c] = np.linalg.norm(members - center, axis=1).mean()
    return out
