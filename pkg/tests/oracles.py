"""Independent reference computations shared by the tests."""
from __future__ import annotations

import numpy as np


def central_diff_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def central_diff_jac(fg, x, h=1e-6):
    """Columns of d(fg)/dx for a vector-valued fg."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.ravel(fg(x + e)) - np.ravel(fg(x - e))) / (2 * h))
    return np.array(cols).T


def rel_err(a, b, floor=1e-30):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# ---------------------------------------------------------------- brute-force distances


def _zoom_min(f, n=400, levels=8):
    """Minimise f(u, v) over the unit square by an n x n grid, then repeatedly re-grid around the best sample."""
    lo, hi = np.zeros(2), np.ones(2)
    best = None
    for _ in range(levels):
        u, v = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
        val = f(u, v)
        k = np.unravel_index(np.argmin(val), val.shape)
        best = (float(val[k]), u[k], v[k])
        step = (hi - lo) / (n - 1)
        c = np.array([u[k], v[k]])
        lo, hi = np.maximum(c - 2 * step, 0.0), np.minimum(c + 2 * step, 1.0)
    return best


def brute_point_triangle(p, t0, t1, t2, n=400):
    """Grid search over the triangle (square collapsed onto it by (u, v) -> (u, v (1 - u)))."""
    p, t0, t1, t2 = (np.asarray(a, float) for a in (p, t0, t1, t2))

    def f(u, v):
        q = t0 + u[..., None] * (t1 - t0) + (v * (1 - u))[..., None] * (t2 - t0)
        return np.sqrt(((q - p) ** 2).sum(-1))

    return _zoom_min(f, n)[0]


def brute_segment_segment(a0, a1, b0, b1, n=400):
    a0, a1, b0, b1 = (np.asarray(a, float) for a in (a0, a1, b0, b1))

    def f(s, t):
        r = a0 + s[..., None] * (a1 - a0) - b0 - t[..., None] * (b1 - b0)
        return np.sqrt((r * r).sum(-1))

    return _zoom_min(f, n)[0]


# ---------------------------------------------------------------- time-scan collision oracle


def _cross(a, b):
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _triple(kind, X):
    """Coplanarity determinant along the last two axes; X has shape (..., 4, 3)."""
    if kind == "VF":
        u, v, w = X[..., 2, :] - X[..., 1, :], X[..., 3, :] - X[..., 1, :], X[..., 0, :] - X[..., 1, :]
    else:
        u, v, w = X[..., 1, :] - X[..., 0, :], X[..., 3, :] - X[..., 2, :], X[..., 2, :] - X[..., 0, :]
    return (_cross(u, v) * w).sum(-1)


def _exact_dist(kind, X):
    from augcontact.distance import point_triangle_distance_batch, segment_segment_distance_batch
    if kind == "VF":
        return point_triangle_distance_batch(X[..., 0, :], X[..., 1, :], X[..., 2, :], X[..., 3, :])
    return segment_segment_distance_batch(X[..., 0, :], X[..., 1, :], X[..., 2, :], X[..., 3, :])


def scan_first_contact(kind, X0, X1, samples=10_000, tol=1e-9):
    """First contact time of linear trajectories X0 -> X1, shapes (m, 4, 3) or (4, 3).

    The motion is scanned at ``samples`` + 1 uniform times; every sign change of
    the coplanarity determinant is bisected to a crossing time and counts as
    contact when the primitives are within ``tol`` times the pair extent there.
    (Touching requires coplanarity, so contacts that do not flip the sign, i.e.
    grazing ones, are invisible to this oracle.)
    Returns the start of the first sample interval holding a contact, NaN for none.
    """
    X0 = np.asarray(X0, float)
    single = X0.ndim == 2
    X0 = X0.reshape(-1, 4, 3)
    dX = np.asarray(X1, float).reshape(-1, 4, 3) - X0
    m = len(X0)
    ts = np.linspace(0.0, 1.0, samples + 1)
    scale = np.maximum(np.ptp(X0, axis=1).max(-1), np.ptp(X0 + dX, axis=1).max(-1))
    out = np.full(m, np.nan)
    P = X0[:, None] + ts[None, :, None, None] * dX[:, None]
    f = _triple(kind, P)  # (m, S)
    touch = np.zeros(f.shape, dtype=bool)
    r, i = np.nonzero(np.sign(f[:, :-1]) * np.sign(f[:, 1:]) < 0)
    if len(r):
        lo, hi, flo = ts[i].copy(), ts[i + 1].copy(), f[r, i]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = _triple(kind, X0[r] + mid[:, None, None] * dX[r])
            same = np.sign(fm) == np.sign(flo)
            lo = np.where(same, mid, lo)
            flo = np.where(same, fm, flo)
            hi = np.where(same, hi, mid)
        tc = 0.5 * (lo + hi)
        d = _exact_dist(kind, X0[r] + tc[:, None, None] * dX[r])
        ok = d <= tol * scale[r]
        touch[r[ok], i[ok]] = True
    any_t = touch.any(axis=1)
    out[any_t] = ts[np.argmax(touch[any_t], axis=1)]
    return float(out[0]) if single else out


def min_scan_distance(kind, X0, X1, t_end, samples=10_000):
    ts = np.linspace(0.0, t_end, samples + 1)
    P = np.asarray(X0)[None] + ts[:, None, None] * (np.asarray(X1) - np.asarray(X0))[None]
    return float(_exact_dist(kind, P).min())


# ---------------------------------------------------------------- slack


def slack_grid_min(mu, sigma, dhat, d, spacing=1e-6, smax=None):
    smax = max(d - dhat - mu / sigma, 0.0) + 1e-3 if smax is None else smax
    s = np.arange(0.0, smax + spacing, spacing)
    c = dhat + s - d
    return s[np.argmin(mu * c + 0.5 * sigma * c * c)]


# ---------------------------------------------------------------- whole-mesh sub-step scan


def all_surface_pairs(tris, edges, verts):
    """Every vertex-triangle and edge-edge pair not sharing a node, as (kind, (k, 4) node array)."""
    tris, edges, verts = np.asarray(tris), np.asarray(edges), np.asarray(verts)
    v = np.repeat(verts, len(tris))
    t = np.tile(np.arange(len(tris)), len(verts))
    keep = np.all(tris[t] != v[:, None], axis=1)
    vf = np.concatenate([v[keep, None], tris[t[keep]]], axis=1)
    i, j = np.triu_indices(len(edges), 1)
    a, b = edges[i], edges[j]
    keep = (a[:, :, None] != b[:, None, :]).all(axis=(1, 2))
    ee = np.concatenate([a[keep], b[keep]], axis=1)
    return {"VF": vf, "EE": ee}


def scan_substep(pairs, x0, x1, samples=1000, margin=0.0, chunk=200):
    """Dense check of the linear motion x0 -> x1 over the given pairs.

    Pairs whose swept boxes stay more than ``margin`` apart are skipped (they
    cannot meet, and their distance exceeds the margin throughout).
    Returns (smallest sampled distance, number of pairs with a detected contact).
    """
    x0 = np.asarray(x0, float).reshape(-1, 3)
    x1 = np.asarray(x1, float).reshape(-1, 3)
    lo, hi = np.minimum(x0, x1), np.maximum(x0, x1)
    dmin, hits = np.inf, 0
    ts = np.linspace(0.0, 1.0, samples + 1)
    for kind, nodes in pairs.items():
        if not len(nodes):
            continue
        na = 1 if kind == "VF" else 2
        alo, ahi = lo[nodes[:, :na]].min(1), hi[nodes[:, :na]].max(1)
        blo, bhi = lo[nodes[:, na:]].min(1), hi[nodes[:, na:]].max(1)
        near = np.all((alo <= bhi + margin + 1e-9) & (blo <= ahi + margin + 1e-9), axis=1)
        moving = np.any(x0[nodes] != x1[nodes], axis=(1, 2))
        sel = nodes[near & moving]
        for s in range(0, len(sel), chunk):
            nd = sel[s:s + chunk]
            X0, X1 = x0[nd], x1[nd]
            tc = scan_first_contact(kind, X0, X1, samples)
            hits += int(np.count_nonzero(~np.isnan(tc)))
            P = X0[:, None] + ts[None, :, None, None] * (X1 - X0)[:, None]
            d = _exact_dist(kind, P.reshape(-1, 4, 3))
            if np.any(np.isnan(d)):
                raise FloatingPointError("NaN distance in scan")
            dmin = min(dmin, float(d.min()))
    return dmin, hits
