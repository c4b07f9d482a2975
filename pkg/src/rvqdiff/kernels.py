"""Hot inner loops, each with a numba kernel and a numpy twin.

The public wrappers dispatch on ``_accel.USE_NUMBA``.  Both paths consume
the same pre-drawn uniforms, so they return identical results for the same
inputs; ``tests/test_kernels.py`` holds them to that.
"""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# Oracle posterior over a masked cell, given everything unmasked in x_t
# ---------------------------------------------------------------------------


@njit(cache=True)
def _posterior_numba(support, probs, xt, mask_id, n_real):
    n_chain, n_cells = xt.shape
    n_support = support.shape[0]
    post = np.zeros((n_chain, n_cells, n_real))
    z = np.zeros(n_chain)
    for b in range(n_chain):
        for s in range(n_support):
            ok = True
            for c in range(n_cells):
                v = xt[b, c]
                if v != mask_id and v != support[s, c]:
                    ok = False
                    break
            if not ok:
                continue
            w = probs[s]
            z[b] += w
            for c in range(n_cells):
                if xt[b, c] == mask_id:
                    post[b, c, support[s, c]] += w
        if z[b] > 0.0:
            for c in range(n_cells):
                for y in range(n_real):
                    post[b, c, y] /= z[b]
    return post, z


def _posterior_numpy(support, probs, xt, mask_id, n_real, chunk=2048):
    n_chain, n_cells = xt.shape
    onehot = np.zeros((support.shape[0], n_cells, n_real))
    np.put_along_axis(onehot, support[:, :, None], 1.0, axis=2)
    post = np.zeros((n_chain, n_cells, n_real))
    z = np.zeros(n_chain)
    for lo in range(0, n_chain, chunk):
        x = xt[lo:lo + chunk]
        masked = x == mask_id
        ok = np.all(masked[:, None, :] | (x[:, None, :] == support[None, :, :]), axis=2)
        w = ok * probs[None, :]
        zz = w.sum(axis=1)
        p = np.einsum("bs,scy->bcy", w, onehot)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(zz[:, None, None] > 0, p / zz[:, None, None], 0.0)
        post[lo:lo + chunk] = p * masked[:, :, None]
        z[lo:lo + chunk] = zz
    return post, z


def clean_posterior(support, probs, xt, mask_id, n_real):
    """Posterior over the clean token of every masked cell.

    ``support`` is ``(S, C)`` flattened clean grids with weights ``probs``;
    ``xt`` is ``(B, C)``.  Returns ``(post, z)`` where ``post[b, c, y]`` is
    ``P(x0_c = y | x0 agrees with the unmasked cells of xt[b])`` (zero at
    unmasked cells) and ``z[b]`` is the prior mass of the agreeing support.
    """
    support = np.ascontiguousarray(support, dtype=np.int64)
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    xt = np.ascontiguousarray(xt, dtype=np.int64)
    if _accel.USE_NUMBA:
        return _posterior_numba(support, probs, xt, mask_id, n_real)
    return _posterior_numpy(support, probs, xt, mask_id, n_real)


# ---------------------------------------------------------------------------
# Inverse-CDF categorical draws
# ---------------------------------------------------------------------------


@njit(cache=True)
def _categorical_numba(probs, u):
    n, k = probs.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        acc = 0.0
        j = 0
        while j < k - 1:
            acc += probs[i, j]
            if u[i] < acc:
                break
            j += 1
        out[i] = j
    return out


def _categorical_numpy(probs, u):
    cdf = np.cumsum(probs[:, :-1], axis=1)
    return (u[:, None] >= cdf).sum(axis=1).astype(np.int64)


def categorical(probs, u):
    """Draw one index per row of ``probs`` (rows sum to 1) using uniforms ``u``."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _categorical_numba(probs, u)
    return _categorical_numpy(probs, u)


# ---------------------------------------------------------------------------
# Synthetic run processes
# ---------------------------------------------------------------------------


@njit(cache=True)
def _runs_numba(dist, q, u_switch, u_draw):
    n_rec, length = u_switch.shape
    n = dist.shape[2]
    out = np.empty((n_rec, length), dtype=np.int64)
    for r in range(n_rec):
        acc = 0.0
        cur = n - 1
        for y in range(n - 1):
            acc += dist[r, 0, y]
            if u_draw[r, 0] < acc:
                cur = y
                break
        out[r, 0] = cur
        for j in range(1, length):
            if u_switch[r, j] < q[r]:
                # redraw excluding the current symbol
                target = u_draw[r, j] * (1.0 - dist[r, j, cur])
                acc = 0.0
                nxt = -1
                last = -1
                for y in range(n):
                    if y == cur:
                        continue
                    last = y
                    acc += dist[r, j, y]
                    if target < acc:
                        nxt = y
                        break
                if nxt < 0:
                    nxt = last
                cur = nxt
            out[r, j] = cur
    return out


def _runs_numpy(dist, q, u_switch, u_draw):
    n_rec, length = u_switch.shape
    n = dist.shape[2]
    rows = np.arange(n_rec)
    out = np.empty((n_rec, length), dtype=np.int64)
    out[:, 0] = _categorical_numpy(dist[:, 0], u_draw[:, 0])
    for j in range(1, length):
        cur = out[:, j - 1]
        p = dist[:, j].copy()
        p_cur = p[rows, cur]
        p[rows, cur] = 0.0
        cdf = np.cumsum(p, axis=1)
        target = u_draw[:, j] * (1.0 - p_cur)
        nxt = (target[:, None] >= cdf).sum(axis=1)
        # float slack past the last admissible symbol falls back to it
        last = np.where(cur == n - 1, n - 2, n - 1)
        nxt = np.minimum(nxt, last)
        out[:, j] = np.where(u_switch[:, j] < q, nxt, cur)
    return out


def runs(dist, q, u_switch, u_draw):
    """Piecewise-constant symbol runs.

    ``dist`` is ``(N, d, n)``: the draw distribution at each position.  The
    first symbol comes from ``dist[:, 0]``; afterwards, with probability
    ``q`` (per record), the chain switches to a different symbol drawn from
    ``dist[:, j]`` restricted to the other symbols.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (dist, q, u_switch, u_draw)]
    if _accel.USE_NUMBA:
        return _runs_numba(*args)
    return _runs_numpy(*args)
