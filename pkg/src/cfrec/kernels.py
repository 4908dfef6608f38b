"""Hot training and selection loops.

Every function here is a plain numpy loop compiled with numba's ``@njit``
when available. Setting ``CFREC_DISABLE_NUMBA=1`` in the environment (or
running without numba) selects the interpreted numpy fallback, which executes
the identical code. Kernels draw no randomness of their own: shuffle orders,
uniform draws and noise vectors are pre-generated by the caller so both
backends replay the same arithmetic.

Parameter layout shared by the kernels:
    P  (num_users, d) user embeddings
    Q  (num_items, d) item embeddings
    bu (num_users,)   user bias (MF only)
    bi (num_items,)   item bias
    gb (1,)           global bias

Negative items come from per-user eligibility lists (``elig_flat`` /
``elig_indptr``: catalog items the user has no positive train interaction
with) indexed by a pre-drawn uniform in [0, 1).

Constrained kernels apply the plain ranking update first and the penalty
increment as a separate subtraction, so an example whose hinge is inactive
performs bit-for-bit the same update as the unconstrained kernel.
"""

import math
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USING_NUMBA = _HAVE_NUMBA and os.environ.get("CFREC_DISABLE_NUMBA", "") not in (
    "1",
    "true",
    "yes",
)


def _jit(fn):
    if USING_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


@_jit
def logistic(x):
    """Clamped sigmoid; the argument is clipped to [-30, 30] before exp."""
    if x > 30.0:
        x = 30.0
    elif x < -30.0:
        x = -30.0
    return 1.0 / (1.0 + math.exp(-x))


@_jit
def _draw_negative(u, nu, elig_flat, elig_indptr):
    # nu in [0, 1); returns -1 when the user has no eligible negatives
    lo = elig_indptr[u]
    n = elig_indptr[u + 1] - lo
    if n <= 0:
        return np.int64(-1)
    return elig_flat[lo + np.int64(nu * n)]


@_jit
def _dot(a, b):
    acc = 0.0
    for c in range(a.shape[0]):
        acc += a[c] * b[c]
    return acc


@_jit
def _attn_forward(Q, hist, inv_sqrt_d):
    """Attention pooling keyed on the last history item; returns (weights, pooled)."""
    L = hist.shape[0]
    d = Q.shape[1]
    e = np.empty(L)
    last = Q[hist[L - 1]]
    for t in range(L):
        e[t] = _dot(Q[hist[t]], last) * inv_sqrt_d
    m = e[0]
    for t in range(1, L):
        if e[t] > m:
            m = e[t]
    a = np.empty(L)
    s = 0.0
    for t in range(L):
        a[t] = math.exp(e[t] - m)
        s += a[t]
    for t in range(L):
        a[t] /= s
    h = np.zeros(d)
    for t in range(L):
        qt = Q[hist[t]]
        for c in range(d):
            h[c] += a[t] * qt[c]
    return a, h


@_jit
def _attn_backward_rows(Q, hist, a, h, g, inv_sqrt_d):
    """Per-position gradient rows of an attention-pooled score.

    ``g`` is the upstream gradient flowing into the pooled vector. Rows for
    repeated items are meant to be applied additively by the caller. Reads Q,
    so it must run before any parameter update for the same example.
    """
    L = hist.shape[0]
    d = Q.shape[1]
    rows = np.zeros((L, d))
    gdot_h = _dot(g, h)
    last = Q[hist[L - 1]]
    for t in range(L):
        qt = Q[hist[t]]
        de = a[t] * (_dot(g, qt) - gdot_h) * inv_sqrt_d
        for c in range(d):
            rows[t, c] += a[t] * g[c] + de * last[c]
            rows[L - 1, c] += de * qt[c]
    return rows


@_jit
def mf_bpr_epoch(
    P, Q, bu, bi, gb,
    ex_user, ex_item, order, neg_u,
    elig_flat, elig_indptr, ipsw, lr, l2,
):
    """One pairwise-ranking epoch over positive examples. Returns summed rank loss."""
    d = P.shape[1]
    loss = 0.0
    for k in range(order.shape[0]):
        e = order[k]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[k], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        s_pos = _dot(P[u], Q[v]) + bu[u] + bi[v] + gb[0]
        s_neg = _dot(P[u], Q[j]) + bu[u] + bi[j] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)
        for c in range(d):
            pu = P[u, c]
            qv = Q[v, c]
            qj = Q[j, c]
            P[u, c] -= lr * (g * (qv - qj) + l2 * pu)
            Q[v, c] -= lr * (g * pu + l2 * qv)
            Q[j, c] -= lr * (-g * pu + l2 * qj)
        bu[u] -= lr * (l2 * bu[u])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
    return loss


@_jit
def mf_discrete_epoch(
    P, Q, bu, bi, gb,
    ex_user, ex_item, order, neg_u,
    elig_flat, elig_indptr, ipsw,
    p_clone, omega, eps, lr, l2,
):
    """MF epoch with the frozen-clone consistency penalty on kept pairs.

    ``p_clone[e]`` is the clone's probability for example ``e``, NaN when the
    example has no kept counterfactual pair. Returns (rank loss sum,
    constraint loss sum).
    """
    d = P.shape[1]
    loss = 0.0
    closs = 0.0
    for k in range(order.shape[0]):
        e = order[k]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[k], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        s_pos = _dot(P[u], Q[v]) + bu[u] + bi[v] + gb[0]
        s_neg = _dot(P[u], Q[j]) + bu[u] + bi[j] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)

        ct = 0.0
        pc = p_clone[e]
        if not math.isnan(pc):
            p_real = logistic(s_pos)
            gap = abs(pc - p_real) - eps
            if gap > 0.0:
                closs += gap
                sign = 1.0 if p_real > pc else -1.0
                ct = omega * sign * p_real * (1.0 - p_real)

        pu_s = P[u].copy()
        qv_s = Q[v].copy()
        for c in range(d):
            pu = pu_s[c]
            qv = qv_s[c]
            qj = Q[j, c]
            P[u, c] -= lr * (g * (qv - qj) + l2 * pu)
            Q[v, c] -= lr * (g * pu + l2 * qv)
            Q[j, c] -= lr * (-g * pu + l2 * qj)
        bu[u] -= lr * (l2 * bu[u])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
        if ct != 0.0:
            for c in range(d):
                P[u, c] -= lr * (ct * qv_s[c])
                Q[v, c] -= lr * (ct * pu_s[c])
            bu[u] -= lr * ct
            bi[v] -= lr * ct
            gb[0] -= lr * ct
    return loss, closs


@_jit
def mf_continuous_chunk(
    P, Q, bu, bi, gb,
    ex_user, ex_item, idx, neg_u,
    noise, gam,
    elig_flat, elig_indptr, ipsw,
    omega, eps1, lr, l2,
):
    """MF steps for one chunk of examples with the Monte Carlo neighbourhood penalty.

    The user embedding stands in for the history representation; sample ``s``
    perturbs it by sqrt(gam[i, s]) * noise[i, s] / ||noise[i, s]||_2. Returns
    (rank loss sum, constraint loss sum).
    """
    d = P.shape[1]
    S = noise.shape[1]
    loss = 0.0
    closs = 0.0
    delta = np.empty((S, d))
    cs = np.empty(S)
    for i in range(idx.shape[0]):
        e = idx[i]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[i], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        s_pos = _dot(P[u], Q[v]) + bu[u] + bi[v] + gb[0]
        s_neg = _dot(P[u], Q[j]) + bu[u] + bi[j] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)

        active = False
        ctot = 0.0
        if omega > 0.0:
            p_real = logistic(s_pos)
            sumdiff = 0.0
            for s in range(S):
                nrm = 0.0
                for c in range(d):
                    nrm += noise[i, s, c] * noise[i, s, c]
                nrm = math.sqrt(nrm)
                scale = 0.0 if nrm == 0.0 else math.sqrt(gam[i, s]) / nrm
                shift = 0.0
                for c in range(d):
                    delta[s, c] = scale * noise[i, s, c]
                    shift += delta[s, c] * Q[v, c]
                p_s = logistic(s_pos + shift)
                cs[s] = p_s
                sumdiff += abs(p_s - p_real)
            gap = sumdiff / S - eps1
            if gap > 0.0:
                closs += gap
                active = True
                sgn_sum = 0.0
                for s in range(S):
                    p_s = cs[s]
                    sign = 1.0 if p_s > p_real else (-1.0 if p_s < p_real else 0.0)
                    sgn_sum += sign
                    cs[s] = (omega / S) * sign * p_s * (1.0 - p_s)
                    ctot += cs[s]
                ctot += -(omega / S) * sgn_sum * p_real * (1.0 - p_real)

        pu_s = P[u].copy()
        qv_s = Q[v].copy()
        for c in range(d):
            pu = pu_s[c]
            qv = qv_s[c]
            qj = Q[j, c]
            P[u, c] -= lr * (g * (qv - qj) + l2 * pu)
            Q[v, c] -= lr * (g * pu + l2 * qv)
            Q[j, c] -= lr * (-g * pu + l2 * qj)
        bu[u] -= lr * (l2 * bu[u])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
        if active:
            for c in range(d):
                dsum = 0.0
                for s in range(S):
                    dsum += cs[s] * delta[s, c]
                P[u, c] -= lr * (ctot * qv_s[c])
                Q[v, c] -= lr * (ctot * pu_s[c] + dsum)
            bu[u] -= lr * ctot
            bi[v] -= lr * ctot
            gb[0] -= lr * ctot
    return loss, closs


@_jit
def attn_bpr_epoch(
    P, Q, bi, gb,
    ex_user, ex_item, hist_flat, hist_indptr,
    order, neg_u, elig_flat, elig_indptr,
    ipsw, inv_sqrt_d, lr, l2,
):
    """One pairwise epoch of the attention-pooling model. Returns summed rank loss."""
    d = P.shape[1]
    loss = 0.0
    for k in range(order.shape[0]):
        e = order[k]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[k], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        hist = hist_flat[hist_indptr[e]:hist_indptr[e + 1]]
        L = hist.shape[0]
        if L > 0:
            a, h = _attn_forward(Q, hist, inv_sqrt_d)
        else:
            a = np.zeros(0)
            h = np.zeros(d)
        s_pos = _dot(P[u], Q[v]) + _dot(h, Q[v]) + bi[v] + gb[0]
        s_neg = _dot(P[u], Q[j]) + _dot(h, Q[j]) + bi[j] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)

        pu_s = P[u].copy()
        qv_s = Q[v].copy()
        qj_s = Q[j].copy()
        rows = np.zeros((0, d))
        if L > 0:
            gh = np.empty(d)
            for c in range(d):
                gh[c] = g * (qv_s[c] - qj_s[c])
            rows = _attn_backward_rows(Q, hist, a, h, gh, inv_sqrt_d)
        for c in range(d):
            P[u, c] -= lr * (g * (qv_s[c] - qj_s[c]) + l2 * pu_s[c])
            Q[v, c] -= lr * (g * (pu_s[c] + h[c]) + l2 * qv_s[c])
            Q[j, c] -= lr * (-g * (pu_s[c] + h[c]) + l2 * qj_s[c])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
        if L > 0:
            for t in range(L):
                it = hist[t]
                for c in range(d):
                    Q[it, c] -= lr * rows[t, c]
    return loss


@_jit
def attn_discrete_epoch(
    P, Q, bi, gb,
    ex_user, ex_item, hist_flat, hist_indptr,
    cf_flat, cf_hist_indptr, cf_ex_indptr,
    order, neg_u, elig_flat, elig_indptr,
    ipsw, inv_sqrt_d, omega, eps, lr, l2, max_cf,
):
    """Attention-model epoch with the discrete counterfactual penalty.

    Counterfactual histories for example ``e`` live at indices
    cf_ex_indptr[e]..cf_ex_indptr[e+1] of the (cf_flat, cf_hist_indptr) ragged
    array. Returns (rank loss sum, constraint loss sum).
    """
    d = P.shape[1]
    loss = 0.0
    closs = 0.0
    p_buf = np.empty(max_cf)
    c_buf = np.empty(max_cf)
    for k in range(order.shape[0]):
        e = order[k]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[k], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        hist = hist_flat[hist_indptr[e]:hist_indptr[e + 1]]
        L = hist.shape[0]
        if L > 0:
            a, h = _attn_forward(Q, hist, inv_sqrt_d)
        else:
            a = np.zeros(0)
            h = np.zeros(d)
        pu_s = P[u].copy()
        qv_s = Q[v].copy()
        qj_s = Q[j].copy()
        s_pos = _dot(pu_s, qv_s) + _dot(h, qv_s) + bi[v] + gb[0]
        s_neg = _dot(pu_s, qj_s) + _dot(h, qj_s) + bi[j] + gb[0]
        base_uv = _dot(pu_s, qv_s) + bi[v] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)

        lo = cf_ex_indptr[e]
        nfc = cf_ex_indptr[e + 1] - lo
        active = False
        c_real = 0.0
        c_sum = 0.0
        if omega > 0.0 and nfc > 0:
            p_real = logistic(s_pos)
            sumdiff = 0.0
            for i in range(nfc):
                ch = cf_flat[cf_hist_indptr[lo + i]:cf_hist_indptr[lo + i + 1]]
                if ch.shape[0] > 0:
                    _, hi = _attn_forward(Q, ch, inv_sqrt_d)
                    s_i = base_uv + _dot(hi, qv_s)
                else:
                    s_i = base_uv
                p_buf[i] = logistic(s_i)
                sumdiff += abs(p_buf[i] - p_real)
            gap = sumdiff - eps
            if gap > 0.0:
                closs += gap
                active = True
                sgn_sum = 0.0
                for i in range(nfc):
                    p_i = p_buf[i]
                    sign = 1.0 if p_i > p_real else (-1.0 if p_i < p_real else 0.0)
                    sgn_sum += sign
                    c_buf[i] = omega * sign * p_i * (1.0 - p_i)
                    c_sum += c_buf[i]
                c_real = -omega * sgn_sum * p_real * (1.0 - p_real)

        # every gradient below must see pre-update parameters, so collect the
        # penalty rows before applying any update
        qv_grad = np.zeros(d)
        rrows = np.zeros((0, d))
        cf_rows = np.zeros((0, d))
        row0 = np.int64(0)
        if active:
            for c in range(d):
                qv_grad[c] += c_real * (pu_s[c] + h[c])
            if L > 0:
                ghr = np.empty(d)
                for c in range(d):
                    ghr[c] = c_real * qv_s[c]
                rrows = _attn_backward_rows(Q, hist, a, h, ghr, inv_sqrt_d)
            tot_len = cf_hist_indptr[lo + nfc] - cf_hist_indptr[lo]
            cf_rows = np.zeros((tot_len, d))
            row0 = cf_hist_indptr[lo]
            for i in range(nfc):
                ch = cf_flat[cf_hist_indptr[lo + i]:cf_hist_indptr[lo + i + 1]]
                if ch.shape[0] == 0:
                    for c in range(d):
                        qv_grad[c] += c_buf[i] * pu_s[c]
                    continue
                ai, hi = _attn_forward(Q, ch, inv_sqrt_d)
                for c in range(d):
                    qv_grad[c] += c_buf[i] * (pu_s[c] + hi[c])
                ghc = np.empty(d)
                for c in range(d):
                    ghc[c] = c_buf[i] * qv_s[c]
                ri = _attn_backward_rows(Q, ch, ai, hi, ghc, inv_sqrt_d)
                off = cf_hist_indptr[lo + i] - row0
                for t in range(ch.shape[0]):
                    for c in range(d):
                        cf_rows[off + t, c] = ri[t, c]

        # plain ranking update (identical to attn_bpr_epoch when inactive)
        rows = np.zeros((0, d))
        if L > 0:
            gh = np.empty(d)
            for c in range(d):
                gh[c] = g * (qv_s[c] - qj_s[c])
            rows = _attn_backward_rows(Q, hist, a, h, gh, inv_sqrt_d)
        for c in range(d):
            P[u, c] -= lr * (g * (qv_s[c] - qj_s[c]) + l2 * pu_s[c])
            Q[v, c] -= lr * (g * (pu_s[c] + h[c]) + l2 * qv_s[c])
            Q[j, c] -= lr * (-g * (pu_s[c] + h[c]) + l2 * qj_s[c])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
        if L > 0:
            for t in range(L):
                it = hist[t]
                for c in range(d):
                    Q[it, c] -= lr * rows[t, c]

        if active:
            ctot = c_real + c_sum
            for c in range(d):
                P[u, c] -= lr * (ctot * qv_s[c])
                Q[v, c] -= lr * qv_grad[c]
            bi[v] -= lr * ctot
            gb[0] -= lr * ctot
            if L > 0:
                for t in range(L):
                    it = hist[t]
                    for c in range(d):
                        Q[it, c] -= lr * rrows[t, c]
            for i in range(nfc):
                ch = cf_flat[cf_hist_indptr[lo + i]:cf_hist_indptr[lo + i + 1]]
                off = cf_hist_indptr[lo + i] - row0
                for t in range(ch.shape[0]):
                    it = ch[t]
                    for c in range(d):
                        Q[it, c] -= lr * cf_rows[off + t, c]
    return loss, closs


@_jit
def attn_continuous_chunk(
    P, Q, bi, gb,
    ex_user, ex_item, hist_flat, hist_indptr,
    idx, neg_u, noise, gam,
    elig_flat, elig_indptr, ipsw,
    inv_sqrt_d, omega, eps1, lr, l2,
):
    """Attention-model steps for one chunk with the Monte Carlo penalty.

    Sample ``s`` perturbs the pooled history vector, shifting the score by
    dot(delta_s, Q[v]). Returns (rank loss sum, constraint loss sum).
    """
    d = P.shape[1]
    S = noise.shape[1]
    loss = 0.0
    closs = 0.0
    delta = np.empty((S, d))
    cs = np.empty(S)
    for i in range(idx.shape[0]):
        e = idx[i]
        u = ex_user[e]
        v = ex_item[e]
        j = _draw_negative(u, neg_u[i], elig_flat, elig_indptr)
        if j < 0:
            continue
        w = ipsw[e]
        hist = hist_flat[hist_indptr[e]:hist_indptr[e + 1]]
        L = hist.shape[0]
        if L > 0:
            a, h = _attn_forward(Q, hist, inv_sqrt_d)
        else:
            a = np.zeros(0)
            h = np.zeros(d)
        pu_s = P[u].copy()
        qv_s = Q[v].copy()
        qj_s = Q[j].copy()
        s_pos = _dot(pu_s, qv_s) + _dot(h, qv_s) + bi[v] + gb[0]
        s_neg = _dot(pu_s, qj_s) + _dot(h, qj_s) + bi[j] + gb[0]
        sig = logistic(s_pos - s_neg)
        loss += -math.log(sig) * w
        g = w * (sig - 1.0)

        active = False
        ctot = 0.0
        if omega > 0.0:
            p_real = logistic(s_pos)
            sumdiff = 0.0
            for s in range(S):
                nrm = 0.0
                for c in range(d):
                    nrm += noise[i, s, c] * noise[i, s, c]
                nrm = math.sqrt(nrm)
                scale = 0.0 if nrm == 0.0 else math.sqrt(gam[i, s]) / nrm
                shift = 0.0
                for c in range(d):
                    delta[s, c] = scale * noise[i, s, c]
                    shift += delta[s, c] * qv_s[c]
                p_s = logistic(s_pos + shift)
                cs[s] = p_s
                sumdiff += abs(p_s - p_real)
            gap = sumdiff / S - eps1
            if gap > 0.0:
                closs += gap
                active = True
                sgn_sum = 0.0
                for s in range(S):
                    p_s = cs[s]
                    sign = 1.0 if p_s > p_real else (-1.0 if p_s < p_real else 0.0)
                    sgn_sum += sign
                    cs[s] = (omega / S) * sign * p_s * (1.0 - p_s)
                    ctot += cs[s]
                ctot += -(omega / S) * sgn_sum * p_real * (1.0 - p_real)

        rrows = np.zeros((0, d))
        if active and L > 0:
            ghr = np.empty(d)
            for c in range(d):
                ghr[c] = ctot * qv_s[c]
            rrows = _attn_backward_rows(Q, hist, a, h, ghr, inv_sqrt_d)
        rows = np.zeros((0, d))
        if L > 0:
            gh = np.empty(d)
            for c in range(d):
                gh[c] = g * (qv_s[c] - qj_s[c])
            rows = _attn_backward_rows(Q, hist, a, h, gh, inv_sqrt_d)
        for c in range(d):
            P[u, c] -= lr * (g * (qv_s[c] - qj_s[c]) + l2 * pu_s[c])
            Q[v, c] -= lr * (g * (pu_s[c] + h[c]) + l2 * qv_s[c])
            Q[j, c] -= lr * (-g * (pu_s[c] + h[c]) + l2 * qj_s[c])
        bi[v] -= lr * (g + l2 * bi[v])
        bi[j] -= lr * (-g + l2 * bi[j])
        if L > 0:
            for t in range(L):
                it = hist[t]
                for c in range(d):
                    Q[it, c] -= lr * rows[t, c]

        if active:
            for c in range(d):
                dsum = 0.0
                for s in range(S):
                    dsum += cs[s] * delta[s, c]
                P[u, c] -= lr * (ctot * qv_s[c])
                Q[v, c] -= lr * (ctot * (pu_s[c] + h[c]) + dsum)
            bi[v] -= lr * ctot
            gb[0] -= lr * ctot
            if L > 0:
                for t in range(L):
                    it = hist[t]
                    for c in range(d):
                        Q[it, c] -= lr * rrows[t, c]
    return loss, closs


@_jit
def attn_select_ranks(
    P, Q, bi, gb,
    ex_user, ex_item, cands,
    cf_flat, cf_hist_indptr, cf_ex_indptr,
    inv_sqrt_d,
):
    """Rank of each example's target among its candidates, per counterfactual history.

    ``cands`` is (num_examples, n_cand) with the target as the last column.
    Returns an int64 array aligned with the counterfactual index (ties broken
    by ascending item id, matching the reference top-k).
    """
    n_ex = ex_user.shape[0]
    n_cand = cands.shape[1]
    total_cf = cf_ex_indptr[n_ex]
    ranks = np.zeros(total_cf, dtype=np.int64)
    ubase = np.empty(n_cand)
    hdot = np.empty(n_cand)
    for e in range(n_ex):
        lo = cf_ex_indptr[e]
        hi_ = cf_ex_indptr[e + 1]
        if hi_ == lo:
            continue
        u = ex_user[e]
        v = ex_item[e]
        for c in range(n_cand):
            it = cands[e, c]
            ubase[c] = _dot(P[u], Q[it]) + bi[it] + gb[0]
        for ci in range(lo, hi_):
            ch = cf_flat[cf_hist_indptr[ci]:cf_hist_indptr[ci + 1]]
            if ch.shape[0] > 0:
                _, hvec = _attn_forward(Q, ch, inv_sqrt_d)
                for c in range(n_cand):
                    hdot[c] = _dot(hvec, Q[cands[e, c]])
            else:
                for c in range(n_cand):
                    hdot[c] = 0.0
            s_t = ubase[n_cand - 1] + hdot[n_cand - 1]
            rank = 1
            for c in range(n_cand - 1):
                s_c = ubase[c] + hdot[c]
                if s_c > s_t or (s_c == s_t and cands[e, c] < v):
                    rank += 1
            ranks[ci] = rank
    return ranks
