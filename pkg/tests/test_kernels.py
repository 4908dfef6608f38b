"""The fused training kernels are checked against step-by-step recomputation
through the reference model gradients, and the numba path against its own
interpreted fallback."""

import math

import numpy as np
import pytest

from cfrec import kernels
from cfrec.dataset import History
from cfrec.models import ScoreRequest, init_model


def _pack(model):
    gb = np.array([model.global_bias])
    if model.model_type == "mf":
        return (model.user_embeddings, model.item_embeddings, model.user_bias,
                model.item_bias, gb)
    return (model.user_embeddings, model.item_embeddings, model.item_bias, gb)


def _single_example(model, u, v, j, num_items):
    """Arrays for a one-example epoch where the drawn negative is j."""
    ex_user = np.array([u], dtype=np.int64)
    ex_item = np.array([v], dtype=np.int64)
    order = np.zeros(1, dtype=np.int64)
    elig_flat = np.arange(num_items, dtype=np.int64)
    elig_indptr = np.zeros(model.num_users + 1, dtype=np.int64)
    elig_indptr[u + 1:] = num_items
    neg_u = np.array([(j + 0.5) / num_items])
    return ex_user, ex_item, order, neg_u, elig_flat, elig_indptr


class Ref:
    """Parameter deltas recomputed from the reference analytic gradients."""

    def __init__(self, model):
        self.model = model
        self.dP = np.zeros_like(model.user_embeddings)
        self.dQ = np.zeros_like(model.item_embeddings)
        self.dbu = (np.zeros_like(model.user_bias)
                    if model.model_type == "mf" else None)
        self.dbi = np.zeros_like(model.item_bias)
        self.dgb = 0.0

    def add(self, acc, coef):
        for u, vec in acc.user_emb.items():
            self.dP[u] += coef * vec
        for i, vec in acc.item_emb.items():
            self.dQ[i] += coef * vec
        for u, g in acc.user_bias.items():
            if self.dbu is not None:
                self.dbu[u] += coef * g
        for i, g in acc.item_bias.items():
            self.dbi[i] += coef * g
        self.dgb += coef * acc.global_bias

    def add_l2(self, u, v, j, l2):
        m = self.model
        self.dP[u] += l2 * m.user_embeddings[u]
        self.dQ[v] += l2 * m.item_embeddings[v]
        self.dQ[j] += l2 * m.item_embeddings[j]
        if self.dbu is not None:
            self.dbu[u] += l2 * m.user_bias[u]
        self.dbi[v] += l2 * m.item_bias[v]
        self.dbi[j] += l2 * m.item_bias[j]

    def expected(self, lr):
        m = self.model
        out = [m.user_embeddings - lr * self.dP, m.item_embeddings - lr * self.dQ]
        if self.dbu is not None:
            out.append(m.user_bias - lr * self.dbu)
        out.append(m.item_bias - lr * self.dbi)
        out.append(m.global_bias - lr * self.dgb)
        return out


def _bpr_core(model, u, v, j, hist, w):
    s_pos = model.score(u, hist, v)
    s_neg = model.score(u, hist, j)
    sig = kernels.logistic(s_pos - s_neg)
    return s_pos, w * (sig - 1.0), -math.log(sig) * w


def _assert_model_close(model, expected, has_user_bias):
    got = [model.user_embeddings, model.item_embeddings]
    if has_user_bias:
        got.append(model.user_bias)
    got.append(model.item_bias)
    got.append(model.global_bias)
    for g, e in zip(got, expected):
        assert np.allclose(g, e, rtol=1e-9, atol=1e-13)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mf_bpr_step_matches_reference(seed):
    model = init_model("mf", 5, 30, d=6, seed=seed)
    rng = np.random.default_rng(seed)
    u, v, j = 2, int(rng.integers(0, 30)), int(rng.integers(0, 30))
    if j == v:
        j = (j + 1) % 30
    w, lr, l2 = 1.7, 0.05, 1e-3
    ref = Ref(model)
    _, g, _ = _bpr_core(model, u, v, j, None, w)
    ref.add(model.grad(ScoreRequest(u, v)), g)
    ref.add(model.grad(ScoreRequest(u, j)), -g)
    # the pairwise loss cancels user and global bias gradients exactly
    ref.dbu[u] = 0.0
    ref.dgb = 0.0
    ref.add_l2(u, v, j, l2)
    expected = ref.expected(lr)

    arrs = _single_example(model, u, v, j, 30)
    kernels.mf_bpr_epoch(*_pack(model), *arrs, np.full(1, w), lr, l2)
    model.global_bias = float(_pack(model)[-1][0])  # unchanged anyway
    _assert_model_close(model, expected, True)


@pytest.mark.parametrize("hist_items", [(), (4, 9), (3, 3, 11, 7)])
def test_attn_bpr_step_matches_reference(hist_items):
    model = init_model("attnseq", 5, 30, d=6, seed=11)
    u, v, j = 1, 8, 17
    hist = History(hist_items)
    w, lr, l2 = 1.0, 0.07, 5e-4

    # per-example histories live in flat arrays
    ref = Ref(model)
    _, g, _ = _bpr_core(model, u, v, j, hist, w)
    ref.add(model.grad(ScoreRequest(u, v, history=hist)), g)
    ref.add(model.grad(ScoreRequest(u, j, history=hist)), -g)
    ref.dgb = 0.0
    m = model
    ref.dP[u] += l2 * m.user_embeddings[u]
    ref.dQ[v] += l2 * m.item_embeddings[v]
    ref.dQ[j] += l2 * m.item_embeddings[j]
    ref.dbi[v] += l2 * m.item_bias[v]
    ref.dbi[j] += l2 * m.item_bias[j]
    expected = ref.expected(lr)

    ex_user, ex_item, order, neg_u, ef, ei = _single_example(model, u, v, j, 30)
    hist_flat = np.array(hist_items, dtype=np.int64)
    hist_indptr = np.array([0, len(hist_items)], dtype=np.int64)
    gb = np.array([model.global_bias])
    kernels.attn_bpr_epoch(model.user_embeddings, model.item_embeddings,
                           model.item_bias, gb, ex_user, ex_item,
                           hist_flat, hist_indptr, order, neg_u, ef, ei,
                           np.ones(1), 1.0 / math.sqrt(6), lr, l2)
    model.global_bias = float(gb[0])
    _assert_model_close(model, expected, False)


def test_mf_discrete_step_matches_reference():
    model = init_model("mf", 5, 30, d=6, seed=3)
    u, v, j = 0, 4, 22
    w, lr, l2, omega, eps = 1.0, 0.03, 1e-3, 0.8, 0.05
    p_clone = 0.92

    s_pos, g, _ = _bpr_core(model, u, v, j, None, w)
    p_real = kernels.logistic(s_pos)
    gap = abs(p_clone - p_real) - eps
    assert gap > 0  # this case must exercise the active hinge
    sign = 1.0 if p_real > p_clone else -1.0
    ct = omega * sign * p_real * (1.0 - p_real)

    ref = Ref(model)
    ref.add(model.grad(ScoreRequest(u, v)), g)
    ref.add(model.grad(ScoreRequest(u, j)), -g)
    ref.dbu[u] = 0.0
    ref.dgb = 0.0
    ref.add(model.grad(ScoreRequest(u, v)), ct)
    ref.add_l2(u, v, j, l2)
    expected = ref.expected(lr)

    arrs = _single_example(model, u, v, j, 30)
    gb = np.array([model.global_bias])
    loss, closs = kernels.mf_discrete_epoch(
        model.user_embeddings, model.item_embeddings, model.user_bias,
        model.item_bias, gb, *arrs, np.ones(1),
        np.array([p_clone]), omega, eps, lr, l2)
    model.global_bias = float(gb[0])
    assert closs == pytest.approx(gap)
    _assert_model_close(model, expected, True)


def test_attn_discrete_step_matches_reference():
    model = init_model("attnseq", 5, 30, d=6, seed=5)
    u, v, j = 3, 6, 19
    hist = History((2, 9, 14))
    cf_hists = [History((2, 9)), History((28,))]
    w, lr, l2, omega, eps = 1.0, 0.02, 1e-3, 0.6, 0.0

    s_pos, g, _ = _bpr_core(model, u, v, j, hist, w)
    p_real = kernels.logistic(s_pos)
    p_cf = [kernels.logistic(model.score(u, ch, v)) for ch in cf_hists]
    sumdiff = sum(abs(p - p_real) for p in p_cf)
    assert sumdiff > eps
    signs = [1.0 if p > p_real else -1.0 for p in p_cf]
    c_real = -omega * sum(signs) * p_real * (1.0 - p_real)
    c_cf = [omega * s * p * (1.0 - p) for s, p in zip(signs, p_cf)]

    ref = Ref(model)
    ref.add(model.grad(ScoreRequest(u, v, history=hist)), g)
    ref.add(model.grad(ScoreRequest(u, j, history=hist)), -g)
    ref.dgb = 0.0
    ref.add(model.grad(ScoreRequest(u, v, history=hist)), c_real)
    for ci, ch in zip(c_cf, cf_hists):
        ref.add(model.grad(ScoreRequest(u, v, history=ch)), ci)
    ref.dP[u] += l2 * model.user_embeddings[u]
    ref.dQ[v] += l2 * model.item_embeddings[v]
    ref.dQ[j] += l2 * model.item_embeddings[j]
    ref.dbi[v] += l2 * model.item_bias[v]
    ref.dbi[j] += l2 * model.item_bias[j]
    expected = ref.expected(lr)

    ex_user, ex_item, order, neg_u, ef, ei = _single_example(model, u, v, j, 30)
    hist_flat = np.asarray(hist.items, dtype=np.int64)
    hist_indptr = np.array([0, len(hist)], dtype=np.int64)
    cf_flat = np.concatenate([np.asarray(ch.items, dtype=np.int64) for ch in cf_hists])
    cf_hist_indptr = np.array([0, 2, 3], dtype=np.int64)
    cf_ex_indptr = np.array([0, 2], dtype=np.int64)
    gb = np.array([model.global_bias])
    loss, closs = kernels.attn_discrete_epoch(
        model.user_embeddings, model.item_embeddings, model.item_bias, gb,
        ex_user, ex_item, hist_flat, hist_indptr,
        cf_flat, cf_hist_indptr, cf_ex_indptr,
        order, neg_u, ef, ei, np.ones(1), 1.0 / math.sqrt(6),
        omega, eps, lr, l2, 2)
    model.global_bias = float(gb[0])
    assert closs == pytest.approx(sumdiff - eps)
    _assert_model_close(model, expected, False)


@pytest.mark.parametrize("model_type", ["mf", "attnseq"])
def test_continuous_step_matches_reference(model_type):
    d = 6
    model = init_model(model_type, 5, 30, d=d, seed=8)
    u, v, j = 2, 11, 25
    hist = History((7, 3)) if model_type == "attnseq" else None
    w, lr, l2, omega, eps1 = 1.0, 0.04, 1e-3, 0.9, 0.0
    S = 3
    rng = np.random.default_rng(123)
    noise = rng.standard_normal((1, S, d))
    gam = rng.uniform(0.0, 2.0, (1, S))

    s_pos, g, _ = _bpr_core(model, u, v, j, hist, w)
    p_real = kernels.logistic(s_pos)
    qv = model.item_embeddings[v].copy()
    deltas = []
    p_s = []
    for s in range(S):
        th = noise[0, s]
        delta = math.sqrt(gam[0, s]) * th / np.linalg.norm(th)
        deltas.append(delta)
        p_s.append(kernels.logistic(s_pos + float(delta @ qv)))
    sumdiff = sum(abs(p - p_real) for p in p_s)
    assert sumdiff / S > eps1
    signs = [1.0 if p > p_real else (-1.0 if p < p_real else 0.0) for p in p_s]
    c_s = [(omega / S) * sg * p * (1.0 - p) for sg, p in zip(signs, p_s)]
    c_real = -(omega / S) * sum(signs) * p_real * (1.0 - p_real)
    ctot = c_real + sum(c_s)

    ref = Ref(model)
    ref.add(model.grad(ScoreRequest(u, v, history=hist)), g)
    ref.add(model.grad(ScoreRequest(u, j, history=hist)), -g)
    if model_type == "mf":
        ref.dbu[u] = 0.0
    ref.dgb = 0.0
    # perturbed and real terms share every partial except the extra delta on Q[v]
    ref.add(model.grad(ScoreRequest(u, v, history=hist)), ctot)
    for ci, delta in zip(c_s, deltas):
        ref.dQ[v] += ci * delta
    ref.add_l2(u, v, j, l2) if model_type == "mf" else None
    if model_type == "attnseq":
        ref.dP[u] += l2 * model.user_embeddings[u]
        ref.dQ[v] += l2 * model.item_embeddings[v]
        ref.dQ[j] += l2 * model.item_embeddings[j]
        ref.dbi[v] += l2 * model.item_bias[v]
        ref.dbi[j] += l2 * model.item_bias[j]
    expected = ref.expected(lr)

    ex_user, ex_item, order, neg_u, ef, ei = _single_example(model, u, v, j, 30)
    gb = np.array([model.global_bias])
    if model_type == "mf":
        loss, closs = kernels.mf_continuous_chunk(
            model.user_embeddings, model.item_embeddings, model.user_bias,
            model.item_bias, gb, ex_user, ex_item, order, neg_u, noise, gam,
            ef, ei, np.ones(1), omega, eps1, lr, l2)
    else:
        hist_flat = np.asarray(hist.items, dtype=np.int64)
        hist_indptr = np.array([0, len(hist)], dtype=np.int64)
        loss, closs = kernels.attn_continuous_chunk(
            model.user_embeddings, model.item_embeddings, model.item_bias, gb,
            ex_user, ex_item, hist_flat, hist_indptr, order, neg_u, noise, gam,
            ef, ei, np.ones(1), 1.0 / math.sqrt(d), omega, eps1, lr, l2)
    model.global_bias = float(gb[0])
    assert closs == pytest.approx(sumdiff / S - eps1)
    _assert_model_close(model, expected, model_type == "mf")


def test_inactive_hinge_update_is_bitwise_base():
    """With a huge threshold the constrained kernels reduce to the plain step."""
    base = init_model("mf", 4, 40, d=5, seed=6)
    con = init_model("mf", 4, 40, d=5, seed=6)
    arrs = _single_example(base, 1, 3, 17, 40)
    gb_b = np.array([base.global_bias])
    gb_c = np.array([con.global_bias])
    kernels.mf_bpr_epoch(base.user_embeddings, base.item_embeddings, base.user_bias,
                         base.item_bias, gb_b, *arrs, np.ones(1), 0.05, 1e-3)
    kernels.mf_discrete_epoch(con.user_embeddings, con.item_embeddings, con.user_bias,
                              con.item_bias, gb_c, *arrs, np.ones(1),
                              np.array([0.5]), 1.0, 1e9, 0.05, 1e-3)
    assert np.array_equal(base.user_embeddings, con.user_embeddings)
    assert np.array_equal(base.item_embeddings, con.item_embeddings)
    assert np.array_equal(base.user_bias, con.user_bias)
    assert np.array_equal(base.item_bias, con.item_bias)
    assert gb_b[0] == gb_c[0]


def test_attn_inactive_hinge_update_is_bitwise_base():
    base = init_model("attnseq", 4, 40, d=5, seed=6)
    con = init_model("attnseq", 4, 40, d=5, seed=6)
    ex_user, ex_item, order, neg_u, ef, ei = _single_example(base, 1, 3, 17, 40)
    hist_flat = np.array([5, 9], dtype=np.int64)
    hist_indptr = np.array([0, 2], dtype=np.int64)
    cf_flat = np.array([5], dtype=np.int64)
    cf_hist_indptr = np.array([0, 1], dtype=np.int64)
    cf_ex_indptr = np.array([0, 1], dtype=np.int64)
    gb_b = np.array([0.0])
    gb_c = np.array([0.0])
    inv = 1.0 / math.sqrt(5)
    kernels.attn_bpr_epoch(base.user_embeddings, base.item_embeddings, base.item_bias,
                           gb_b, ex_user, ex_item, hist_flat, hist_indptr, order,
                           neg_u, ef, ei, np.ones(1), inv, 0.05, 1e-3)
    kernels.attn_discrete_epoch(con.user_embeddings, con.item_embeddings, con.item_bias,
                                gb_c, ex_user, ex_item, hist_flat, hist_indptr,
                                cf_flat, cf_hist_indptr, cf_ex_indptr, order, neg_u,
                                ef, ei, np.ones(1), inv, 1.0, 1e9, 0.05, 1e-3, 1)
    assert np.array_equal(base.user_embeddings, con.user_embeddings)
    assert np.array_equal(base.item_embeddings, con.item_embeddings)
    assert np.array_equal(base.item_bias, con.item_bias)
    assert gb_b[0] == gb_c[0]


@pytest.mark.skipif(not kernels.USING_NUMBA, reason="numba backend disabled")
def test_numba_and_fallback_agree():
    model_a = init_model("attnseq", 6, 25, d=4, seed=12)
    model_b = init_model("attnseq", 6, 25, d=4, seed=12)
    rng = np.random.default_rng(2)
    E = 10
    ex_user = rng.integers(0, 6, E).astype(np.int64)
    ex_item = rng.integers(0, 25, E).astype(np.int64)
    lens = rng.integers(0, 5, E)
    hist_indptr = np.zeros(E + 1, dtype=np.int64)
    np.cumsum(lens, out=hist_indptr[1:])
    hist_flat = rng.integers(0, 25, int(hist_indptr[-1])).astype(np.int64)
    order = rng.permutation(E).astype(np.int64)
    neg_u = rng.random(E)
    ef = np.tile(np.arange(25, dtype=np.int64), 6)
    ei = np.arange(0, 7 * 25, 25, dtype=np.int64)
    gb_a = np.zeros(1)
    gb_b = np.zeros(1)
    inv = 0.5
    args_a = (model_a.user_embeddings, model_a.item_embeddings, model_a.item_bias,
              gb_a, ex_user, ex_item, hist_flat, hist_indptr, order, neg_u, ef, ei,
              np.ones(E), inv, 0.05, 1e-3)
    args_b = (model_b.user_embeddings, model_b.item_embeddings, model_b.item_bias,
              gb_b, ex_user, ex_item, hist_flat, hist_indptr, order, neg_u, ef, ei,
              np.ones(E), inv, 0.05, 1e-3)
    loss_jit = kernels.attn_bpr_epoch(*args_a)
    loss_py = kernels.attn_bpr_epoch.py_func(*args_b)
    assert loss_jit == pytest.approx(loss_py, rel=1e-12)
    assert np.allclose(model_a.item_embeddings, model_b.item_embeddings, rtol=1e-12)
    assert np.allclose(model_a.user_embeddings, model_b.user_embeddings, rtol=1e-12)
