"""Timing comparison of the jitted kernels against their interpreted fallback.

The fallback is the same function body executed by CPython (what you get with
CFREC_DISABLE_NUMBA=1), reached here through the dispatcher's ``py_func``.

    python benchmarks/bench_kernels.py [--users N] [--items N] [--examples N]
"""

import argparse
import math
import time

import numpy as np

from cfrec import kernels


def make_workload(rng, users, items, examples, d):
    P = rng.normal(0, 0.1, (users, d))
    Q = rng.normal(0, 0.1, (items, d))
    bu = np.zeros(users)
    bi = np.zeros(items)
    ex_user = rng.integers(0, users, examples).astype(np.int64)
    ex_item = rng.integers(0, items, examples).astype(np.int64)
    order = rng.permutation(examples).astype(np.int64)
    neg_u = rng.random(examples)
    elig_flat = np.tile(np.arange(items, dtype=np.int64), users)
    elig_indptr = np.arange(0, (users + 1) * items, items, dtype=np.int64)
    lens = rng.integers(1, 11, examples)
    hist_indptr = np.zeros(examples + 1, dtype=np.int64)
    np.cumsum(lens, out=hist_indptr[1:])
    hist_flat = rng.integers(0, items, int(hist_indptr[-1])).astype(np.int64)
    ipsw = np.ones(examples)
    return dict(P=P, Q=Q, bu=bu, bi=bi, ex_user=ex_user, ex_item=ex_item,
                order=order, neg_u=neg_u, elig_flat=elig_flat,
                elig_indptr=elig_indptr, hist_flat=hist_flat,
                hist_indptr=hist_indptr, ipsw=ipsw)


def time_call(fn, args, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--users", type=int, default=600)
    ap.add_argument("--items", type=int, default=1200)
    ap.add_argument("--examples", type=int, default=20000)
    ap.add_argument("--py-examples", type=int, default=2000,
                    help="smaller example count for the interpreted side")
    ap.add_argument("--d", type=int, default=64)
    args = ap.parse_args()

    if not kernels.USING_NUMBA:
        raise SystemExit("numba backend disabled; the comparison needs it enabled")

    rng = np.random.default_rng(0)
    d = args.d
    inv = 1.0 / math.sqrt(d)
    lr, l2 = 0.05, 1e-4
    print(f"workload: {args.users} users, {args.items} items, d={d}; "
          f"numba side runs {args.examples} examples, numpy side "
          f"{args.py_examples} (times below are per full call, scaled to "
          f"ms per 1000 examples)")

    def scaled(name, fn, arg_fn, n_jit, n_py):
        jit_t = time_call(fn, arg_fn(n_jit), 3) / n_jit * 1000
        py_t = time_call(fn.py_func, arg_fn(n_py), 1) / n_py * 1000
        print(f"{name:24s} numba {jit_t * 1e3:9.2f} ms/1k   "
              f"numpy {py_t * 1e3:11.2f} ms/1k   speedup {py_t / jit_t:8.1f}x")

    def mf_args(n):
        w = make_workload(np.random.default_rng(1), args.users, args.items, n, d)
        return (w["P"].copy(), w["Q"].copy(), w["bu"].copy(), w["bi"].copy(),
                np.zeros(1), w["ex_user"], w["ex_item"], w["order"], w["neg_u"],
                w["elig_flat"], w["elig_indptr"], w["ipsw"], lr, l2)

    def attn_args(n):
        w = make_workload(np.random.default_rng(2), args.users, args.items, n, d)
        return (w["P"].copy(), w["Q"].copy(), w["bi"].copy(), np.zeros(1),
                w["ex_user"], w["ex_item"], w["hist_flat"], w["hist_indptr"],
                w["order"], w["neg_u"], w["elig_flat"], w["elig_indptr"],
                w["ipsw"], inv, lr, l2)

    def mf_cont_args(n):
        w = make_workload(np.random.default_rng(3), args.users, args.items, n, d)
        rng2 = np.random.default_rng(4)
        noise = rng2.standard_normal((n, 10, d))
        gam = rng2.uniform(0, 1.0, (n, 10))
        return (w["P"].copy(), w["Q"].copy(), w["bu"].copy(), w["bi"].copy(),
                np.zeros(1), w["ex_user"], w["ex_item"], w["order"], w["neg_u"],
                noise, gam, w["elig_flat"], w["elig_indptr"], w["ipsw"],
                0.5, 0.0, lr, l2)

    # trigger compilation outside the timed region
    kernels.mf_bpr_epoch(*mf_args(16))
    kernels.attn_bpr_epoch(*attn_args(16))
    kernels.mf_continuous_chunk(*mf_cont_args(16))

    scaled("mf_bpr_epoch", kernels.mf_bpr_epoch, mf_args,
           args.examples, args.py_examples)
    scaled("attn_bpr_epoch", kernels.attn_bpr_epoch, attn_args,
           args.examples, args.py_examples)
    scaled("mf_continuous_chunk", kernels.mf_continuous_chunk, mf_cont_args,
           args.examples // 2, args.py_examples // 2)


if __name__ == "__main__":
    main()
