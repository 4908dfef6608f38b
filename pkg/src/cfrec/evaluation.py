"""Ranking evaluation: 101-candidate protocol, nDCG@K, Hit@1, improvements.

Each evaluated user ranks their held-out positive against 100 fixed seeded
negatives; metrics average over users. Negative sets are pure functions of
(dataset, user, target, seed), so two models evaluated with the same seed see
identical candidate lists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from cfrec.errors import InvalidInputError

EVAL_NEGATIVES = 100
NDCG_K = 10


@dataclass
class MetricsReport:
    ndcg_at_10: float
    hit_at_1: float
    num_users_evaluated: int
    per_user_ranks: dict = field(default_factory=dict)


def rank_target(model, user, history, target, negatives) -> int:
    """1-based rank of the target among target + negatives.

    Ties count against the target when the tied candidate has a lower item id,
    matching top-k ordering.
    """
    negatives = np.asarray(negatives, dtype=np.int64)
    if np.any(negatives == target):
        raise InvalidInputError("target present in its own negative set")
    cands = np.concatenate([negatives, [target]])
    scores = model.score_candidates(user, history, cands)
    s_t = scores[-1]
    neg_scores = scores[:-1]
    above = int(np.sum(neg_scores > s_t))
    tied_lower = int(np.sum((neg_scores == s_t) & (negatives < target)))
    return 1 + above + tied_lower


def ndcg_at_k(rank, k) -> float:
    """Position-discounted gain with a single relevant item (IDCG = 1)."""
    if rank < 1 or k < 1:
        raise InvalidInputError("rank and k must be >= 1")
    if rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def eval_targets(dataset, partition):
    """(user, target) pairs: each user's first positive in the partition."""
    if partition == "validation":
        rows = dataset.validation
    elif partition == "test":
        rows = dataset.test
    else:
        raise InvalidInputError(f"partition must be validation or test, got {partition!r}")
    seen = set()
    out = []
    for it in rows:
        if it.label == 1 and it.user_id not in seen:
            seen.add(it.user_id)
            out.append((it.user_id, it.item_id))
    return out


def evaluate(model, dataset, partition, seed, *, num_negatives=EVAL_NEGATIVES) -> MetricsReport:
    """Mean nDCG@10 and Hit@1 over the partition's evaluable users."""
    targets = eval_targets(dataset, partition)
    if not targets:
        raise InvalidInputError(f"no evaluable users in {partition}")
    ranks = {}
    ndcg_sum = 0.0
    hits = 0
    for user, target in targets:
        negatives = dataset.sample_negatives(user, target, num_negatives, seed)
        history = dataset.eval_history(user)
        r = rank_target(model, user, history, target, negatives)
        ranks[user] = r
        ndcg_sum += ndcg_at_k(r, NDCG_K)
        hits += 1 if r == 1 else 0
    n = len(targets)
    return MetricsReport(ndcg_sum / n, hits / n, n, ranks)


def improvement(new, old):
    """Relative change in percent; None when the base value is not positive."""
    if old <= 0:
        return None
    return 100.0 * (new - old) / old


def write_metrics(report: MetricsReport, path, *, model, partition, seed):
    doc = {
        "ndcg@10": report.ndcg_at_10,
        "hit@1": report.hit_at_1,
        "num_users": report.num_users_evaluated,
        "model": model,
        "partition": partition,
        "seed": int(seed),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")
    return doc


def write_report_csv(path, rows):
    """Comparison table: variant, metrics, and percent improvements over a base row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant,ndcg@10,hit@1,imp_ndcg_pct,imp_hit_pct\n")
        for variant, ndcg, hit, imp_n, imp_h in rows:
            imp_n = "" if imp_n is None else f"{imp_n:.4f}"
            imp_h = "" if imp_h is None else f"{imp_h:.4f}"
            fh.write(f"{variant},{ndcg},{hit},{imp_n},{imp_h}\n")
