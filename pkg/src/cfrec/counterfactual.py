"""Counterfactual history machinery.

Generation edits a real history with one of four heuristic rules; selection
keeps only the edits under which the deployed model would still recommend the
same target (target inside the model's top-k over a fixed 101-item candidate
set); the continuous variant perturbs a history embedding inside a ball of
squared radius ``epsilon2``. ``do_expectation`` combines real and
counterfactual probabilities under a piecewise-uniform history distribution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from cfrec.dataset import History
from cfrec.errors import InvalidInputError
from cfrec.seeding import spawn_rng

DEFAULT_GENERATION_LIMIT = 20
DEFAULT_REPLACEMENTS_PER_POSITION = 5
DEFAULT_MAX_SELECTED = 5
DEFAULT_EVAL_NEGATIVES = 100


class HeuristicRule(enum.Enum):
    KEEP_ONE = "k1"
    DELETE_ONE = "d1"
    REPLACE_ONE_RANDOM = "r1r"
    REPLACE_ONE_NEAREST = "r1n"


RULE_NAMES = tuple(r.value for r in HeuristicRule)


def parse_rule(name: str) -> HeuristicRule:
    try:
        return HeuristicRule(str(name).lower())
    except ValueError:
        raise InvalidInputError(
            f"unknown heuristic rule {name!r}; valid rules: {', '.join(RULE_NAMES)}"
        ) from None


@dataclass(frozen=True)
class CounterfactualBatch:
    """Selected counterfactuals for one training example."""

    real_history: History | None
    counterfactuals: tuple
    target_item: int
    n: int

    def __post_init__(self):
        if self.n != len(self.counterfactuals):
            raise InvalidInputError("n must equal the number of counterfactuals")


@dataclass(frozen=True)
class DoDistribution:
    """Piecewise-uniform P(history | user): alpha on the real history, beta on each edit."""

    alpha: float
    beta: float
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise InvalidInputError("n must be >= 0")
        if self.n == 0:
            if abs(self.alpha - 1.0) > 1e-12:
                raise InvalidInputError("with no counterfactuals alpha must be 1")
            return
        if abs(self.alpha + self.n * self.beta - 1.0) > 1e-12:
            raise InvalidInputError("alpha + n*beta must equal 1")
        if not self.alpha > self.beta > 0.0:
            raise InvalidInputError("need alpha > beta > 0")

    @classmethod
    def piecewise_uniform(cls, n, alpha=None):
        """Split mass 1 as (alpha, beta, ..., beta). Default alpha is 0.5,
        bumped to 2/3 at n=1 where 0.5 would tie with beta."""
        if n == 0:
            return cls(1.0, 0.0, 0)
        if alpha is None:
            alpha = 0.5 if n != 1 else 2.0 / 3.0
        return cls(float(alpha), (1.0 - float(alpha)) / n, int(n))


def _ids(history):
    if isinstance(history, History):
        return tuple(history.items)
    return tuple(int(i) for i in history)


def generate(rule, history, num_items, model=None, seed=0,
             limit=DEFAULT_GENERATION_LIMIT,
             replacements_per_position=DEFAULT_REPLACEMENTS_PER_POSITION,
             nn_map=None):
    """Candidate counterfactual histories for one real history.

    Keep-one yields one singleton per position, delete-one drops each position
    in turn (empty when the history has a single item), replace-one swaps each
    position for either seeded-uniform non-history items or the cosine-nearest
    neighbour under the model's current item embeddings. More than ``limit``
    candidates are thinned by seeded uniform subsampling.

    ``nn_map`` optionally carries a precomputed :func:`nearest_neighbor_map`
    so bulk callers avoid one catalog scan per position.
    """
    rule = rule if isinstance(rule, HeuristicRule) else parse_rule(rule)
    items = _ids(history)
    if limit < 1:
        raise InvalidInputError("limit must be >= 1")
    if not items:
        return []
    out = []
    if rule is HeuristicRule.KEEP_ONE:
        out = [History((it,)) for it in items]
    elif rule is HeuristicRule.DELETE_ONE:
        if len(items) > 1:
            out = [History(items[:t] + items[t + 1:]) for t in range(len(items))]
    elif rule is HeuristicRule.REPLACE_ONE_RANDOM:
        rng = spawn_rng(seed, "replace-random")
        pool = np.setdiff1d(np.arange(num_items, dtype=np.int64),
                            np.asarray(items, dtype=np.int64))
        if pool.size:
            for t in range(len(items)):
                picks = rng.choice(pool, size=min(replacements_per_position, pool.size),
                                   replace=False)
                for r in picks:
                    out.append(History(items[:t] + (int(r),) + items[t + 1:]))
    elif rule is HeuristicRule.REPLACE_ONE_NEAREST:
        if nn_map is None:
            if model is None:
                raise InvalidInputError("replace-one-nearest needs a model or nn_map")
            for t in range(len(items)):
                nn = nearest_neighbor(model.item_embeddings, items[t])
                out.append(History(items[:t] + (nn,) + items[t + 1:]))
        else:
            for t in range(len(items)):
                out.append(History(items[:t] + (int(nn_map[items[t]]),) + items[t + 1:]))
    if len(out) > limit:
        rng = spawn_rng(seed, "generation-limit")
        keep = np.sort(rng.choice(len(out), size=limit, replace=False))
        out = [out[i] for i in keep]
    return out


def nearest_neighbor(item_embeddings, item):
    """Cosine-nearest other item; ties go to the lower item id."""
    emb = np.asarray(item_embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    norms[norms == 0.0] = 1.0
    sims = (emb @ emb[item]) / (norms * norms[item])
    sims[item] = -np.inf
    return int(np.argmax(sims))


def nearest_neighbor_map(item_embeddings):
    """Cosine-nearest other item for every catalog item (self excluded)."""
    emb = np.asarray(item_embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    norms[norms == 0.0] = 1.0
    unit = emb / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    return np.argmax(sims, axis=1).astype(np.int64)


def select(model, dataset, user, candidates, target_item, k, seed, *,
           real_history=None, max_selected=DEFAULT_MAX_SELECTED,
           num_negatives=DEFAULT_EVAL_NEGATIVES) -> CounterfactualBatch:
    """Keep the candidate histories consistent with recommending the target.

    One fixed candidate set of ``num_negatives`` seeded negatives plus the
    target serves every candidate history of this example; a history is kept
    when the target lands in the model's top-k over that set. At most
    ``max_selected`` survivors are kept, in candidate order.
    """
    if k > num_negatives + 1:
        raise InvalidInputError(f"k={k} exceeds the {num_negatives + 1}-item candidate set")
    negatives = dataset.sample_negatives(user, target_item, num_negatives, seed)
    cand_set = [int(i) for i in negatives] + [int(target_item)]
    kept = []
    for hist in candidates:
        if int(target_item) in model.top_k(user, hist, cand_set, k):
            kept.append(hist if isinstance(hist, History) else History(_ids(hist)))
            if len(kept) >= max_selected:
                break
    return CounterfactualBatch(real_history, tuple(kept), int(target_item), len(kept))


def sample_continuous(history_embedding, epsilon2, count, seed):
    """``count`` perturbed embeddings with squared displacement <= epsilon2.

    Each sample is x + sqrt(gamma) * theta / ||theta|| with theta standard
    Gaussian and gamma uniform on [0, epsilon2], so ||x' - x||^2 = gamma.
    """
    if epsilon2 < 0:
        raise InvalidInputError("epsilon2 must be >= 0")
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    x = np.asarray(history_embedding, dtype=np.float64)
    rng = spawn_rng(seed, "continuous-noise")
    out = np.empty((count, x.size))
    for s in range(count):
        theta = rng.standard_normal(x.size)
        nrm = np.linalg.norm(theta)
        while nrm == 0.0:  # probability zero, guarded anyway
            theta = rng.standard_normal(x.size)
            nrm = np.linalg.norm(theta)
        gamma = rng.uniform(0.0, epsilon2)
        out[s] = x + np.sqrt(gamma) * theta / nrm
    return out


def do_expectation(dist: DoDistribution, p_real, p_cf) -> float:
    """alpha * p_real + beta * sum(p_cf): the intervention-adjusted probability."""
    p_cf = [float(p) for p in p_cf]
    if len(p_cf) != dist.n:
        raise InvalidInputError(f"expected {dist.n} counterfactual probabilities, got {len(p_cf)}")
    for p in [float(p_real)] + p_cf:
        if not 0.0 <= p <= 1.0:
            raise InvalidInputError(f"probability {p} outside [0, 1]")
    return dist.alpha * float(p_real) + dist.beta * sum(p_cf)


def save_counterfactual_cache(path, records):
    """One line per kept counterfactual: user, target, real history, edited history."""
    with open(path, "w", encoding="utf-8") as fh:
        for user, target, real, cf in records:
            fh.write(f"{int(user)}\t{int(target)}\t"
                     f"{','.join(str(i) for i in _ids(real))}\t"
                     f"{','.join(str(i) for i in _ids(cf))}\n")


def load_counterfactual_cache(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            user, target, real, cf = line.split("\t")
            parse = lambda s: History(tuple(int(i) for i in s.split(",")) if s else ())
            records.append((int(user), int(target), parse(real), parse(cf)))
    return records
