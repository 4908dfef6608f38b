"""Synthetic world with a known preference function and a confounded logger.

The world draws latent user/item vectors whose dot products have roughly unit
scale, so logistic preferences span a realistic range. The logging policy
exposes items by a softmax over popularity and true-preference logits,
creating exposure bias that observational estimates inherit; randomized test
sets expose uniformly instead, which is exactly the interventional
distribution the training side is trying to recover.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from cfrec.dataset import Interaction
from cfrec.errors import InvalidInputError
from cfrec.seeding import spawn_rng

DEFAULT_ZIPF_EXPONENT = 1.0


@dataclass(frozen=True)
class SyntheticWorld:
    user_vectors: np.ndarray  # (num_users, d_star)
    item_vectors: np.ndarray  # (num_items, d_star)
    item_bias: np.ndarray     # (num_items,)
    scale: float
    seed: int

    @property
    def num_users(self):
        return self.user_vectors.shape[0]

    @property
    def num_items(self):
        return self.item_vectors.shape[0]

    def preference_logits(self, user) -> np.ndarray:
        return self.scale * (self.item_vectors @ self.user_vectors[user]) + self.item_bias

    def preference_matrix(self) -> np.ndarray:
        return _sigmoid(self.scale * (self.user_vectors @ self.item_vectors.T)
                        + self.item_bias[None, :])


@dataclass(frozen=True)
class LoggingPolicy:
    """Exposure distribution per user: softmax of popularity and preference logits."""

    lambda_pop: float
    lambda_pref: float
    pop_logits: np.ndarray

    def exposure_probs(self, world: SyntheticWorld, user) -> np.ndarray:
        logits = (self.lambda_pop * self.pop_logits
                  + self.lambda_pref * (world.item_vectors @ world.user_vectors[user]))
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def gen_world(num_users, num_items, d_star=16, scale=1.0, seed=0,
              bias_mean=0.0) -> SyntheticWorld:
    """Latent vectors with Var = 1/sqrt(d*) per coordinate, so u.v has ~unit variance.

    ``bias_mean`` shifts the item-bias prior; a negative shift yields the
    sparse liked-fraction of realistic catalogs instead of the 50% a zero
    mean implies.
    """
    if num_users < 1 or num_items < 1 or d_star < 1:
        raise InvalidInputError("counts and d_star must be >= 1")
    rng = spawn_rng(seed, "world")
    std = (1.0 / math.sqrt(d_star)) ** 0.5
    return SyntheticWorld(
        rng.normal(0.0, std, (num_users, d_star)),
        rng.normal(0.0, std, (num_items, d_star)),
        rng.normal(float(bias_mean), math.sqrt(0.5), num_items),
        float(scale),
        int(seed),
    )


def gen_policy(num_items, lambda_pop, lambda_pref, seed=0,
               zipf_exponent=DEFAULT_ZIPF_EXPONENT) -> LoggingPolicy:
    """Popularity logits follow log-Zipf weights assigned in seeded random order."""
    rng = spawn_rng(seed, "policy")
    ranks = rng.permutation(num_items) + 1
    return LoggingPolicy(float(lambda_pop), float(lambda_pref),
                         -zipf_exponent * np.log(ranks.astype(np.float64)))


def oracle_do_probability(world: SyntheticWorld, user, item) -> float:
    """Ground-truth P(y=1 | user, do(item)): the preference under forced exposure."""
    if not 0 <= user < world.num_users or not 0 <= item < world.num_items:
        raise InvalidInputError("unknown user or item")
    logit = world.scale * float(world.user_vectors[user] @ world.item_vectors[item])
    return float(_sigmoid(logit + world.item_bias[item]))


def gen_observational(world: SyntheticWorld, policy: LoggingPolicy,
                      interactions_per_user, seed=0):
    """Biased log: items drawn from the policy softmax, labels from true preferences.

    Timestamps record draw order within each user.
    """
    if interactions_per_user < 1:
        raise InvalidInputError("interactions_per_user must be >= 1")
    if interactions_per_user > world.num_items:
        raise InvalidInputError("interactions_per_user exceeds the catalog")
    log = []
    for u in range(world.num_users):
        rng = spawn_rng(seed, "observational", u)
        probs = policy.exposure_probs(world, u)
        items = rng.choice(world.num_items, size=interactions_per_user,
                           replace=False, p=probs)
        prefs = _sigmoid(world.preference_logits(u)[items])
        draws = rng.random(interactions_per_user)
        for t, (it, p, dr) in enumerate(zip(items, prefs, draws)):
            y = 1 if dr < p else 0
            log.append(Interaction(u, int(it), y, t, y))
    return log


def gen_randomized_test(world: SyntheticWorld, per_user, seed=0, *,
                        exclude=None, retry_cap=20):
    """Uniform-exposure log, at least one positive per retained user.

    ``exclude`` maps user -> item ids (typically their observational items)
    that must not be re-exposed. Users without a positive after ``retry_cap``
    reseeded attempts are dropped; if every user drops, that is an error.
    """
    if per_user < 1:
        raise InvalidInputError("per_user must be >= 1")
    exclude = exclude or {}
    log = []
    kept_users = 0
    for u in range(world.num_users):
        banned = np.asarray(sorted(exclude.get(u, ())), dtype=np.int64)
        eligible = np.setdiff1d(np.arange(world.num_items, dtype=np.int64), banned)
        if eligible.size < per_user:
            raise InvalidInputError(
                f"user {u}: only {eligible.size} items available for {per_user} test draws")
        rows = None
        for attempt in range(retry_cap):
            rng = spawn_rng(seed, "randomized-test", u, attempt)
            items = rng.choice(eligible, size=per_user, replace=False)
            prefs = _sigmoid(world.preference_logits(u)[items])
            labels = (rng.random(per_user) < prefs).astype(np.int64)
            if labels.any():
                rows = [Interaction(u, int(it), int(y), t, int(y))
                        for t, (it, y) in enumerate(zip(items, labels))]
                break
        if rows is not None:
            kept_users += 1
            log.extend(rows)
    if kept_users == 0:
        raise InvalidInputError("no user obtained a positive test interaction")
    return log


def observational_item_sets(log):
    """user -> set of item ids, for excluding re-exposure in test generation."""
    out = {}
    for it in log:
        out.setdefault(it.user_id, set()).add(it.item_id)
    return out


def save_world(world: SyntheticWorld, path):
    doc = {
        "user_vectors": world.user_vectors.tolist(),
        "item_vectors": world.item_vectors.tolist(),
        "item_bias": world.item_bias.tolist(),
        "scale": world.scale,
        "seed": world.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_world(path) -> SyntheticWorld:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SyntheticWorld(
        np.asarray(doc["user_vectors"], dtype=np.float64),
        np.asarray(doc["item_vectors"], dtype=np.float64),
        np.asarray(doc["item_bias"], dtype=np.float64),
        float(doc["scale"]),
        int(doc["seed"]),
    )
