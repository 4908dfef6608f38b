"""Non-causal and propensity-based reference points.

Most-popular ranking ignores the user entirely; inverse-propensity weighting
reweights each pairwise training example by the inverse exposure probability
of its positive item, with relative popularity standing in for exposure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cfrec.errors import InvalidInputError
from cfrec.models import _ModelBase, stable_logistic

DEFAULT_IPS_ETA = 0.5
DEFAULT_IPS_CLIP = 10.0


@dataclass(frozen=True)
class PropensityTable:
    """Per-item exposure propensities p_v in (0, 1], max-normalized."""

    propensities: np.ndarray
    eta: float
    clip_max: float


def build_propensity_table(popularity, eta=DEFAULT_IPS_ETA,
                           clip_max=DEFAULT_IPS_CLIP) -> PropensityTable:
    """p_v = (n_v / n_max) ** eta over train interaction counts."""
    counts = np.asarray(popularity, dtype=np.float64)
    n_max = counts.max() if counts.size else 0.0
    if n_max <= 0:
        raise InvalidInputError("propensities need at least one train interaction")
    if eta < 0:
        raise InvalidInputError("eta must be >= 0")
    if clip_max < 1:
        raise InvalidInputError("clip_max must be >= 1")
    with np.errstate(divide="ignore"):
        p = np.where(counts > 0, (counts / n_max) ** eta, 0.0)
    return PropensityTable(p, float(eta), float(clip_max))


def ips_weight(item, table: PropensityTable) -> float:
    """min(1 / p_v, clip_max); never-seen items get the full cap."""
    p = table.propensities[item]
    if p <= 0.0:
        return table.clip_max
    return min(1.0 / p, table.clip_max)


def ips_weights(items, table: PropensityTable) -> np.ndarray:
    """Vectorized :func:`ips_weight` for an item-id array."""
    p = table.propensities[np.asarray(items, dtype=np.int64)]
    w = np.full(p.shape, table.clip_max)
    nz = p > 0.0
    w[nz] = np.minimum(1.0 / p[nz], table.clip_max)
    return w


class MostPopModel(_ModelBase):
    """Ranks every user identically by train-set interaction count."""

    model_type = "mostpop"

    def __init__(self, popularity):
        self.popularity = np.asarray(popularity, dtype=np.float64)

    @property
    def num_users(self):
        return np.iinfo(np.int64).max  # any user id is acceptable

    @property
    def num_items(self):
        return self.popularity.size

    def score(self, user, history, item) -> float:
        if not 0 <= item < self.num_items:
            raise InvalidInputError(f"item id {item} out of range")
        return float(self.popularity[item])

    def score_candidates(self, user, history, candidates) -> np.ndarray:
        cands = np.asarray(candidates, dtype=np.int64)
        if cands.size and (cands.min() < 0 or cands.max() >= self.num_items):
            raise InvalidInputError("candidate item id out of range")
        return self.popularity[cands].astype(np.float64)

    def predict_prob(self, user, history, item) -> float:
        return stable_logistic(self.score(user, history, item))


def mostpop_score(item, popularity) -> float:
    """Train-set interaction count of the item (ranking ties go to lower ids)."""
    return float(np.asarray(popularity)[item])
