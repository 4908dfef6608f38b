"""Base recommenders: biased matrix factorization and attention-pooled sequential.

Both models expose the same surface: ``score``, ``predict_prob``, ``top_k``,
``score_candidates`` and ``grad``. The ``history`` argument accepts a
:class:`~cfrec.dataset.History` (or plain id sequence), a float vector that
stands in for the pooled history representation, or ``None``. MF ignores
id-form histories entirely; a vector-form history replaces the user embedding
in the score, which is how the continuous counterfactual machinery perturbs
an MF model.

These methods are the plain-numpy reference implementations. The fused
per-example training updates live in :mod:`cfrec.kernels` and are tested
against the gradients produced here.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from cfrec.dataset import History
from cfrec.errors import InvalidInputError
from cfrec.seeding import spawn_rng

INIT_STD = 0.1
CHECKPOINT_VERSION = 1


def stable_logistic(x: float) -> float:
    """Overflow-safe sigmoid, strictly increasing (no argument clamp)."""
    if x >= 0.0:
        z = math.exp(-x)
        return 1.0 / (1.0 + z)
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class ScoreRequest:
    """One (user, history, item) triple; exactly one history form may be set."""

    user_id: int
    item_id: int
    history: History | None = None
    history_embedding: np.ndarray | None = None

    def __post_init__(self):
        if self.history is not None and self.history_embedding is not None:
            raise InvalidInputError("give history ids or an embedding, not both")


@dataclass
class GradAccumulator:
    """Sparse score gradients, keyed by parameter index. Entries accumulate."""

    user_emb: dict = field(default_factory=dict)
    item_emb: dict = field(default_factory=dict)
    user_bias: dict = field(default_factory=dict)
    item_bias: dict = field(default_factory=dict)
    global_bias: float = 0.0

    def add_user(self, u, vec):
        if u in self.user_emb:
            self.user_emb[u] = self.user_emb[u] + vec
        else:
            self.user_emb[u] = np.array(vec, dtype=np.float64)

    def add_item(self, i, vec):
        if i in self.item_emb:
            self.item_emb[i] = self.item_emb[i] + vec
        else:
            self.item_emb[i] = np.array(vec, dtype=np.float64)


def _history_ids(history):
    if history is None:
        return np.zeros(0, dtype=np.int64)
    if isinstance(history, History):
        return np.asarray(history.items, dtype=np.int64)
    return np.asarray(list(history), dtype=np.int64)


def _as_embedding(history):
    if isinstance(history, np.ndarray) and history.dtype.kind == "f":
        return history
    return None


class _ModelBase:
    def _check_ids(self, user, item):
        if not 0 <= user < self.num_users:
            raise InvalidInputError(f"user id {user} out of range")
        if not 0 <= item < self.num_items:
            raise InvalidInputError(f"item id {item} out of range")

    def _check_user_cands(self, user, cands):
        if not 0 <= user < self.num_users:
            raise InvalidInputError(f"user id {user} out of range")
        if cands.size and (cands.min() < 0 or cands.max() >= self.num_items):
            raise InvalidInputError("candidate item id out of range")

    def predict_prob(self, user, history, item) -> float:
        """P(y=1 | user, history, item) as the logistic of the raw score."""
        return stable_logistic(self.score(user, history, item))

    def top_k(self, user, history, candidates, k):
        """The k highest-scoring candidates, descending; ties to the lower item id."""
        candidates = list(candidates)
        if k > len(candidates):
            raise InvalidInputError(f"k={k} exceeds {len(candidates)} candidates")
        scores = self.score_candidates(user, history, np.asarray(candidates, dtype=np.int64))
        order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
        return [int(candidates[i]) for i in order[:k]]


class MfModel(_ModelBase):
    """Matrix factorization with user, item and global bias terms."""

    model_type = "mf"

    def __init__(self, user_embeddings, item_embeddings, user_bias, item_bias, global_bias):
        self.user_embeddings = np.asarray(user_embeddings, dtype=np.float64)
        self.item_embeddings = np.asarray(item_embeddings, dtype=np.float64)
        self.user_bias = np.asarray(user_bias, dtype=np.float64)
        self.item_bias = np.asarray(item_bias, dtype=np.float64)
        self.global_bias = float(global_bias)

    @classmethod
    def init(cls, num_users, num_items, d=64, seed=0):
        rng = spawn_rng(seed, "mf-init")
        return cls(
            rng.normal(0.0, INIT_STD, (num_users, d)),
            rng.normal(0.0, INIT_STD, (num_items, d)),
            np.zeros(num_users),
            np.zeros(num_items),
            0.0,
        )

    @property
    def num_users(self):
        return self.user_embeddings.shape[0]

    @property
    def num_items(self):
        return self.item_embeddings.shape[0]

    @property
    def d(self):
        return self.user_embeddings.shape[1]

    def score(self, user, history, item) -> float:
        self._check_ids(user, item)
        emb = _as_embedding(history)
        uvec = emb if emb is not None else self.user_embeddings[user]
        return float(
            uvec @ self.item_embeddings[item]
            + self.user_bias[user]
            + self.item_bias[item]
            + self.global_bias
        )

    def score_candidates(self, user, history, candidates) -> np.ndarray:
        cands = np.asarray(candidates, dtype=np.int64)
        self._check_user_cands(user, cands)
        emb = _as_embedding(history)
        uvec = emb if emb is not None else self.user_embeddings[user]
        return (
            self.item_embeddings[cands] @ uvec
            + self.user_bias[user]
            + self.item_bias[cands]
            + self.global_bias
        )

    def grad(self, request: ScoreRequest, upstream: float = 1.0) -> GradAccumulator:
        """d(score)/d(params) * upstream, touching only reachable parameters."""
        u, v = request.user_id, request.item_id
        self._check_ids(u, v)
        acc = GradAccumulator()
        emb = request.history_embedding
        if emb is None:
            acc.add_user(u, upstream * self.item_embeddings[v])
            acc.add_item(v, upstream * self.user_embeddings[u])
        else:
            acc.add_item(v, upstream * np.asarray(emb, dtype=np.float64))
        acc.user_bias[u] = upstream
        acc.item_bias[v] = upstream
        acc.global_bias = upstream
        return acc


class AttnSeqModel(_ModelBase):
    """Sequential scorer that pools the history by attention on its last item.

    Attention logits are scaled dot products between each history item and the
    final one; the pooled vector adds to the user embedding before matching
    the target. Item embeddings are shared between the history and target
    roles. No per-user bias term.
    """

    model_type = "attnseq"

    def __init__(self, user_embeddings, item_embeddings, item_bias, global_bias):
        self.user_embeddings = np.asarray(user_embeddings, dtype=np.float64)
        self.item_embeddings = np.asarray(item_embeddings, dtype=np.float64)
        self.item_bias = np.asarray(item_bias, dtype=np.float64)
        self.global_bias = float(global_bias)

    @classmethod
    def init(cls, num_users, num_items, d=64, seed=0):
        rng = spawn_rng(seed, "attnseq-init")
        return cls(
            rng.normal(0.0, INIT_STD, (num_users, d)),
            rng.normal(0.0, INIT_STD, (num_items, d)),
            np.zeros(num_items),
            0.0,
        )

    @property
    def num_users(self):
        return self.user_embeddings.shape[0]

    @property
    def num_items(self):
        return self.item_embeddings.shape[0]

    @property
    def d(self):
        return self.user_embeddings.shape[1]

    def attention(self, history):
        """(weights, pooled vector) for an id-form history; empty pools to zero."""
        hist = _history_ids(history)
        if hist.size == 0:
            return np.zeros(0), np.zeros(self.d)
        if np.any(hist < 0) or np.any(hist >= self.num_items):
            raise InvalidInputError("history contains unknown item ids")
        qh = self.item_embeddings[hist]
        e = qh @ qh[-1] / math.sqrt(self.d)
        a = np.exp(e - np.max(e))
        a /= a.sum()
        return a, a @ qh

    def pooled(self, history):
        emb = _as_embedding(history)
        if emb is not None:
            return emb
        return self.attention(history)[1]

    def score(self, user, history, item) -> float:
        self._check_ids(user, item)
        h = self.pooled(history)
        qv = self.item_embeddings[item]
        return float(
            self.user_embeddings[user] @ qv + h @ qv + self.item_bias[item] + self.global_bias
        )

    def score_candidates(self, user, history, candidates) -> np.ndarray:
        cands = np.asarray(candidates, dtype=np.int64)
        self._check_user_cands(user, cands)
        h = self.pooled(history)
        return (
            self.item_embeddings[cands] @ (self.user_embeddings[user] + h)
            + self.item_bias[cands]
            + self.global_bias
        )

    def grad(self, request: ScoreRequest, upstream: float = 1.0) -> GradAccumulator:
        """d(score)/d(params) * upstream, including the attention path."""
        u, v = request.user_id, request.item_id
        self._check_ids(u, v)
        acc = GradAccumulator()
        qv = self.item_embeddings[v]
        acc.add_user(u, upstream * qv)
        emb = request.history_embedding
        if emb is not None:
            acc.add_item(v, upstream * (self.user_embeddings[u] + np.asarray(emb)))
        else:
            hist = _history_ids(request.history)
            a, h = self.attention(hist)
            acc.add_item(v, upstream * (self.user_embeddings[u] + h))
            if hist.size:
                rows = self._attention_backward(hist, a, h, upstream * qv)
                for t, it in enumerate(hist):
                    acc.add_item(int(it), rows[t])
        acc.item_bias[v] = upstream
        acc.global_bias = upstream
        return acc

    def _attention_backward(self, hist, a, h, g):
        # gradient rows for the history positions given upstream g into the pooled vector
        qh = self.item_embeddings[hist]
        de = a * (qh @ g - h @ g) / math.sqrt(self.d)
        rows = a[:, None] * g[None, :] + de[:, None] * qh[-1][None, :]
        rows[-1] += de @ qh
        return rows


def save_checkpoint(model, path):
    """Write the model as JSON; floats keep full round-trip precision."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_type": model.model_type,
        "d": model.d,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "user_embeddings": model.user_embeddings.tolist(),
        "item_embeddings": model.item_embeddings.tolist(),
    }
    if model.model_type == "mf":
        doc["user_bias"] = model.user_bias.tolist()
    doc["item_bias"] = model.item_bias.tolist()
    doc["global_bias"] = model.global_bias
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {doc.get('format_version')}")
    mtype = doc.get("model_type")
    if mtype == "mf":
        return MfModel(doc["user_embeddings"], doc["item_embeddings"],
                       doc["user_bias"], doc["item_bias"], doc["global_bias"])
    if mtype == "attnseq":
        return AttnSeqModel(doc["user_embeddings"], doc["item_embeddings"],
                            doc["item_bias"], doc["global_bias"])
    raise InvalidInputError(f"unknown model_type {mtype!r}")


def init_model(model_type, num_users, num_items, d=64, seed=0):
    if model_type == "mf":
        return MfModel.init(num_users, num_items, d=d, seed=seed)
    if model_type == "attnseq":
        return AttnSeqModel.init(num_users, num_items, d=d, seed=seed)
    raise InvalidInputError(f"unknown model_type {model_type!r} (valid: mf, attnseq)")
