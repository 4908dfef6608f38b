"""Interaction logs, feedback binarization, splits and negative sampling.

Input format: tab-separated text, one interaction per line with columns
``user_id<TAB>item_id<TAB>rating<TAB>timestamp``. An optional header line is
detected by a non-numeric first field. Ratings are 1..5 stars, or 0/1 when a
file is already binarized (auto-detected: every rating in {0, 1}).

A split is persisted as a directory of ``train.tsv``, ``valid.tsv``,
``test.tsv`` in the same format plus ``meta.json`` holding
``{num_users, num_items, max_history, seed}``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from cfrec.errors import InvalidInputError
from cfrec.seeding import spawn_rng

logger = logging.getLogger(__name__)

DEFAULT_MAX_HISTORY = 10
POSITIVE_THRESHOLD = 4


@dataclass(frozen=True, slots=True)
class Interaction:
    """One logged (user, item, rating, timestamp) event with its binary label."""

    user_id: int
    item_id: int
    rating: int
    timestamp: int
    label: int

    @classmethod
    def from_rating(cls, user_id, item_id, rating, timestamp=0):
        return cls(user_id, item_id, rating, timestamp, binarize(rating))


@dataclass(frozen=True, slots=True)
class History:
    """Chronological item-id window, at most ``max_history`` long.

    May contain disliked items; the window is about what the user touched,
    not what they enjoyed.
    """

    items: tuple[int, ...]

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def binarize(rating: int) -> int:
    """Map a 1..5 star rating to binary feedback (>= 4 is positive)."""
    if not 1 <= int(rating) <= 5 or int(rating) != rating:
        raise InvalidInputError(f"rating must be an integer in 1..5, got {rating!r}")
    return 1 if rating >= POSITIVE_THRESHOLD else 0


class SplitDataset:
    """Immutable train/validation/test partitions plus derived lookup arrays.

    Construction sorts each user's train interactions chronologically
    (timestamp ties keep input order) and precomputes:

    - per-user train sequences (items and labels)
    - per-user eligible-negative lists (catalog minus train positives)
    - item popularity counts over all train interactions
    - flat training-example arrays for the positive train interactions
      (user, item, capped preceding history)

    After ``__init__`` the object is read-only and safe to share across
    workers.
    """

    def __init__(self, train, validation, test, num_users, num_items,
                 max_history=DEFAULT_MAX_HISTORY, seed=0,
                 validation_skipped=0):
        self.train = tuple(train)
        self.validation = tuple(validation)
        self.test = tuple(test)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.max_history = int(max_history)
        self.seed = int(seed)
        self.validation_skipped = int(validation_skipped)
        self._check_ids()
        self._build_sequences()
        self._build_eligibility()
        self._build_examples()

    def _check_ids(self):
        for part in (self.train, self.validation, self.test):
            for it in part:
                if not (0 <= it.user_id < self.num_users):
                    raise InvalidInputError(
                        f"user_id {it.user_id} outside catalog of {self.num_users}")
                if not (0 <= it.item_id < self.num_items):
                    raise InvalidInputError(
                        f"item_id {it.item_id} outside catalog of {self.num_items}")

    def _build_sequences(self):
        per_user = [[] for _ in range(self.num_users)]
        for pos, it in enumerate(self.train):
            per_user[it.user_id].append((it.timestamp, pos, it))
        self._seq_items = []
        self._seq_labels = []
        self._seq_rows = []
        counts = np.zeros(self.num_items, dtype=np.int64)
        for u in range(self.num_users):
            rows = [r[2] for r in sorted(per_user[u], key=lambda r: (r[0], r[1]))]
            self._seq_items.append(np.array([it.item_id for it in rows], dtype=np.int64))
            self._seq_labels.append(np.array([it.label for it in rows], dtype=np.int64))
            self._seq_rows.append(tuple(rows))
            for it in rows:
                counts[it.item_id] += 1
        self.popularity = counts

    def _build_eligibility(self):
        self._pos_sets = []
        flat = []
        indptr = np.zeros(self.num_users + 1, dtype=np.int64)
        all_items = np.arange(self.num_items, dtype=np.int64)
        for u in range(self.num_users):
            pos = np.unique(self._seq_items[u][self._seq_labels[u] == 1])
            self._pos_sets.append(pos)
            if pos.size:
                mask = np.ones(self.num_items, dtype=bool)
                mask[pos] = False
                elig = all_items[mask]
            else:
                elig = all_items
            flat.append(elig)
            indptr[u + 1] = indptr[u] + elig.size
        self.elig_flat = np.concatenate(flat) if flat else np.zeros(0, dtype=np.int64)
        self.elig_indptr = indptr

    def _build_examples(self):
        ex_user, ex_item, ex_pos = [], [], []
        hist_chunks = []
        lengths = []
        for u in range(self.num_users):
            items = self._seq_items[u]
            labels = self._seq_labels[u]
            for t in range(items.size):
                if labels[t] != 1:
                    continue
                lo = max(0, t - self.max_history)
                ex_user.append(u)
                ex_item.append(items[t])
                ex_pos.append(t)
                hist_chunks.append(items[lo:t])
                lengths.append(t - lo)
        self.ex_user = np.array(ex_user, dtype=np.int64)
        self.ex_item = np.array(ex_item, dtype=np.int64)
        self.ex_seq_pos = np.array(ex_pos, dtype=np.int64)
        self.hist_indptr = np.zeros(len(ex_user) + 1, dtype=np.int64)
        np.cumsum(lengths, out=self.hist_indptr[1:])
        self.hist_flat = (np.concatenate(hist_chunks) if hist_chunks
                          else np.zeros(0, dtype=np.int64))

    @property
    def num_examples(self):
        return self.ex_user.size

    def user_train_items(self, user):
        return self._seq_items[user]

    def user_positive_items(self, user):
        return self._pos_sets[user]

    def history_of(self, user, before_index) -> History:
        """Latest <= max_history train items of ``user`` strictly before the position."""
        if not 0 <= user < self.num_users:
            raise InvalidInputError(f"unknown user {user}")
        items = self._seq_items[user]
        t = min(int(before_index), items.size)
        lo = max(0, t - self.max_history)
        return History(tuple(int(i) for i in items[lo:t]))

    def eval_history(self, user) -> History:
        """History a model sees at evaluation time: the full train tail."""
        return self.history_of(user, self._seq_items[user].size)

    def user_recent_train_rows(self, user):
        """The Interaction rows behind :meth:`eval_history` (the capped tail)."""
        rows = self._seq_rows[user]
        return list(rows[max(0, len(rows) - self.max_history):])

    def sample_negatives(self, user, target_item, count, seed):
        """``count`` distinct items the user never positively interacted with in train.

        The target is excluded; disliked and never-seen items are both
        eligible. Pure function of (user, target_item, count, seed).
        """
        lo, hi = self.elig_indptr[user], self.elig_indptr[user + 1]
        eligible = self.elig_flat[lo:hi]
        idx = np.searchsorted(eligible, target_item)
        if idx < eligible.size and eligible[idx] == target_item:
            eligible = np.delete(eligible, idx)
        if eligible.size < count:
            raise InvalidInputError(
                f"user {user}: need {count} negatives, only {eligible.size} eligible "
                f"(short by {count - eligible.size})")
        rng = spawn_rng(seed, "negatives", user, target_item)
        return rng.choice(eligible, size=count, replace=False)


def leave_one_out_split(log, *, num_users=None, num_items=None,
                        max_history=DEFAULT_MAX_HISTORY, seed=0) -> SplitDataset:
    """Hold out each user's latest positive for test and second-latest for validation.

    Users with fewer than three positives keep everything in train and are
    not evaluated. Timestamp ties are broken by input order, so the split is
    deterministic.
    """
    log = list(log)
    if not log:
        raise InvalidInputError("empty interaction log")
    num_users = _infer_count(num_users, (it.user_id for it in log))
    num_items = _infer_count(num_items, (it.item_id for it in log))
    per_user = {}
    for pos, it in enumerate(log):
        per_user.setdefault(it.user_id, []).append((it.timestamp, pos, it))
    train, valid, test = [], [], []
    for u, rows in per_user.items():
        rows = sorted(rows, key=lambda r: (r[0], r[1]))
        pos_rows = [r for r in rows if r[2].label == 1]
        if len(pos_rows) >= 3:
            held_test = pos_rows[-1][1]
            held_valid = pos_rows[-2][1]
            for _, p, it in rows:
                if p == held_test:
                    test.append(it)
                elif p == held_valid:
                    valid.append(it)
                else:
                    train.append(it)
        else:
            train.extend(it for _, _, it in rows)
    return SplitDataset(train, valid, test, num_users, num_items,
                        max_history=max_history, seed=seed)


def randomized_trial_split(train_log, test_log, *, num_users=None, num_items=None,
                           max_history=DEFAULT_MAX_HISTORY, seed=0) -> SplitDataset:
    """Validation is one seeded-uniform positive per user pulled out of the train log.

    The externally collected test log is kept verbatim. Users without any
    positive train interaction are skipped (counted and logged).
    """
    train_log = list(train_log)
    test_log = list(test_log)
    if not train_log:
        raise InvalidInputError("empty train log")
    ids = [it.user_id for it in train_log + test_log]
    items = [it.item_id for it in train_log + test_log]
    num_users = _infer_count(num_users, ids)
    num_items = _infer_count(num_items, items)
    positions = {}
    for pos, it in enumerate(train_log):
        if it.label == 1:
            positions.setdefault(it.user_id, []).append(pos)
    held = set()
    skipped = 0
    for u in range(num_users):
        cand = positions.get(u)
        if not cand:
            skipped += 1
            continue
        rng = spawn_rng(seed, "validation-holdout", u)
        held.add(cand[int(rng.integers(0, len(cand)))])
    if skipped:
        logger.warning("randomized_trial_split: %d users had no positive train "
                       "interaction and get no validation entry", skipped)
    train = [it for pos, it in enumerate(train_log) if pos not in held]
    valid = [train_log[pos] for pos in sorted(held)]
    return SplitDataset(train, valid, test_log, num_users, num_items,
                        max_history=max_history, seed=seed,
                        validation_skipped=skipped)


def _infer_count(given, ids):
    if given is not None:
        return int(given)
    return max(ids) + 1


def load_interactions(path, *, binarized=None):
    """Read a TSV rating log. Returns (interactions, num_users, num_items).

    Raw user/item ids are remapped to dense indices by sorted order of the
    distinct raw ids. ``binarized=None`` auto-detects already-binary ratings
    (every value in {0, 1}).
    """
    rows = _read_tsv_rows(path)
    if not rows:
        raise InvalidInputError(f"{path}: no interactions")
    if binarized is None:
        binarized = all(r[2] in (0, 1) for r in rows)
    users = sorted({r[0] for r in rows})
    items = sorted({r[1] for r in rows})
    umap = {raw: i for i, raw in enumerate(users)}
    imap = {raw: i for i, raw in enumerate(items)}
    out = []
    for u, i, r, t in rows:
        label = int(r) if binarized else binarize(r)
        out.append(Interaction(umap[u], imap[i], int(r), int(t), label))
    return out, len(users), len(items)


def load_interaction_pair(train_path, test_path, *, binarized=None):
    """Read train and test logs with one shared id remapping."""
    tr = _read_tsv_rows(train_path)
    te = _read_tsv_rows(test_path)
    if not tr:
        raise InvalidInputError(f"{train_path}: no interactions")
    if binarized is None:
        binarized = all(r[2] in (0, 1) for r in tr + te)
    users = sorted({r[0] for r in tr} | {r[0] for r in te})
    items = sorted({r[1] for r in tr} | {r[1] for r in te})
    umap = {raw: i for i, raw in enumerate(users)}
    imap = {raw: i for i, raw in enumerate(items)}

    def conv(rows):
        return [Interaction(umap[u], imap[i], int(r), int(t),
                            int(r) if binarized else binarize(r))
                for u, i, r, t in rows]

    return conv(tr), conv(te), len(users), len(items)


def _read_tsv_rows(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        first = True
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if first:
                first = False
                try:
                    float(parts[0])
                except ValueError:
                    continue  # header
            if len(parts) < 3:
                raise InvalidInputError(f"{path}: malformed line {line!r}")
            ts = int(float(parts[3])) if len(parts) > 3 else 0
            rows.append((int(float(parts[0])), int(float(parts[1])),
                         int(float(parts[2])), ts))
    return rows


def write_interactions(path, interactions):
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            fh.write(f"{it.user_id}\t{it.item_id}\t{it.rating}\t{it.timestamp}\n")


def save_split(dataset: SplitDataset, out_dir):
    """Persist the three partitions and meta.json into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    write_interactions(os.path.join(out_dir, "train.tsv"), dataset.train)
    write_interactions(os.path.join(out_dir, "valid.tsv"), dataset.validation)
    write_interactions(os.path.join(out_dir, "test.tsv"), dataset.test)
    meta = {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "max_history": dataset.max_history,
        "seed": dataset.seed,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
        fh.write("\n")


def load_split(split_dir) -> SplitDataset:
    """Load a directory written by :func:`save_split` (ids are trusted, not remapped)."""
    with open(os.path.join(split_dir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)

    def part(name):
        path = os.path.join(split_dir, name)
        rows = _read_tsv_rows(path) if os.path.exists(path) else []
        binarized = all(r[2] in (0, 1) for r in rows) if rows else True
        return [Interaction(u, i, r, t, r if binarized else binarize(r))
                for u, i, r, t in rows]

    return SplitDataset(part("train.tsv"), part("valid.tsv"), part("test.tsv"),
                        meta["num_users"], meta["num_items"],
                        max_history=meta["max_history"], seed=meta["seed"])
