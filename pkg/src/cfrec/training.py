"""Two-phase constrained training.

Phase 1 trains the base model with the pairwise ranking loss and L2 decay.
Phase 2 regenerates and selects counterfactuals against the frozen phase-1
model, then keeps training with ``rank_loss + l2 + omega * constraint_loss``
applied per example (the idealized constraint sums over all users; stochastic
training applies the hinge per example instead).

Counterfactual probabilities come from different places per model family:
the attention model re-scores edited histories through the live model, while
MF (which has no history input) ties its probabilities to a frozen clone that
was retrained on a counterfactually edited interaction log
(:func:`matching_retrain_filter`). The continuous variant needs neither: it
perturbs the history representation directly (the pooled vector for the
attention model, the user embedding for MF).

With ``omega == 0`` or ``rule == "none"`` every epoch runs the plain ranking
kernel, so such runs are byte-identical to base training under the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from cfrec import kernels
from cfrec.baselines import build_propensity_table, ips_weights
from cfrec.counterfactual import (
    DEFAULT_EVAL_NEGATIVES,
    DEFAULT_GENERATION_LIMIT,
    DEFAULT_MAX_SELECTED,
    DEFAULT_REPLACEMENTS_PER_POSITION,
    HeuristicRule,
    generate,
    nearest_neighbor_map,
    parse_rule,
)
from cfrec.dataset import SplitDataset
from cfrec.errors import InvalidInputError
from cfrec.models import init_model
from cfrec.seeding import child_seed, spawn_rng

VALID_RULES = ("none", "k1", "d1", "r1r", "r1n", "c")
DISCRETE_RULES = ("k1", "d1", "r1r", "r1n")
VALID_MODEL_TYPES = ("mf", "attnseq")
CONTINUOUS_CHUNK = 4096


class TrainingDiverged(RuntimeError):
    """Raised when an epoch produces a non-finite loss."""


@dataclass
class TrainConfig:
    """All knobs of the constrained objective. JSON keys match field names."""

    model_type: str = "mf"
    rule: str = "none"
    k: int = 70
    omega: float = 0.1
    epsilon: float = 0.5
    epsilon2: float = 1.0
    mc_samples: int = 10
    learning_rate: float = 0.003
    l2_lambda: float = 1e-4
    epochs: int = 100
    pretrain_epochs: int = 30
    refresh_interval: int = 0
    seed: int = 42
    d: int = 64
    ips_eta: float = 0.0
    ips_clip: float = 10.0

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidInputError(
                f"unknown config keys: {', '.join(unknown)}; valid keys: "
                f"{', '.join(sorted(known))}")
        cfg = cls(**doc)
        cfg = replace(
            cfg,
            model_type=str(cfg.model_type).lower(),
            rule=str(cfg.rule).lower(),
            k=int(cfg.k),
            omega=float(cfg.omega),
            epsilon=float(cfg.epsilon),
            epsilon2=float(cfg.epsilon2),
            mc_samples=int(cfg.mc_samples),
            learning_rate=float(cfg.learning_rate),
            l2_lambda=float(cfg.l2_lambda),
            epochs=int(cfg.epochs),
            pretrain_epochs=int(cfg.pretrain_epochs),
            refresh_interval=int(cfg.refresh_interval),
            seed=int(cfg.seed),
            d=int(cfg.d),
            ips_eta=float(cfg.ips_eta),
            ips_clip=float(cfg.ips_clip),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self):
        if self.model_type not in VALID_MODEL_TYPES:
            raise InvalidInputError(
                f"invalid model_type {self.model_type!r}; valid: "
                f"{', '.join(VALID_MODEL_TYPES)}")
        if self.rule not in VALID_RULES:
            raise InvalidInputError(
                f"invalid rule {self.rule!r}; valid rules: {', '.join(VALID_RULES)}")
        if self.omega < 0 or self.epsilon < 0 or self.epsilon2 < 0:
            raise InvalidInputError("omega, epsilon and epsilon2 must be >= 0")
        if self.mc_samples < 1:
            raise InvalidInputError("mc_samples must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise InvalidInputError("l2_lambda must be >= 0")
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise InvalidInputError("need 0 <= pretrain_epochs <= epochs")
        if self.refresh_interval < 0:
            raise InvalidInputError("refresh_interval must be >= 0")
        if self.k < 1:
            raise InvalidInputError("k must be >= 1")
        if self.d < 1:
            raise InvalidInputError("d must be >= 1")
        if self.ips_eta < 0:
            raise InvalidInputError("ips_eta must be >= 0")
        if self.ips_clip < 1:
            raise InvalidInputError("ips_clip must be >= 1")
        if self.ips_eta > 0 and self.rule != "none":
            raise InvalidInputError("inverse-propensity weighting only combines with rule='none'")


@dataclass
class TrainedModel:
    model: object
    config: TrainConfig
    trace: list = field(default_factory=list)  # (epoch, rank_loss, constraint_loss)


def bpr_step_loss(s_pos: float, s_neg: float) -> float:
    """-ln(sigmoid(s_pos - s_neg)), with the clamped training sigmoid."""
    return -math.log(kernels.logistic(float(s_pos) - float(s_neg)))


def constraint_loss_discrete(p_real, p_cf, epsilon) -> float:
    """Per-example hinge on the summed counterfactual probability deviation."""
    total = sum(abs(float(p) - float(p_real)) for p in p_cf)
    return max(0.0, total - float(epsilon))


def constraint_loss_continuous(model, user, history_embedding, target,
                               epsilon1, epsilon2, mc_samples, seed) -> float:
    """Monte Carlo hinge: mean |P(perturbed) - P(real)| over sampled neighbours."""
    from cfrec.counterfactual import sample_continuous

    x = np.asarray(history_embedding, dtype=np.float64)
    samples = sample_continuous(x, epsilon2, mc_samples, seed)
    p_real = model.predict_prob(user, x, target)
    total = 0.0
    for s in range(mc_samples):
        total += abs(model.predict_prob(user, samples[s], target) - p_real)
    return max(0.0, total / mc_samples - float(epsilon1))


@dataclass
class MatchingFilter:
    """Frozen-clone constraint state for MF training."""

    p_clone: np.ndarray          # per-example clone probability, NaN when not kept
    clone: object                # the frozen retrained MF model
    kept_pairs: list             # (user, item) pairs surviving top-k selection
    eligible_count: int
    kept_count: int
    clone_train: list = field(default_factory=list)  # the edited interaction log


def matching_retrain_filter(dataset: SplitDataset, rule, config: TrainConfig,
                            base_model, refresh_index=0) -> MatchingFilter:
    """Retrain an MF clone on a counterfactually edited log and filter targets.

    The rule edits each user's capped recent history: delete-one removes every
    history item from the user's train data (each eligible target pairs with
    the history missing it), keep-one retains a single seeded item and removes
    the rest, replace-one swaps each history item for a random or
    nearest-neighbour substitute carrying the original label and timestamp.
    Eligible (user, target) pairs are exactly the removed/replaced items; a
    pair is kept when the clone still ranks the target into the top-k of its
    101-item candidate set. The clone is then frozen and phase 2 ties the main
    model's probability to the clone's on kept pairs.
    """
    rule = rule if isinstance(rule, HeuristicRule) else parse_rule(rule)
    if config.model_type != "mf":
        raise InvalidInputError("the retrain-and-filter procedure is for MF models")
    gen_seed = child_seed(config.seed, "clone-generate", refresh_index)
    sel_seed = child_seed(config.seed, "clone-select", refresh_index)
    nn_map = (nearest_neighbor_map(base_model.item_embeddings)
              if rule is HeuristicRule.REPLACE_ONE_NEAREST else None)

    removed = {}
    added_rows = []
    added_items = {}
    for u in range(dataset.num_users):
        rows = dataset.user_recent_train_rows(u)
        if not rows:
            continue
        items = [it.item_id for it in rows]
        if rule is HeuristicRule.DELETE_ONE:
            removed[u] = set(items)
        elif rule is HeuristicRule.KEEP_ONE:
            rng = spawn_rng(gen_seed, "keep-one", u)
            keep = items[int(rng.integers(0, len(items)))]
            rem = set(items) - {keep}
            if rem:
                removed[u] = rem
        else:
            removed[u] = set(items)
            adds = set()
            if rule is HeuristicRule.REPLACE_ONE_RANDOM:
                rng = spawn_rng(gen_seed, "replace-random", u)
                pool = np.setdiff1d(np.arange(dataset.num_items, dtype=np.int64),
                                    np.asarray(items, dtype=np.int64))
                for it in rows:
                    if pool.size == 0:
                        break
                    sub = int(pool[int(rng.integers(0, pool.size))])
                    added_rows.append(_with_item(it, sub))
                    adds.add(sub)
            else:
                for it in rows:
                    sub = int(nn_map[it.item_id])
                    added_rows.append(_with_item(it, sub))
                    adds.add(sub)
            if adds:
                added_items[u] = adds

    clone_train = [it for it in dataset.train
                   if it.item_id not in removed.get(it.user_id, _EMPTY)]
    clone_train.extend(added_rows)
    clone_ds = SplitDataset(clone_train, [], [], dataset.num_users, dataset.num_items,
                            max_history=dataset.max_history, seed=dataset.seed)
    clone = init_model("mf", dataset.num_users, dataset.num_items, d=config.d,
                       seed=child_seed(config.seed, "clone-init", refresh_index))
    gbc = np.array([clone.global_bias])
    ones = np.ones(clone_ds.num_examples)
    for epoch in range(config.pretrain_epochs):
        if clone_ds.num_examples == 0:
            break
        order = spawn_rng(config.seed, "clone-order", refresh_index, epoch).permutation(
            clone_ds.num_examples)
        neg_u = spawn_rng(config.seed, "clone-negatives", refresh_index, epoch).random(
            clone_ds.num_examples)
        kernels.mf_bpr_epoch(
            clone.user_embeddings, clone.item_embeddings, clone.user_bias,
            clone.item_bias, gbc, clone_ds.ex_user, clone_ds.ex_item, order, neg_u,
            clone_ds.elig_flat, clone_ds.elig_indptr, ones,
            config.learning_rate, config.l2_lambda)
    clone.global_bias = float(gbc[0])

    eligible = {u: removed[u] - added_items.get(u, _EMPTY) for u in removed}
    p_clone = np.full(dataset.num_examples, np.nan)
    kept_pairs = []
    eligible_count = 0
    seen = {}
    for e in range(dataset.num_examples):
        u = int(dataset.ex_user[e])
        v = int(dataset.ex_item[e])
        if v not in eligible.get(u, _EMPTY):
            continue
        eligible_count += 1
        if (u, v) in seen:
            p_clone[e] = seen[(u, v)]
            continue
        negs = dataset.sample_negatives(u, v, DEFAULT_EVAL_NEGATIVES, sel_seed)
        scores = clone.score_candidates(u, None, np.concatenate([negs, [v]]))
        s_t = scores[-1]
        rank = 1 + int(np.sum(scores[:-1] > s_t)) \
                 + int(np.sum((scores[:-1] == s_t) & (negs < v)))
        if rank <= config.k:
            pc = kernels.logistic(clone.score(u, None, v))
            p_clone[e] = pc
            seen[(u, v)] = pc
            kept_pairs.append((u, v))
        else:
            seen[(u, v)] = np.nan
    return MatchingFilter(p_clone, clone, kept_pairs, eligible_count,
                          len(kept_pairs), clone_train)


_EMPTY = frozenset()


def _with_item(interaction, item):
    return type(interaction)(interaction.user_id, item, interaction.rating,
                             interaction.timestamp, interaction.label)


@dataclass
class _AttnCf:
    """Selected counterfactual histories flattened for the kernels."""

    cf_flat: np.ndarray
    cf_hist_indptr: np.ndarray
    cf_ex_indptr: np.ndarray
    max_per_example: int
    generated: int
    kept: int


def _build_attn_cf(dataset: SplitDataset, model, config: TrainConfig,
                   refresh_index=0) -> _AttnCf:
    """Generate, rank and keep counterfactual histories for every train example."""
    gen_seed = child_seed(config.seed, "cf-generate", refresh_index)
    sel_seed = child_seed(config.seed, "cf-select", refresh_index)
    nn_map = (nearest_neighbor_map(model.item_embeddings)
              if config.rule == "r1n" else None)
    E = dataset.num_examples
    n_cand = DEFAULT_EVAL_NEGATIVES + 1

    per_example = []
    total = 0
    for e in range(E):
        hist = dataset.hist_flat[dataset.hist_indptr[e]:dataset.hist_indptr[e + 1]]
        if hist.size == 0:
            per_example.append([])
            continue
        cands = generate(config.rule, tuple(int(i) for i in hist), dataset.num_items,
                         model=model, seed=child_seed(gen_seed, "example", e),
                         limit=DEFAULT_GENERATION_LIMIT,
                         replacements_per_position=DEFAULT_REPLACEMENTS_PER_POSITION,
                         nn_map=nn_map)
        per_example.append(cands)
        total += len(cands)

    cf_ex_indptr = np.zeros(E + 1, dtype=np.int64)
    cf_hist_indptr = [0]
    flat = []
    cand_rows = np.zeros((E, n_cand), dtype=np.int64)
    for e in range(E):
        cands = per_example[e]
        cf_ex_indptr[e + 1] = cf_ex_indptr[e] + len(cands)
        if not cands:
            continue
        u = int(dataset.ex_user[e])
        v = int(dataset.ex_item[e])
        negs = dataset.sample_negatives(u, v, DEFAULT_EVAL_NEGATIVES, sel_seed)
        cand_rows[e, :-1] = negs
        cand_rows[e, -1] = v
        for hist in cands:
            flat.extend(hist.items)
            cf_hist_indptr.append(len(flat))
    cf_flat = np.asarray(flat, dtype=np.int64)
    cf_hist_indptr = np.asarray(cf_hist_indptr, dtype=np.int64)

    gbarr = np.array([model.global_bias])
    ranks = kernels.attn_select_ranks(
        model.user_embeddings, model.item_embeddings, model.item_bias, gbarr,
        dataset.ex_user, dataset.ex_item, cand_rows,
        cf_flat, cf_hist_indptr, cf_ex_indptr, 1.0 / math.sqrt(config.d))

    keep_flat = []
    keep_hist_indptr = [0]
    keep_ex_indptr = np.zeros(E + 1, dtype=np.int64)
    max_per_example = 0
    kept = 0
    for e in range(E):
        cands = per_example[e]
        n_kept = 0
        for i in range(len(cands)):
            ci = cf_ex_indptr[e] + i
            if ranks[ci] <= config.k and n_kept < DEFAULT_MAX_SELECTED:
                keep_flat.extend(cands[i].items)
                keep_hist_indptr.append(len(keep_flat))
                n_kept += 1
        keep_ex_indptr[e + 1] = keep_ex_indptr[e] + n_kept
        kept += n_kept
        max_per_example = max(max_per_example, n_kept)
    return _AttnCf(
        np.asarray(keep_flat, dtype=np.int64),
        np.asarray(keep_hist_indptr, dtype=np.int64),
        keep_ex_indptr,
        max(1, max_per_example),
        total,
        kept,
    )


def _needs_refresh(epoch, config: TrainConfig) -> bool:
    if epoch == config.pretrain_epochs:
        return True
    if config.refresh_interval > 0 and epoch > config.pretrain_epochs:
        return (epoch - config.pretrain_epochs) % config.refresh_interval == 0
    return False


def train(dataset: SplitDataset, config) -> TrainedModel:
    """Run the two-phase schedule and return the model plus per-epoch losses."""
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(dict(config))
    cfg.validate()
    if dataset.num_examples == 0:
        raise InvalidInputError("dataset has no positive training examples")
    model = init_model(cfg.model_type, dataset.num_users, dataset.num_items,
                       d=cfg.d, seed=child_seed(cfg.seed, "model-init"))
    is_mf = cfg.model_type == "mf"
    P, Q, bi = model.user_embeddings, model.item_embeddings, model.item_bias
    bu = model.user_bias if is_mf else None
    gb = np.array([model.global_bias])
    E = dataset.num_examples
    inv_sqrt_d = 1.0 / math.sqrt(cfg.d)

    if cfg.ips_eta > 0:
        table = build_propensity_table(dataset.popularity, cfg.ips_eta, cfg.ips_clip)
        ipsw = ips_weights(dataset.ex_item, table)
    else:
        ipsw = np.ones(E)

    constrained = cfg.omega > 0 and cfg.rule != "none"
    cf_state = None
    refresh_index = 0
    trace = []
    for epoch in range(cfg.epochs):
        in_phase2 = epoch >= cfg.pretrain_epochs
        if constrained and in_phase2 and _needs_refresh(epoch, cfg):
            model.global_bias = float(gb[0])
            if cfg.rule in DISCRETE_RULES:
                if is_mf:
                    cf_state = matching_retrain_filter(dataset, cfg.rule, cfg,
                                                       model, refresh_index)
                else:
                    cf_state = _build_attn_cf(dataset, model, cfg, refresh_index)
            refresh_index += 1

        order = spawn_rng(cfg.seed, "epoch-order", epoch).permutation(E)
        neg_u = spawn_rng(cfg.seed, "epoch-negatives", epoch).random(E)
        closs = 0.0
        if not (constrained and in_phase2):
            if is_mf:
                loss = kernels.mf_bpr_epoch(
                    P, Q, bu, bi, gb, dataset.ex_user, dataset.ex_item, order, neg_u,
                    dataset.elig_flat, dataset.elig_indptr, ipsw,
                    cfg.learning_rate, cfg.l2_lambda)
            else:
                loss = kernels.attn_bpr_epoch(
                    P, Q, bi, gb, dataset.ex_user, dataset.ex_item,
                    dataset.hist_flat, dataset.hist_indptr, order, neg_u,
                    dataset.elig_flat, dataset.elig_indptr, ipsw, inv_sqrt_d,
                    cfg.learning_rate, cfg.l2_lambda)
        elif cfg.rule == "c":
            noise_rng = spawn_rng(cfg.seed, "epoch-noise", epoch)
            loss = 0.0
            for start in range(0, E, CONTINUOUS_CHUNK):
                idx = order[start:start + CONTINUOUS_CHUNK]
                nu = neg_u[start:start + CONTINUOUS_CHUNK]
                noise = noise_rng.standard_normal((idx.size, cfg.mc_samples, cfg.d))
                gam = noise_rng.uniform(0.0, cfg.epsilon2, (idx.size, cfg.mc_samples))
                if is_mf:
                    lo, cl = kernels.mf_continuous_chunk(
                        P, Q, bu, bi, gb, dataset.ex_user, dataset.ex_item, idx, nu,
                        noise, gam, dataset.elig_flat, dataset.elig_indptr, ipsw,
                        cfg.omega, cfg.epsilon, cfg.learning_rate, cfg.l2_lambda)
                else:
                    lo, cl = kernels.attn_continuous_chunk(
                        P, Q, bi, gb, dataset.ex_user, dataset.ex_item,
                        dataset.hist_flat, dataset.hist_indptr, idx, nu, noise, gam,
                        dataset.elig_flat, dataset.elig_indptr, ipsw, inv_sqrt_d,
                        cfg.omega, cfg.epsilon, cfg.learning_rate, cfg.l2_lambda)
                loss += lo
                closs += cl
        elif is_mf:
            loss, closs = kernels.mf_discrete_epoch(
                P, Q, bu, bi, gb, dataset.ex_user, dataset.ex_item, order, neg_u,
                dataset.elig_flat, dataset.elig_indptr, ipsw,
                cf_state.p_clone, cfg.omega, cfg.epsilon,
                cfg.learning_rate, cfg.l2_lambda)
        else:
            loss, closs = kernels.attn_discrete_epoch(
                P, Q, bi, gb, dataset.ex_user, dataset.ex_item,
                dataset.hist_flat, dataset.hist_indptr,
                cf_state.cf_flat, cf_state.cf_hist_indptr, cf_state.cf_ex_indptr,
                order, neg_u, dataset.elig_flat, dataset.elig_indptr, ipsw,
                inv_sqrt_d, cfg.omega, cfg.epsilon,
                cfg.learning_rate, cfg.l2_lambda, cf_state.max_per_example)
        rank_mean = loss / E
        cons_mean = closs / E
        if not (math.isfinite(rank_mean) and math.isfinite(cons_mean)):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}: rank={rank_mean}, constraint={cons_mean}")
        trace.append((epoch, rank_mean, cons_mean))
    model.global_bias = float(gb[0])
    return TrainedModel(model, cfg, trace)


def save_trace(trace, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,rank_loss,constraint_loss\n")
        for epoch, rank_loss, cons_loss in trace:
            fh.write(f"{epoch},{rank_loss},{cons_loss}\n")
