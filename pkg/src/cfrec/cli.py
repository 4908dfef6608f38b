"""Command-line interface.

Subcommands: ``simulate``, ``split``, ``train``, ``eval``, ``sweep``. Each
prints a one-line JSON summary naming every artifact it wrote. Exit codes:
0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import dataclass, fields

from cfrec.errors import InvalidInputError

SWEEPABLE_KEYS = ("omega", "epsilon", "epsilon2", "k", "rule",
                  "learning_rate", "l2_lambda")


@dataclass
class SimulateConfig:
    num_users: int = 200
    num_items: int = 300
    d_star: int = 16
    scale: float = 1.0
    seed: int = 0
    lambda_pop: float = 0.0
    lambda_pref: float = 0.0
    interactions_per_user: int = 30
    test_per_user: int = 20
    zipf_exponent: float = 1.0
    bias_mean: float = 0.0

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InvalidInputError(
                f"unknown simulate config keys: {', '.join(unknown)}; valid keys: "
                f"{', '.join(sorted(known))}")
        return cls(**doc)


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InvalidInputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"invalid JSON in {path}: {exc}") from None


def _summary(doc):
    print(json.dumps(doc))


def cmd_simulate(args):
    from cfrec import simulator
    from cfrec.dataset import write_interactions

    cfg = SimulateConfig.from_dict(_load_json(args.config))
    world = simulator.gen_world(cfg.num_users, cfg.num_items, cfg.d_star,
                                cfg.scale, cfg.seed, bias_mean=cfg.bias_mean)
    policy = simulator.gen_policy(cfg.num_items, cfg.lambda_pop, cfg.lambda_pref,
                                  cfg.seed, cfg.zipf_exponent)
    obs = simulator.gen_observational(world, policy, cfg.interactions_per_user, cfg.seed)
    test = simulator.gen_randomized_test(
        world, cfg.test_per_user, cfg.seed,
        exclude=simulator.observational_item_sets(obs))
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.tsv")
    test_path = os.path.join(args.out, "test.tsv")
    world_path = os.path.join(args.out, "world.json")
    write_interactions(train_path, obs)
    write_interactions(test_path, test)
    simulator.save_world(world, world_path)
    _summary({"command": "simulate", "train": train_path, "test": test_path,
              "world": world_path, "num_users": cfg.num_users,
              "num_items": cfg.num_items, "observational": len(obs),
              "randomized_test": len(test)})
    return 0


def cmd_split(args):
    from cfrec import dataset as ds

    if args.test:
        train_log, test_log, nu, ni = ds.load_interaction_pair(args.input, args.test)
        split = ds.randomized_trial_split(train_log, test_log, num_users=nu,
                                          num_items=ni, max_history=args.max_history,
                                          seed=args.seed)
    else:
        log, nu, ni = ds.load_interactions(args.input)
        split = ds.leave_one_out_split(log, num_users=nu, num_items=ni,
                                       max_history=args.max_history, seed=args.seed)
    ds.save_split(split, args.out)
    _summary({"command": "split", "out": args.out,
              "train": os.path.join(args.out, "train.tsv"),
              "valid": os.path.join(args.out, "valid.tsv"),
              "test": os.path.join(args.out, "test.tsv"),
              "meta": os.path.join(args.out, "meta.json"),
              "num_users": split.num_users, "num_items": split.num_items,
              "train_size": len(split.train), "valid_size": len(split.validation),
              "test_size": len(split.test)})
    return 0


def cmd_train(args):
    from cfrec.dataset import load_split
    from cfrec.models import save_checkpoint
    from cfrec.training import TrainConfig, save_trace, train

    cfg = TrainConfig.from_dict(_load_json(args.config))
    dataset = load_split(args.data)
    result = train(dataset, cfg)
    save_checkpoint(result.model, args.out)
    trace_path = os.path.splitext(args.out)[0] + ".trace.csv"
    save_trace(result.trace, trace_path)
    last = result.trace[-1] if result.trace else (None, float("nan"), float("nan"))
    _summary({"command": "train", "checkpoint": args.out, "trace": trace_path,
              "epochs": cfg.epochs, "rank_loss": last[1], "constraint_loss": last[2]})
    return 0


def cmd_eval(args):
    from cfrec.dataset import load_split
    from cfrec.evaluation import evaluate, write_metrics
    from cfrec.models import load_checkpoint

    model = load_checkpoint(args.model)
    dataset = load_split(args.data)
    report = evaluate(model, dataset, args.partition, dataset.seed)
    out = args.out or "metrics.json"
    doc = write_metrics(report, out, model=model.model_type,
                        partition=args.partition, seed=dataset.seed)
    _summary({"command": "eval", "metrics": out, **doc})
    return 0


def _expand_grid(grid):
    keys = list(grid)
    for key in keys:
        if key not in SWEEPABLE_KEYS:
            raise InvalidInputError(
                f"grid key {key!r} not sweepable; allowed: {', '.join(SWEEPABLE_KEYS)}")
        if not isinstance(grid[key], list) or not grid[key]:
            raise InvalidInputError(f"grid for {key!r} must be a non-empty list")
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def cmd_sweep(args):
    from cfrec.dataset import load_split
    from cfrec.evaluation import evaluate, write_metrics
    from cfrec.models import save_checkpoint
    from cfrec.training import TrainConfig, train

    doc = _load_json(args.config)
    unknown = sorted(set(doc) - {"base", "grid"})
    if unknown:
        raise InvalidInputError(
            f"unknown sweep config keys: {', '.join(unknown)}; expected 'base' and 'grid'")
    base = doc.get("base", {})
    grid = doc.get("grid", {})
    if not grid:
        raise InvalidInputError("sweep needs a non-empty grid")
    TrainConfig.from_dict(dict(base))  # validate base keys eagerly
    dataset = load_split(args.data)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    best = None  # (ndcg, index, config, model, report)
    keys = list(grid)
    for idx, point in enumerate(_expand_grid(grid)):
        merged = dict(base)
        merged.update(point)
        try:
            cfg = TrainConfig.from_dict(merged)
            result = train(dataset, cfg)
            report = evaluate(result.model, dataset, "validation", dataset.seed)
            rows.append((idx, point, "ok", report.ndcg_at_10, report.hit_at_1, ""))
            if best is None or report.ndcg_at_10 > best[0]:
                best = (report.ndcg_at_10, idx, cfg, result.model, report)
        except Exception as exc:  # a failed grid point is recorded, not fatal
            rows.append((idx, point, "failed", "", "", str(exc).replace("\n", " ")))

    sweep_path = os.path.join(args.out, "sweep.csv")
    with open(sweep_path, "w", encoding="utf-8") as fh:
        fh.write("point," + ",".join(keys) + ",status,val_ndcg@10,val_hit@1,error\n")
        for idx, point, status, ndcg, hit, err in rows:
            vals = ",".join(str(point[k]) for k in keys)
            fh.write(f"{idx},{vals},{status},{ndcg},{hit},\"{err}\"\n")

    if best is None:
        print("sweep: every grid point failed", file=sys.stderr)
        _summary({"command": "sweep", "sweep": sweep_path, "best": None})
        return 1

    _, idx, cfg, model, val_report = best
    model_path = os.path.join(args.out, "best_model.json")
    save_checkpoint(model, model_path)
    test_report = evaluate(model, dataset, "test", dataset.seed)
    metrics_path = os.path.join(args.out, "best_test_metrics.json")
    write_metrics(test_report, metrics_path, model=cfg.model_type,
                  partition="test", seed=dataset.seed)
    best_path = os.path.join(args.out, "best.json")
    with open(best_path, "w", encoding="utf-8") as fh:
        json.dump({
            "point": idx,
            "config": cfg.to_dict(),
            "validation": {"ndcg@10": val_report.ndcg_at_10,
                           "hit@1": val_report.hit_at_1},
            "test": {"ndcg@10": test_report.ndcg_at_10,
                     "hit@1": test_report.hit_at_1},
        }, fh, indent=2)
        fh.write("\n")
    _summary({"command": "sweep", "sweep": sweep_path, "best": best_path,
              "best_model": model_path, "best_test_metrics": metrics_path,
              "best_point": idx,
              "validation_ndcg@10": val_report.ndcg_at_10,
              "test_ndcg@10": test_report.ndcg_at_10})
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cfrec",
        description="Counterfactual-constrained collaborative filtering toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic world and logs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", help="split a rating log into train/valid/test")
    p.add_argument("--input", required=True)
    p.add_argument("--test", default=None,
                   help="externally collected test log (randomized-trial style)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-history", type=int, default=10)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a split directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--partition", required=True, choices=["validation", "test"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-search hyperparameters")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
