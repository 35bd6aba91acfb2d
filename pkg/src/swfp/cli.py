"""Command-line front end: pretrain, train, eval, sweep and toy.

Exit codes: 0 success, 2 input error, 3 checkpoint/environment mismatch,
4 numerical failure (including a run flagged for skipped updates).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import trainer as tr
from .env import UsageError
from .flow import IntegrationError
from .jko import UsageError as JkoUsageError
from .nn import ConfigurationError

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("swfp")


def _config(args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.env is not None:
        over["env"] = args.env
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return tr.load_config(path, args.scale, **over)
    return tr.PROFILES[args.scale](**over)


def _out(args, default):
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_policy(path, cfg, env):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    stack, critic, meta = tr.load_checkpoint(path)
    if stack.action_dim != env.action_dim or stack.state_dim != env.state_dim:
        raise tr.CompatibilityError(
            f"{path} has state/action dims ({stack.state_dim}, {stack.action_dim}), "
            f"environment {cfg.env} has ({env.state_dim}, {env.action_dim})")
    return stack, critic, meta


def _json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n")


def _plain(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating, np.bool_)):
        return x.item()
    raise TypeError(type(x))


# -- subcommands -------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = _config(args)
    env = tr.build_env(cfg)
    states = actions = None
    if args.dataset:
        path = Path(args.dataset)
        if not path.is_file():
            raise FileNotFoundError(f"dataset not found: {path}")
        states, actions = tr.read_dataset(path, env.state_dim, env.action_dim)
    stack, losses = tr.pretrain(cfg, env, states, actions)
    out = _out(args, "runs/pretrain")
    ckpt = out / "pretrained.ckpt"
    tr.save_checkpoint(ckpt, stack, extra={"config": cfg.to_dict()})
    n = len(actions) if actions is not None else cfg.dataset_size
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "lr", "loss"])
        for i, loss in enumerate(losses):
            lr = tr.cosine_lr(i, len(losses), cfg.pretrain_lr, cfg.pretrain_lr_final)
            w.writerow([i, (i * min(cfg.pretrain_batch, n)) // n, repr(lr), repr(float(loss))])
    print(ckpt)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    env = tr.build_env(cfg)
    stack, _, meta = _load_policy(args.checkpoint, cfg, env)
    if stack.tied:
        stack = stack.with_blocks(cfg.block_count)
    res = tr.train_online(cfg, stack, env, progress=_progress if args.verbose else None)
    out = _out(args, "runs/train")
    manifest = tr.write_run(out, cfg, res, tr.file_digest(args.checkpoint))
    print(json.dumps({"out": str(out), "content_hash": manifest["content_hash"],
                      "flagged": res.flagged}))
    return EXIT_NUMERIC if res.flagged else EXIT_OK


def _progress(row):
    log.info("epoch %d critic %.4f objective %.4f", row["epoch"], row["critic_loss"],
             row["actor_objective"])


def cmd_eval(args):
    cfg = _config(args)
    env = tr.build_env(cfg)
    stack, _, _ = _load_policy(args.checkpoint, cfg, env)
    alpha = cfg.jko.alpha if cfg.env == "bandit" else None
    report = tr.evaluate(stack, env, args.episodes, seed=cfg.seed + 1000, alpha=alpha,
                         oracle_M=min(cfg.oracle_samples, args.episodes))
    report["episodes"] = args.episodes
    out = _out(args, "runs/eval")
    _json(out / "eval.json", report)
    print(json.dumps(report, sort_keys=True, default=_plain))
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    blocks = [int(x) for x in args.blocks.split(",")]
    scales = [float(x) for x in args.scales.split(",")]
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    res = tr.sweep(cfg, blocks, scales, seeds, epochs=args.epochs, workers=args.workers)
    out = _out(args, "runs/sweep")
    res.to_csv(out / "runs.csv", out / "aggregate.csv", out / "baselines.csv")
    checks = {k: {"value": v, "passed": ok} for k, (v, ok) in tr.sweep_checks(res).items()}
    _json(out / "checks.json", checks)
    print(json.dumps(checks, sort_keys=True))
    failed = [r for r in res.rows if r["error"]]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_toy(args):
    """Pretrain and fine-tune the N = 6 toy, then dump plot-ready data."""
    cfg = _config(args)
    if args.epochs is not None:
        cfg = cfg.with_overrides(epochs=args.epochs)
    if cfg.env != "bandit":
        raise tr.ConfigError("the toy bundle needs the bandit environment")
    env = tr.build_env(cfg)
    pre, _ = tr.pretrain(cfg, env)
    stack = pre.with_blocks(cfg.block_count)
    res = tr.train_online(cfg, stack, env)
    out = _out(args, "runs/toy")
    _, demos = tr.behaviour_dataset(env, cfg.dataset_size, tr._seeds(cfg.seed, 2)[0])
    iterations, grid = tr.figure_data(res.stack, env, cfg.jko.alpha, M=args.particles,
                                      seed=cfg.seed)
    with open(out / "particles.jsonl", "w") as fh:
        for n, cloud in enumerate(iterations):
            fh.write(json.dumps({"iteration": n, "t": n / cfg.block_count,
                                 "particles": cloud.tolist()}) + "\n")
    _json(out / "density_grid.json", grid)
    _json(out / "behaviour_data.json", {"actions": demos})
    manifest = tr.write_run(out, cfg, res)
    print(json.dumps({"out": str(out), "content_hash": manifest["content_hash"]}))
    return EXIT_NUMERIC if res.flagged else EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of TrainConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--scale", choices=sorted(tr.PROFILES), default="toy")
    common.add_argument("--env", choices=("bandit", "pointmass"))
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="swfp", description="JKO block-wise flow policy fine-tuning")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("pretrain", parents=[common], help="flow-matching behaviour cloning")
    sp.add_argument("--dataset", help="JSON-lines of {state, action}; generated when omitted")
    sp.set_defaults(func=cmd_pretrain)
    sp = sub.add_parser("train", parents=[common], help="online fine-tuning")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=1000)
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("sweep", parents=[common], help="block-count and W2-scale sweep")
    sp.add_argument("--blocks", default="1,2,3,4,5,6,7,8")
    sp.add_argument("--scales", default="0.1,0.4,1,5")
    sp.add_argument("--seeds", type=int, default=10, help="number of seeds from --seed")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("toy", parents=[common], help="toy run plus figure data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--particles", type=int, default=1000)
    sp.set_defaults(func=cmd_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except tr.CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (FloatingPointError, IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, tr.ConfigError, ConfigurationError, UsageError,
            JkoUsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
