"""Command-line front door.

Subcommands:
  train        run a full experiment from a config file
  flops        print the analytic FLOP-reduction report for an architecture
  eval         evaluate a checkpoint on a dataset
  sensitivity  accuracy-vs-sparsity sweep across sparsification modes
"""

import argparse
import os
import sys

import numpy as np

from .architectures import arch_names, build_network, default_dataset
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ConfigError, dump_config, load_config
from .data import load_dataset
from .engine import SENSITIVITY_MODES, SwatMode, evaluate
from .flops import training_flop_report
from .loop import (build_state, make_batchers, resolve_exemptions,
                   sensitivity_sweep, train_loop, val_batches)
from .metrics import MetricsWriter
from .plan import build_plan
from .sparsify import TopKScope


def _cmd_train(args):
    overrides = {"seed": args.seed}
    cfg = load_config(args.config, overrides=overrides)
    out_dir = args.out_dir
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        print(f"error: output directory {out_dir} is not empty (use --force)",
              file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    resume = None
    if args.resume:
        net, ckpt_cfg, state_extra = checkpoint_load(args.resume)
        cfg = ckpt_cfg
        resume = dict(state_extra, net=net)
    dataset = cfg.dataset or default_dataset(cfg.arch)
    train_split, test_split = load_dataset(dataset, args.data_dir)
    train_b, test_b = make_batchers(cfg, train_split, test_split)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(dump_config(cfg))
    state = build_state(cfg, resume=resume)
    data_rng = np.random.default_rng([cfg.seed, 1])
    if resume is not None:
        data_rng.bit_generator.state = resume["rng_state"]
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    ckpt_path = os.path.join(out_dir, "checkpoint.swat")

    def on_epoch_end(st, record, rng):
        writer.append(record)
        checkpoint_save(ckpt_path, st.net, cfg, rng,
                        iteration=st.iteration, epoch=record.epoch + 1,
                        cache=st.cache, frozen_masks=st.frozen_masks)

    net, history, state = train_loop(cfg, train_b, test_b, state=state,
                                     data_rng=data_rng, log=print,
                                     on_epoch_end=on_epoch_end)
    with open(os.path.join(out_dir, "plan.txt"), "w") as f:
        f.write(state.plan.to_table(net) + "\n")
    report = training_flop_report(net, state.plan, batch=1)
    with open(os.path.join(out_dir, "flops.txt"), "w") as f:
        f.write(report.to_table() + "\n")
    with open(os.path.join(out_dir, "flops.csv"), "w") as f:
        f.write("\n".join(report.to_csv_rows()) + "\n")
    print(f"final val_acc {history[-1].val_acc:.4f}; artifacts in {out_dir}")
    return 0


def _cmd_flops(args):
    arch = build_network(args.arch)
    scope = "channel" if args.structured else "nchw"
    cfg_like_exempt_last = arch.exempt_last_default if args.exempt_last is None \
        else args.exempt_last
    plan = build_plan(args.plan, arch.network, args.sparsity,
                      exempt_first=None, exempt_last=cfg_like_exempt_last)
    report = training_flop_report(arch.network, plan, batch=1,
                                  baseline=args.baseline)
    if args.csv:
        print("\n".join(report.to_csv_rows()))
    else:
        print(f"architecture {args.arch} (weight scope {scope}), "
              f"plan {args.plan}, target sparsity {args.sparsity}")
        print(report.to_table())
    return 0


def _cmd_eval(args):
    net, cfg, _ = checkpoint_load(args.checkpoint)
    dataset = cfg.dataset or default_dataset(cfg.arch)
    _, test_split = load_dataset(dataset, args.data_dir)
    _, test_b = make_batchers(cfg, test_split, test_split)
    arch = build_network(cfg.arch)
    exempt_first, exempt_last = resolve_exemptions(cfg, arch)
    plan = build_plan(cfg.strategy, net, cfg.sparsity,
                      exempt_first=exempt_first, exempt_last=exempt_last)
    loss, acc = evaluate(net, val_batches(test_b, cfg), plan=plan,
                         scope=cfg.topk_scope(),
                         sparsify_inference=args.sparse_inference)
    print(f"val_loss {loss:.6f}  val_acc {acc:.4f}"
          f"{'  (sparse weights)' if args.sparse_inference else ''}")
    return 0


def _cmd_sensitivity(args):
    cfg = load_config(args.config) if args.config else load_config(text="")
    cfg.arch = args.arch
    cfg.epochs = args.epochs
    cfg.lr_schedule = ((1, args.epochs, cfg.lr),)
    if args.samples:
        cfg.train_samples = args.samples
    dataset = args.dataset or default_dataset(args.arch)
    cfg.dataset = dataset
    train_split, test_split = load_dataset(dataset, args.data_dir)
    if args.mode == "all":
        modes = [m.value for m in SENSITIVITY_MODES]
    else:
        modes = [SwatMode(args.mode).value]
    sparsities = [float(s) for s in args.sparsities.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = sensitivity_sweep(cfg, train_split, test_split, modes, sparsities,
                             seeds=seeds, log=print if not args.quiet else None)
    lines = ["mode,sparsity,seed,val_acc"]
    lines += [f"{r['mode']},{r['sparsity']},{r['seed']},{r['val_acc']!r}" for r in rows]
    text = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="swat",
                                description="sparse weight/activation training")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(fn=_cmd_train)

    f = sub.add_parser("flops", help="analytic FLOP report")
    f.add_argument("--arch", required=True, choices=arch_names())
    f.add_argument("--sparsity", type=float, required=True)
    f.add_argument("--plan", default="uniform", choices=["uniform", "erk", "momentum"])
    f.add_argument("--structured", action="store_true")
    f.add_argument("--baseline", default="dense",
                   choices=["dense", "default-activation"])
    f.add_argument("--exempt-last", type=lambda s: s == "true", default=None)
    f.add_argument("--csv", action="store_true")
    f.set_defaults(fn=_cmd_flops)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-dir", required=True)
    e.add_argument("--sparse-inference", action="store_true")
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("sensitivity", help="mode/sparsity sensitivity sweep")
    s.add_argument("--arch", required=True, choices=arch_names())
    s.add_argument("--mode", required=True,
                   help="a SwatMode value or 'all' for the sensitivity set")
    s.add_argument("--sparsities", required=True, help="comma-separated list")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--dataset", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--seeds", default="0")
    s.add_argument("--samples", type=int, default=0,
                   help="cap on training samples per run")
    s.add_argument("--out", default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=_cmd_sensitivity)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
