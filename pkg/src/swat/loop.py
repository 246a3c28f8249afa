"""Training-loop orchestration: schedules, per-epoch evaluation, metrics
emission, checkpointing, and the sensitivity sweep used for the
mode-by-mode robustness comparison."""

import math
import os
import time
from dataclasses import replace

import numpy as np

from . import flops as flops_mod
from .architectures import build_network, default_dataset
from .data import Batcher
from .engine import (SwatMode, TrainState, evaluate, train_step)
from .metrics import MetricsRecord
from .plan import Strategy, build_plan
from .sparsify import ThresholdCache


def resolve_exemptions(cfg, arch_info):
    exempt_first = cfg.exempt_first
    if exempt_first is None:
        exempt_first = Strategy(cfg.strategy) is Strategy.UNIFORM
    exempt_last = cfg.exempt_last
    if exempt_last is None:
        exempt_last = arch_info.exempt_last_default
    return exempt_first, exempt_last


def build_state(cfg, resume=None):
    """Fresh (or resumed) TrainState for the configured architecture."""
    arch = build_network(cfg.arch, dtype=cfg.dtype, seed=cfg.seed)
    net = arch.network if resume is None else resume["net"]
    exempt_first, exempt_last = resolve_exemptions(cfg, arch)
    plan = build_plan(cfg.strategy, net, cfg.sparsity,
                      exempt_first=exempt_first, exempt_last=exempt_last)
    cache = ThresholdCache(period=cfg.period)
    state = TrainState(net=net, cfg=cfg, plan=plan, cache=cache)
    if resume is not None:
        if resume.get("cache") is not None:
            state.cache = resume["cache"]
            state.cache.period = cfg.period
        state.iteration = resume["iteration"]
        state.epoch = resume["epoch"]
        state.frozen_masks = resume.get("frozen_masks")
    return state


def _mode_macs(net, plan, cfg):
    """Analytic per-iteration MAC counts split into forward/backward,
    reflecting which passes the active mode actually sparsifies."""
    sparse = flops_mod.training_flop_report(net, plan, batch=cfg.batch_size)
    s_fwd = sum(l.forward_macs for l in sparse.layers)
    s_bwd = sum(l.input_grad_macs + l.weight_grad_macs for l in sparse.layers)
    d_fwd = sum(l.forward_macs for l in sparse.baseline)
    d_bwd = sum(l.input_grad_macs + l.weight_grad_macs for l in sparse.baseline)
    mode = cfg.swat_mode()
    if mode is SwatMode.FULL:
        return s_fwd, s_bwd
    if mode is SwatMode.FORWARD_WEIGHT:
        return s_fwd, d_bwd
    if mode in (SwatMode.BACKWARD_WEIGHT_ACTIVATION, SwatMode.OUTPUT_GRAD):
        return d_fwd, s_bwd
    return d_fwd, d_bwd


def _epoch_sparsity(report_sums):
    w_zero, w_total, a_zero, a_total = report_sums
    return (w_zero / w_total if w_total else 0.0,
            a_zero / a_total if a_total else 0.0)


def val_batches(test_b, cfg):
    return test_b.iter(cfg.eval_batch_size)


def train_loop(cfg, train_b, test_b, state=None, data_rng=None,
               start_epoch=None, log=None, on_epoch_end=None):
    """Run the configured schedule; returns (network, history, state).

    Per-epoch validation evaluates the deployable model: Top-K-pruned
    weights when training in full SWAT mode, dense weights otherwise
    (sensitivity modes train a dense model by construction).
    """
    cfg.validate()
    if state is None:
        state = build_state(cfg)
    if data_rng is None:
        data_rng = np.random.default_rng([cfg.seed, 1])
    first_epoch = start_epoch if start_epoch is not None else state.epoch
    iters_per_epoch = max(1, math.ceil(train_b.n / cfg.batch_size))
    sparse_eval = cfg.swat_mode() is SwatMode.FULL and cfg.sparsity > 0
    t0 = time.perf_counter()
    history = []
    for epoch in range(first_epoch, cfg.epochs + 1):
        state.epoch = epoch
        perm = data_rng.permutation(train_b.n)
        loss_sum = acc_sum = 0.0
        seen = 0
        sums = [0, 0, 0, 0]  # weight zeroed/total, activation zeroed/total
        for start in range(0, train_b.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = train_b.take(idx, rng=data_rng)
            lr = cfg.lr_at(epoch, state.iteration, iters_per_epoch)
            loss, acc, reports = train_step(state, x, y, lr)
            loss_sum += loss * len(idx)
            acc_sum += acc * len(idx)
            seen += len(idx)
            for lid, rep in reports.items():
                sums[0] += rep["weight"].zeroed_count
                sums[1] += rep["weight"].total
                sums[2] += rep["activation"].zeroed_count
                sums[3] += rep["activation"].total
            if (cfg.freeze_topology_epoch == 0 and state.frozen_masks is None
                    and state.last_masks):
                state.frozen_masks = dict(state.last_masks)
        if cfg.freeze_topology_epoch == epoch and state.frozen_masks is None:
            state.frozen_masks = dict(state.last_masks)
        val_loss, val_acc = evaluate(state.net, val_batches(test_b, cfg),
                                     plan=state.plan, scope=cfg.topk_scope(),
                                     sparsify_inference=sparse_eval,
                                     frozen_masks=state.frozen_masks)
        w_sp, a_sp = _epoch_sparsity(sums)
        fwd_macs, bwd_macs = _mode_macs(state.net, state.plan, cfg)
        record = MetricsRecord(
            epoch=epoch, iter=state.iteration,
            train_loss=loss_sum / seen, train_acc=acc_sum / seen,
            val_loss=val_loss, val_acc=val_acc,
            avg_weight_sparsity=w_sp, avg_act_sparsity=a_sp,
            fwd_macs=fwd_macs, bwd_macs=bwd_macs,
            lr=cfg.lr_at(epoch, state.iteration - 1, iters_per_epoch),
            elapsed_seconds=time.perf_counter() - t0)
        history.append(record)
        if log:
            log(f"epoch {epoch:3d}  loss {record.train_loss:.4f}  "
                f"acc {record.train_acc:.4f}  val_acc {val_acc:.4f}  "
                f"w_sp {w_sp:.3f}  lr {record.lr:g}")
        if on_epoch_end:
            on_epoch_end(state, record, data_rng)
        state.epoch = epoch + 1
    return state.net, history, state


def make_batchers(cfg, train_split, test_split):
    dataset = cfg.dataset or default_dataset(cfg.arch)
    train_split = train_split.subset(cfg.train_samples)
    test_split = test_split.subset(cfg.test_samples)
    augment = cfg.augment and dataset == "cifar10"
    train_b = Batcher(train_split, dataset, dtype=cfg.dtype, augment=augment)
    test_b = Batcher(test_split, dataset, dtype=cfg.dtype, augment=False)
    return train_b, test_b


def sensitivity_sweep(cfg_base, train_split, test_split, modes, sparsities,
                      seeds=(0,), log=None):
    """One short training run per (mode, sparsity, seed); returns rows of
    final validation accuracy, ready for CSV emission."""
    rows = []
    for mode in modes:
        mode = SwatMode(mode)
        for sparsity in sparsities:
            for seed in seeds:
                cfg = replace(cfg_base, mode=mode.value, sparsity=float(sparsity),
                              seed=int(seed))
                train_b, test_b = make_batchers(cfg, train_split, test_split)
                _, history, _ = train_loop(cfg, train_b, test_b)
                rows.append({"mode": mode.value, "sparsity": float(sparsity),
                             "seed": int(seed), "val_acc": history[-1].val_acc})
                if log:
                    log(f"{mode.value} s={sparsity} seed={seed} "
                        f"-> val_acc {history[-1].val_acc:.4f}")
    return rows
