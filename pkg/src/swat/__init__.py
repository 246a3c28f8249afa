"""Sparse weight/activation training: Top-K sparsified forward/backward
passes with dense gradient updates, per-layer sparsity planning, analytic
FLOP accounting, and a desk-scale experiment harness."""

__version__ = "0.1.0"

from .engine import (AblationConfig, SwatMode, TrainConfig, backward_pass,
                     evaluate, forward_pass, parameter_update, train_step)
from .loop import sensitivity_sweep, train_loop
from .network import Network
from .plan import (SparsityPlan, Strategy, network_average_sparsity, plan_erk,
                   plan_momentum, plan_uniform)
from .sparsify import (SparsifyReport, ThresholdCache, TopKScope,
                       cache_thresholds, channel_topk, kth_magnitude,
                       random_mask, sparsification_angle, topk_exact,
                       topk_threshold_apply)

__all__ = [
    "AblationConfig", "Network", "SparsifyReport", "SparsityPlan", "Strategy",
    "SwatMode", "ThresholdCache", "TopKScope", "TrainConfig", "backward_pass",
    "cache_thresholds", "channel_topk", "evaluate", "forward_pass",
    "kth_magnitude", "network_average_sparsity", "parameter_update",
    "plan_erk", "plan_momentum", "plan_uniform", "random_mask",
    "sensitivity_sweep", "sparsification_angle", "topk_exact",
    "topk_threshold_apply", "train_loop", "train_step",
]
