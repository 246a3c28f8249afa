"""Per-layer sparsity distribution strategies.

A plan assigns every parameterized layer a target weight sparsity, with
activation sparsity equal to it by construction. Batchnorm layers are
always exempt; the first conv/linear layer is exempt under the uniform
strategy (and optionally the last, e.g. for WRN-16-8); non-uniform
strategies expose the same exemptions as flags.

Strategies:

* uniform: every non-exempt layer gets exactly the target.
* erk: per-layer density proportional to sum(dims)/prod(dims) of the
  weight tensor, globally scaled (with iterative clamping at density 1)
  so the parameter-weighted average sparsity meets the target.
* momentum: per-layer density proportional to the mean |momentum| of the
  currently active weights, with a density floor, rescaled to the same
  parameter-weighted target. Degenerates to uniform when all layers
  score equally (including the all-zero buffers at initialization).
"""

import enum
from dataclasses import dataclass

import numpy as np

from .network import BatchNorm, is_param_layer, layer_kind_name

# ERK/momentum solver must hit the target average within half a point
SOLVER_TOL = 0.005
MOMENTUM_MIN_DENSITY = 0.02


class Strategy(enum.Enum):
    UNIFORM = "uniform"
    ERK = "erk"
    MOMENTUM = "momentum"


@dataclass(frozen=True)
class PlanEntry:
    layer_id: int
    kind: str
    weight_sparsity: float
    activation_sparsity: float
    exempt: bool


@dataclass(frozen=True)
class SparsityPlan:
    strategy: Strategy
    target: float
    entries: dict  # layer_id -> PlanEntry

    def entry(self, layer_id):
        if layer_id not in self.entries:
            raise KeyError(f"no plan entry for layer {layer_id}")
        return self.entries[layer_id]

    def sparsity(self, layer_id):
        return self.entry(layer_id).weight_sparsity

    def to_table(self, network):
        lines = [f"{'layer':>5}  {'kind':<10} {'params':>10}  {'sparsity':>8}  exempt"]
        for lid in sorted(self.entries):
            e = self.entries[lid]
            n = network.weight_count(lid) if is_param_layer(network.layers[lid]) else \
                sum(p.size for p in network.params[lid].values())
            lines.append(f"{lid:>5}  {e.kind:<10} {n:>10}  {e.weight_sparsity:>8.4f}  "
                         f"{'yes' if e.exempt else 'no'}")
        return "\n".join(lines)


def _check_target(target):
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target sparsity must be in [0, 1], got {target}")


def _exempt_ids(network, exempt_first, exempt_last):
    exempt = set()
    if exempt_first and network.first_param_layer() is not None:
        exempt.add(network.first_param_layer())
    if exempt_last and network.last_param_layer() is not None:
        exempt.add(network.last_param_layer())
    return exempt


def _assemble(network, strategy, target, sparsities, exempt):
    entries = {}
    for lid, spec in enumerate(network.layers):
        if is_param_layer(spec):
            s = 0.0 if lid in exempt else sparsities[lid]
            entries[lid] = PlanEntry(lid, layer_kind_name(spec), s, s, lid in exempt)
        elif isinstance(spec, BatchNorm):
            entries[lid] = PlanEntry(lid, "batchnorm", 0.0, 0.0, True)
    return SparsityPlan(strategy, target, entries)


def plan_uniform(network, target, exempt_first=True, exempt_last=False):
    """First layer dense, the target applied uniformly everywhere else."""
    _check_target(target)
    exempt = _exempt_ids(network, exempt_first, exempt_last)
    sparsities = {lid: target for lid in network.param_layer_indices()}
    return _assemble(network, Strategy.UNIFORM, target, sparsities, exempt)


def _solve_budget(network, target, exempt, raw_scores, floor=0.0):
    """Scale raw per-layer density scores to meet the global density budget.

    Iteratively clamps layers at density 1 (and at the floor) and
    re-solves the scale on the free set, mirroring the usual
    Erdos-Renyi-kernel budgeting procedure.
    """
    ids = network.param_layer_indices()
    counts = {lid: network.weight_count(lid) for lid in ids}
    total = sum(counts.values())
    budget = (1.0 - target) * total - sum(counts[lid] for lid in exempt)
    free = [lid for lid in ids if lid not in exempt]
    if budget < -1e-9 or not free and budget > 1e-9:
        raise ValueError(
            f"infeasible sparsity target {target}: exempt layers alone exceed the "
            f"density budget")
    pinned = {}
    densities = {}
    for _ in range(len(free) + 1):
        active = [lid for lid in free if lid not in pinned]
        remaining = budget - sum(counts[lid] * d for lid, d in pinned.items())
        if not active:
            break
        mass = sum(counts[lid] * raw_scores[lid] for lid in active)
        if mass <= 0.0:
            # no usable signal: spread the remaining budget uniformly
            d = remaining / sum(counts[lid] for lid in active)
            for lid in active:
                densities[lid] = d
            scale = None
        else:
            scale = remaining / mass
            for lid in active:
                densities[lid] = scale * raw_scores[lid]
        over = [lid for lid in active if densities[lid] > 1.0]
        under = [lid for lid in active if densities[lid] < floor]
        if not over and not under:
            break
        for lid in over:
            pinned[lid] = 1.0
        for lid in under:
            pinned[lid] = floor
    densities.update(pinned)
    for lid in exempt:
        densities[lid] = 1.0
    achieved = 1.0 - sum(counts[lid] * densities[lid] for lid in ids) / total
    if abs(achieved - target) > SOLVER_TOL or any(
            not (0.0 <= d <= 1.0 + 1e-12) for d in densities.values()):
        raise ValueError(
            f"infeasible sparsity target {target}: solver reached {achieved:.4f} "
            f"(clamps at floor {floor} / density 1 leave no feasible scale)")
    return {lid: float(min(d, 1.0)) for lid, d in densities.items()}


def plan_erk(network, target, exempt_first=False, exempt_last=False):
    """Erdos-Renyi-kernel scaling: bigger layers receive higher sparsity."""
    _check_target(target)
    exempt = _exempt_ids(network, exempt_first, exempt_last)
    raw = {}
    for lid in network.param_layer_indices():
        shape = network.params[lid]["weight"].shape
        raw[lid] = float(np.sum(shape) / np.prod(shape))
    densities = _solve_budget(network, target, exempt, raw)
    sparsities = {lid: 1.0 - d for lid, d in densities.items()}
    return _assemble(network, Strategy.ERK, target, sparsities, exempt)


def plan_momentum(network, target, momentum_buffers=None, active_masks=None,
                  min_density=MOMENTUM_MIN_DENSITY,
                  exempt_first=False, exempt_last=False):
    """Momentum-guided allocation: layers whose active weights carry less
    average momentum magnitude retain fewer non-zero elements."""
    _check_target(target)
    exempt = _exempt_ids(network, exempt_first, exempt_last)
    raw = {}
    for lid in network.param_layer_indices():
        buf = (momentum_buffers[lid] if momentum_buffers is not None
               else network.momentum[lid]["weight"])
        mags = np.abs(buf)
        if active_masks is not None and active_masks.get(lid) is not None:
            mask = active_masks[lid]
            raw[lid] = float(mags[mask].mean()) if mask.any() else 0.0
        else:
            raw[lid] = float(mags.mean())
    scores = [raw[lid] for lid in raw]
    if scores and max(scores) - min(scores) < 1e-30:
        # symmetric case (e.g. fresh zero buffers): fall back to uniform mass
        raw = {lid: 1.0 for lid in raw}
    densities = _solve_budget(network, target, exempt, raw, floor=min_density)
    sparsities = {lid: 1.0 - d for lid, d in densities.items()}
    return _assemble(network, Strategy.MOMENTUM, target, sparsities, exempt)


def build_plan(strategy, network, target, exempt_first=None, exempt_last=False, **kw):
    """Dispatch by strategy; exempt_first defaults to True only for uniform."""
    strategy = Strategy(strategy) if not isinstance(strategy, Strategy) else strategy
    if exempt_first is None:
        exempt_first = strategy is Strategy.UNIFORM
    if strategy is Strategy.UNIFORM:
        return plan_uniform(network, target, exempt_first, exempt_last)
    if strategy is Strategy.ERK:
        return plan_erk(network, target, exempt_first, exempt_last)
    return plan_momentum(network, target, exempt_first=exempt_first,
                         exempt_last=exempt_last, **kw)


def activation_input_counts(network):
    """Per-sample element count of each conv/linear layer's input tensor."""
    counts = {}
    for lid in network.param_layer_indices():
        src = network.wiring[lid][0]
        shape = network.input_shape if src < 0 else network.shapes[src]
        counts[lid] = int(np.prod(shape))
    return counts


def network_average_sparsity(plan, network):
    """(avg weight sparsity, avg activation sparsity) over conv/linear layers.

    The weight average weights each layer by its parameter count, the
    activation average by its input activation element count, which is
    why the two diverge for non-uniform plans.
    """
    ids = network.param_layer_indices()
    w_counts = {lid: network.weight_count(lid) for lid in ids}
    a_counts = activation_input_counts(network)
    w_total = sum(w_counts.values())
    a_total = sum(a_counts.values())
    w_avg = sum(w_counts[lid] * plan.entry(lid).weight_sparsity for lid in ids) / w_total
    a_avg = sum(a_counts[lid] * plan.entry(lid).activation_sparsity for lid in ids) / a_total
    return w_avg, a_avg
