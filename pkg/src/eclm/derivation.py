"""Personalized sub-model derivation under per-device resource budgets.

Importance of a module for a device is the mean gate mass over the device's
local samples. Derivation first force-selects each layer's most important
module (so every layer keeps at least one), then solves a 0/1 knapsack over
the remaining candidates in three resource dimensions (communication bytes,
training MACs per sample, peak training bytes). Small candidate sets are
solved exactly by branch-and-bound; larger ones by a density greedy with
improving swaps and a reported relaxation bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, InfeasibleBudgetError
from .modular import (
    ModularModel,
    ResourceCost,
    SubModelSpec,
    shared_cost,
)
from .nn.tensor import Tensor
from .selector import UnifiedSelector, select

EXACT_CANDIDATE_LIMIT = 24
DIMENSIONS = ("comm_bytes", "compute_macs", "mem_bytes")


@dataclass
class ImportanceVector:
    """Per-layer mean gate mass over a device's local data."""

    per_layer: list[np.ndarray]

    def __post_init__(self) -> None:
        for v in self.per_layer:
            if not np.allclose(v.sum(), 1.0, atol=1e-9):
                raise DataError("importance vectors must sum to 1 per layer")

    def get(self, layer: int, index: int) -> float:
        return float(self.per_layer[layer][index])


@dataclass(frozen=True)
class ResourceBudget:
    comm_bytes: int
    compute_macs: int
    mem_bytes: int

    def __post_init__(self) -> None:
        if min(self.comm_bytes, self.compute_macs, self.mem_bytes) <= 0:
            raise ConfigError("resource budgets must be positive")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.comm_bytes, self.compute_macs, self.mem_bytes], dtype=np.float64
        )

    def as_dict(self) -> dict:
        return {
            "comm_bytes": self.comm_bytes,
            "compute_macs": self.compute_macs,
            "mem_bytes": self.mem_bytes,
        }

    @classmethod
    def from_cost(cls, cost: ResourceCost) -> "ResourceBudget":
        return cls(cost.comm_bytes, cost.compute_macs, cost.mem_bytes)


def importance_profile(
    selector: UnifiedSelector, data: Dataset | np.ndarray, batch: int = 256
) -> ImportanceVector:
    """Per-layer mean of noise-free gate vectors over the local dataset."""
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("importance profile needs a nonempty dataset")
    sums = [np.zeros(h.out_dim) for h in selector.heads]
    for s in range(0, x.shape[0], batch):
        dec = select(selector, Tensor(x[s : s + batch]), "eval")
        for l, g in enumerate(dec.gates):
            sums[l] += g.sum(axis=0)
    return ImportanceVector([v / x.shape[0] for v in sums])


# ---------------------------------------------------------------------------
# knapsack


def _density_order(values: np.ndarray, costs: np.ndarray, caps: np.ndarray) -> np.ndarray:
    # zero-cost items (residual modules) sort first: free value
    norm = (costs / np.maximum(caps, 1.0)).sum(axis=1)
    with np.errstate(divide="ignore"):
        density = np.where(norm > 0, values / np.where(norm > 0, norm, 1.0), np.inf)
    return np.lexsort((np.arange(values.size), -values, -density))


def _fractional_bound(
    order_values: list[np.ndarray], order_costs: list[np.ndarray], remaining: np.ndarray
) -> float:
    """min over dimensions of the single-constraint fractional knapsack value.

    order_values[d]/order_costs[d] hold the remaining items pre-sorted by
    value/cost_d density for dimension d.
    """
    best = np.inf
    for d in range(len(order_values)):
        cap = remaining[d]
        take = 0.0
        for v, c in zip(order_values[d], order_costs[d]):
            if c <= 0:
                take += v
            elif c <= cap:
                cap -= c
                take += v
            else:
                take += v * (cap / c)
                break
        best = min(best, take)
    return best


def solve_knapsack(
    values: np.ndarray,
    costs: np.ndarray,
    caps: np.ndarray,
    method: str = "auto",
) -> tuple[np.ndarray, dict]:
    """Select items maximizing total value under per-dimension caps.

    values: [n], costs: [n, d], caps: [d]. Returns (chosen bool mask, info).
    Exact branch-and-bound up to EXACT_CANDIDATE_LIMIT items ('auto'); the
    greedy path reports its relaxation upper bound so the gap is visible.
    """
    values = np.asarray(values, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.float64)
    n = values.size
    if method not in ("auto", "exact", "greedy"):
        raise ConfigError(f"unknown knapsack method '{method}'")
    if n == 0:
        return np.zeros(0, dtype=bool), {"method": "empty", "value": 0.0}
    use = method
    if use == "auto":
        use = "exact" if n <= EXACT_CANDIDATE_LIMIT else "greedy"
    order = _density_order(values, costs, caps)
    v = values[order]
    c = costs[order]

    # per-dimension density orders for the fractional bounds
    dim_orders = []
    for d in range(c.shape[1]):
        with np.errstate(divide="ignore"):
            dens = np.where(c[:, d] > 0, v / np.where(c[:, d] > 0, c[:, d], 1.0), np.inf)
        dim_orders.append(np.lexsort((np.arange(n), -dens)))

    def bound(start: int, remaining: np.ndarray) -> float:
        ov, oc = [], []
        for d in range(c.shape[1]):
            keep = dim_orders[d][dim_orders[d] >= start]
            ov.append(v[keep])
            oc.append(c[keep][:, d])
        return _fractional_bound(ov, oc, remaining)

    def greedy_fill(start: int, remaining: np.ndarray) -> tuple[float, list[int]]:
        total, chosen = 0.0, []
        rem = remaining.copy()
        for i in range(start, n):
            if np.all(c[i] <= rem + 1e-9):
                rem -= c[i]
                total += v[i]
                chosen.append(i)
        return total, chosen

    if use == "greedy":
        value, chosen_local = greedy_fill(0, caps)
        chosen = set(chosen_local)
        improved = True
        passes = 0
        while improved and passes < 4:
            improved = False
            passes += 1
            used = c[sorted(chosen)].sum(axis=0) if chosen else np.zeros_like(caps)
            for i in sorted(chosen):
                for j in range(n):
                    if j in chosen:
                        continue
                    if v[j] <= v[i]:
                        continue
                    if np.all(used - c[i] + c[j] <= caps + 1e-9):
                        chosen.remove(i)
                        chosen.add(j)
                        used = used - c[i] + c[j]
                        value += v[j] - v[i]
                        improved = True
                        break
        # fill any remaining slack
        used = c[sorted(chosen)].sum(axis=0) if chosen else np.zeros_like(caps)
        for j in range(n):
            if j not in chosen and np.all(used + c[j] <= caps + 1e-9):
                chosen.add(j)
                used += c[j]
                value += v[j]
        ub = bound(0, caps)
        mask = np.zeros(n, dtype=bool)
        mask[sorted(chosen)] = True
        out = np.zeros(n, dtype=bool)
        out[order] = mask
        gap = max(0.0, ub - value)
        return out, {
            "method": "greedy",
            "value": float(value),
            "upper_bound": float(ub),
            "gap_bound": float(gap),
        }

    # exact branch and bound
    best_value, best_chosen = greedy_fill(0, caps)
    best_set = list(best_chosen)
    chosen_stack: list[int] = []
    nodes = 0

    def dfs(i: int, value: float, remaining: np.ndarray) -> None:
        nonlocal best_value, best_set, nodes
        nodes += 1
        if i == n:
            if value > best_value + 1e-12:
                best_value = value
                best_set = list(chosen_stack)
            return
        if value + bound(i, remaining) <= best_value + 1e-12:
            return
        if np.all(c[i] <= remaining + 1e-9):
            chosen_stack.append(i)
            dfs(i + 1, value + v[i], remaining - c[i])
            chosen_stack.pop()
        dfs(i + 1, value, remaining)

    dfs(0, 0.0, caps.copy())
    mask = np.zeros(n, dtype=bool)
    mask[best_set] = True
    out = np.zeros(n, dtype=bool)
    out[order] = mask
    return out, {"method": "bnb", "value": float(best_value), "nodes": nodes}


# ---------------------------------------------------------------------------
# derivation


def _cost_array(cost: ResourceCost) -> np.ndarray:
    return np.array([cost.comm_bytes, cost.compute_macs, cost.mem_bytes], dtype=np.float64)


def derive_submodel(
    model: ModularModel,
    selector: UnifiedSelector,
    importance: ImportanceVector,
    budget: ResourceBudget,
    method: str = "auto",
    device_id: int | None = None,
    round_index: int | None = None,
    candidate_layers: tuple[tuple[int, ...], ...] | None = None,
) -> tuple[SubModelSpec, dict]:
    """Pick per-layer module sets maximizing importance within the budget.

    Step 1 force-selects each layer's argmax-importance module; step 2 runs
    the knapsack over the remaining candidates with the residual budget.
    candidate_layers optionally restricts the pool (on-device re-derivation
    from cached modules). Raises InfeasibleBudgetError naming the violated
    dimension when even the forced minimum does not fit.
    """
    if len(importance.per_layer) != model.n_module_layers:
        raise ConfigError("importance vector does not match the model")
    remaining = budget.as_array()
    base = shared_cost(model, selector)
    remaining -= _cost_array(base)
    _check_remaining(remaining, "shared blocks")
    forced: list[int] = []
    for l, ml in enumerate(model.module_layers):
        pool = (
            candidate_layers[l]
            if candidate_layers is not None
            else tuple(ml.module_indices())
        )
        if not pool:
            raise ConfigError(f"layer {l} has an empty candidate pool")
        imp = importance.per_layer[l]
        pick = min(pool, key=lambda i: (-imp[i], i))
        forced.append(pick)
        remaining -= _cost_array(model.get_module(l, pick).cost)
    _check_remaining(remaining, "forced per-layer picks")
    candidates: list[tuple[int, int]] = []
    values: list[float] = []
    costs: list[np.ndarray] = []
    for l, ml in enumerate(model.module_layers):
        pool = (
            candidate_layers[l]
            if candidate_layers is not None
            else tuple(ml.module_indices())
        )
        for i in sorted(pool):
            if i == forced[l]:
                continue
            candidates.append((l, i))
            values.append(importance.get(l, i))
            costs.append(_cost_array(model.get_module(l, i).cost))
    if candidates:
        chosen, info = solve_knapsack(
            np.array(values), np.array(costs), remaining, method
        )
    else:
        chosen, info = np.zeros(0, dtype=bool), {"method": "empty", "value": 0.0}
    layers: list[list[int]] = [[f] for f in forced]
    for idx, (l, i) in enumerate(candidates):
        if chosen[idx]:
            layers[l].append(i)
    spec = SubModelSpec(
        layers=tuple(tuple(sorted(set(ls))) for ls in layers),
        device_id=device_id,
        round_index=round_index,
    )
    info = dict(info)
    info["forced"] = forced
    info["total_importance"] = float(
        sum(importance.get(l, i) for l, idx in enumerate(spec.layers) for i in idx)
    )
    return spec, info


def _check_remaining(remaining: np.ndarray, stage: str) -> None:
    for d, name in enumerate(DIMENSIONS):
        if remaining[d] < 0:
            raise InfeasibleBudgetError(
                name, needed=int(-remaining[d]), available=0
            )


def validate_budget(
    model: ModularModel,
    selector: UnifiedSelector,
    spec: SubModelSpec,
    budget: ResourceBudget,
) -> dict:
    """Report per-dimension utilization of the budget; never raises."""
    from .modular import cost_of

    cost = cost_of(model, selector, spec)
    report = {}
    for name in DIMENSIONS:
        used = getattr(cost, name)
        cap = getattr(budget, name)
        report[name] = {"used": used, "budget": cap, "utilization": used / cap}
    report["within_budget"] = all(report[d]["utilization"] <= 1.0 for d in DIMENSIONS)
    return report
