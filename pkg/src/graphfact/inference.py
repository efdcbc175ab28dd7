"""Bucket elimination and weighted mini-bucket (WMB) marginal inference.

All tables are kept in log space. Two routes produce marginals:

* :func:`exact_marginals` runs plain sum-product variable elimination once per
  query variable, eliminating every other variable along the given order.
* :func:`wmb_marginals` runs one upward pass of weighted mini-bucket
  elimination (uniform weights, no weight or cost-shifting optimisation)
  followed by one downward pass over the resulting mini-bucket tree.

When every bucket fits in a single mini-bucket (``ibound >= width + 1``) the
WMB tree is an exact bucket tree and both routes agree to rounding error.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from graphfact.factor_graph import (
    ContractError,
    DegenerateModelError,
    GraphicalModel,
    MarginalTable,
)

DEFAULT_IBOUND = 6


class InferenceMode(str, enum.Enum):
    EXACT = "exact"
    WMB = "wmb"


@dataclass(frozen=True)
class InferenceConfig:
    ibound: int = DEFAULT_IBOUND
    mode: InferenceMode = InferenceMode.WMB

    def __post_init__(self):
        if int(self.ibound) < 1:
            raise ContractError(f"ibound must be >= 1, got {self.ibound}")


# -- log-space tables -------------------------------------------------------


def _lse(a: np.ndarray, axis) -> np.ndarray:
    """log-sum-exp that maps all-(-inf) slices to -inf without warnings."""
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    s = np.where(np.isneginf(m), -np.inf, s)
    return np.squeeze(s, axis=axis)


@dataclass
class _LogTable:
    vars: tuple[int, ...]
    arr: np.ndarray

    def expand(self, target: Sequence[int]) -> np.ndarray:
        order = sorted(range(len(self.vars)), key=lambda i: target.index(self.vars[i]))
        a = np.transpose(self.arr, order) if self.vars else self.arr
        shape = [2 if v in self.vars else 1 for v in target]
        return np.reshape(a, shape)

    def sum_out(self, drop: Iterable[int]) -> _LogTable:
        drop = [v for v in drop if v in self.vars]
        if not drop:
            return self
        axes = tuple(self.vars.index(v) for v in drop)
        keep = tuple(v for v in self.vars if v not in drop)
        return _LogTable(keep, _lse(self.arr, axes))

    def keep(self, keep: Iterable[int]) -> _LogTable:
        keep = set(keep)
        return self.sum_out([v for v in self.vars if v not in keep])


def _combine(tables: Sequence[_LogTable], extra: Iterable[int] = ()) -> _LogTable:
    scope: list[int] = []
    for t in tables:
        for v in t.vars:
            if v not in scope:
                scope.append(v)
    for v in extra:
        if v not in scope:
            scope.append(v)
    scope.sort()
    arr = np.zeros((2,) * len(scope))
    for t in tables:
        arr = arr + t.expand(scope)
    return _LogTable(tuple(scope), arr)


def _log_tables(model: GraphicalModel) -> list[_LogTable]:
    out = []
    with np.errstate(divide="ignore"):
        for f in model.factors:
            out.append(_LogTable(f.scope, np.log(f.array())))
    return out


def _normalize_pair(logp: np.ndarray) -> tuple[float, float]:
    z = _lse(logp, 0)
    if not np.isfinite(z):
        raise DegenerateModelError("partition function is zero")
    p = np.exp(logp - z)
    p1 = float(p[1] / (p[0] + p[1]))
    return (1.0 - p1, p1)


# -- orderings --------------------------------------------------------------


def _validate_order(model: GraphicalModel, order: Sequence[int]) -> list[int]:
    order = [int(v) for v in order]
    if len(order) != len(set(order)) or set(order) != set(model.indices):
        raise ContractError("elimination order must be a permutation of the model variables")
    return order


def min_fill_order(model: GraphicalModel) -> list[int]:
    """Greedy min-fill ordering; ties go to the smallest variable index."""
    if not model.variables:
        raise ContractError("model has no variables")
    adj = {v: set(n) for v, n in model.neighbors().items()}
    order = []
    while adj:
        best, best_fill = None, None
        for v in sorted(adj):
            nb = sorted(adj[v])
            fill = sum(
                1 for i, a in enumerate(nb) for b in nb[i + 1 :] if b not in adj[a]
            )
            if best_fill is None or fill < best_fill:
                best, best_fill = v, fill
        nb = adj.pop(best)
        for a in nb:
            adj[a].discard(best)
            adj[a].update(b for b in nb if b != a)
        order.append(best)
    return order


def induced_width(model: GraphicalModel, order: Sequence[int]) -> int:
    order = _validate_order(model, order)
    adj = {v: set(n) for v, n in model.neighbors().items()}
    width = 0
    for v in order:
        nb = adj.pop(v)
        width = max(width, len(nb))
        for a in nb:
            adj[a].discard(v)
            adj[a].update(b for b in nb if b != a)
    return width


# -- exact elimination ------------------------------------------------------


def _eliminate(tables: list[_LogTable], order: Sequence[int]) -> list[_LogTable]:
    remaining = list(tables)
    for v in order:
        touching = [t for t in remaining if v in t.vars]
        if not touching:
            continue
        remaining = [t for t in remaining if v not in t.vars]
        remaining.append(_combine(touching).sum_out([v]))
    return remaining


def exact_marginals(model: GraphicalModel, order: Sequence[int]) -> MarginalTable:
    """Exact posterior marginals by variable elimination.

    Each variable is queried separately by eliminating all the others in
    ``order``; the leftover tables are all over the query variable alone.
    """
    order = _validate_order(model, order)
    tables = _log_tables(model)
    out = MarginalTable()
    for q in order:
        rest = _eliminate(tables, [v for v in order if v != q])
        logp = _combine(rest, extra=[q]).keep([q]).arr
        out[q] = _normalize_pair(logp)
    return out


# -- weighted mini-bucket ---------------------------------------------------


@dataclass
class _MiniBucket:
    var: int
    weight: float
    items: list[_LogTable]
    children: list[int] = field(default_factory=list)
    parent: int | None = None
    upper: _LogTable | None = None  # combined tables, scope includes var
    message: _LogTable | None = None  # upward message over scope - {var}


def _partition(items: list[tuple[_LogTable, int | None]], var: int, ibound: int):
    """First-fit split of a bucket into mini-buckets of at most ``ibound`` variables."""
    # keyed on scope and source node only, so factor insertion order is irrelevant
    ranked = sorted(items, key=lambda it: (-len(it[0].vars), it[0].vars, -1 if it[1] is None else it[1]))
    groups: list[tuple[set[int], list[tuple[_LogTable, int | None]]]] = []
    for item in ranked:
        scope = set(item[0].vars) | {var}
        for g_scope, g_items in groups:
            if len(g_scope | scope) <= ibound:
                g_scope |= scope
                g_items.append(item)
                break
        else:
            groups.append((scope, [item]))
    return [g_items for _, g_items in groups]


def _power_sum(t: _LogTable, var: int, w: float) -> _LogTable:
    axis = t.vars.index(var)
    keep = tuple(v for v in t.vars if v != var)
    return _LogTable(keep, w * _lse(t.arr / w, axis))


def wmb_marginals(
    model: GraphicalModel, order: Sequence[int], config: InferenceConfig | None = None
) -> MarginalTable:
    """Approximate marginals by weighted mini-bucket elimination.

    Mini-buckets inside one bucket share the variable's unit weight evenly.
    The downward pass sends to each mini-bucket the parent's belief over the
    separator with the child's own upward message divided out; per-variable
    marginals average the mini-bucket beliefs with the mini-bucket weights
    and are renormalised.
    """
    config = config or InferenceConfig()
    order = _validate_order(model, order)
    if config.mode == InferenceMode.EXACT:
        return exact_marginals(model, order)
    ibound = int(config.ibound)
    pos = {v: i for i, v in enumerate(order)}

    buckets: dict[int, list[tuple[_LogTable, int | None]]] = {v: [] for v in order}
    for t in _log_tables(model):
        first = min(t.vars, key=pos.__getitem__)
        buckets[first].append((t, None))

    nodes: list[_MiniBucket] = []
    by_var: dict[int, list[int]] = {}
    for var in order:
        groups = _partition(buckets[var], var, ibound) if buckets[var] else [[]]
        w = 1.0 / len(groups)
        ids = []
        for group in groups:
            node_id = len(nodes)
            node = _MiniBucket(var, w, [t for t, _ in group])
            for _, child in group:
                if child is not None:
                    node.children.append(child)
                    nodes[child].parent = node_id
            node.upper = _combine(node.items, extra=[var])
            msg = _power_sum(node.upper, var, w)
            node.message = msg
            nodes.append(node)
            ids.append(node_id)
            if msg.vars:
                target = min(msg.vars, key=pos.__getitem__)
                buckets[target].append((msg, node_id))
            elif not np.isfinite(msg.arr):
                raise DegenerateModelError("partition function is zero")
        by_var[var] = ids

    beliefs: dict[int, _LogTable] = {}
    down: dict[int, _LogTable] = {}
    for node_id in reversed(range(len(nodes))):
        node = nodes[node_id]
        up = node.upper
        scaled = up.arr / node.weight
        axis = up.vars.index(node.var)
        norm = np.expand_dims(_lse(scaled, axis), axis)
        # conditional of var given separator, times the separator mass
        msg_arr = np.expand_dims(node.message.expand([v for v in up.vars if v != node.var]), axis)
        with np.errstate(invalid="ignore"):
            logb = scaled - norm + msg_arr
        logb = np.where(np.isneginf(norm), -np.inf, logb)
        if node_id in down:
            logb = logb + down[node_id].expand(list(up.vars))
        belief = _LogTable(up.vars, logb)
        beliefs[node_id] = belief
        for child_id in node.children:
            child_msg = nodes[child_id].message
            outer = belief.keep(child_msg.vars)
            arr = outer.expand(list(child_msg.vars))
            with np.errstate(invalid="ignore"):
                diff = arr - child_msg.arr
            diff = np.where(np.isneginf(child_msg.arr), -np.inf, diff)
            finite = diff[np.isfinite(diff)]
            if finite.size:
                diff = diff - finite.max()
            down[child_id] = _LogTable(child_msg.vars, diff)

    out = MarginalTable()
    for var in order:
        acc = np.zeros(2)
        for node_id in by_var[var]:
            p0, p1 = _normalize_pair(beliefs[node_id].keep([var]).arr)
            acc += nodes[node_id].weight * np.array([p0, p1])
        p1 = float(acc[1] / acc.sum())
        out[var] = (1.0 - p1, p1)
    return out


def marginals(
    model: GraphicalModel,
    config: InferenceConfig | None = None,
    order: Sequence[int] | None = None,
) -> MarginalTable:
    """Marginals with a min-fill order unless one is given."""
    config = config or InferenceConfig()
    if not model.variables:
        return MarginalTable()
    order = list(order) if order is not None else min_fill_order(model)
    if config.mode == InferenceMode.EXACT:
        return exact_marginals(model, order)
    return wmb_marginals(model, order, config)
