"""Discrete graphical models over Boolean variables.

Every variable takes values in {false, true}, encoded as 0 and 1. A factor
table is stored row-major over its scope, so for a binary factor with scope
``(u, v)`` the entries are ordered ``(u=0,v=0), (u=0,v=1), (u=1,v=0),
(u=1,v=1)``.

The brute-force routines here enumerate every assignment and serve as the
reference oracle for the elimination algorithms in :mod:`graphfact.inference`.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

MAX_ENUMERATION_VARIABLES = 20


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ModelSizeError(ContractError):
    """The model is too large for exhaustive enumeration."""


class DegenerateModelError(ValueError):
    """The model assigns zero total weight (Z = 0)."""


class VariableKind(str, enum.Enum):
    ATOM = "atom"
    CONTEXT = "context"


@dataclass(frozen=True)
class VariableId:
    index: int
    kind: VariableKind = VariableKind.ATOM
    source_id: str = ""

    def __post_init__(self):
        if self.index < 0:
            raise ContractError(f"variable index must be non-negative, got {self.index}")


@dataclass(frozen=True)
class Factor:
    """A non-negative table over one or two variables.

    Attributes:
        scope: Variable indices, in table order.
        table: ``2 ** len(scope)`` non-negative entries.
    """

    scope: tuple[int, ...]
    table: tuple[float, ...]

    def __post_init__(self):
        scope = tuple(int(v) for v in self.scope)
        table = tuple(float(x) for x in self.table)
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "table", table)
        if len(scope) not in (1, 2):
            raise ContractError(f"factor arity must be 1 or 2, got {len(scope)}")
        if len(set(scope)) != len(scope):
            raise ContractError(f"duplicate variable in scope {scope}")
        if len(table) != 2 ** len(scope):
            raise ContractError(
                f"table for scope {scope} needs {2 ** len(scope)} entries, got {len(table)}"
            )
        if any(not math.isfinite(x) or x < 0 for x in table):
            raise ContractError(f"factor entries must be finite and >= 0: {table}")
        if not any(x > 0 for x in table):
            raise ContractError("factor table must contain a positive entry")

    def value(self, assignment: Mapping[int, bool] | Sequence[bool]) -> float:
        idx = 0
        for v in self.scope:
            idx = 2 * idx + int(bool(assignment[v]))
        return self.table[idx]

    def array(self) -> np.ndarray:
        return np.asarray(self.table, dtype=float).reshape((2,) * len(self.scope))

    def scaled(self, c: float) -> Factor:
        return Factor(self.scope, tuple(c * x for x in self.table))


@dataclass(frozen=True)
class GraphicalModel:
    variables: tuple[VariableId, ...] = ()
    factors: tuple[Factor, ...] = field(default_factory=tuple)

    def __post_init__(self):
        variables = tuple(self.variables)
        factors = tuple(self.factors)
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "factors", factors)
        indices = [v.index for v in variables]
        if len(set(indices)) != len(indices):
            raise ContractError("variable indices must be unique")
        known = set(indices)
        for f in factors:
            missing = [v for v in f.scope if v not in known]
            if missing:
                raise ContractError(f"factor refers to undeclared variables {missing}")

    @property
    def indices(self) -> list[int]:
        return [v.index for v in self.variables]

    def variable(self, index: int) -> VariableId:
        for v in self.variables:
            if v.index == index:
                return v
        raise KeyError(index)

    def neighbors(self) -> dict[int, set[int]]:
        """Adjacency of the primal graph."""
        adj: dict[int, set[int]] = {v: set() for v in self.indices}
        for f in self.factors:
            for a in f.scope:
                adj[a].update(b for b in f.scope if b != a)
        return adj

    def binary_factors(self) -> list[Factor]:
        return [f for f in self.factors if len(f.scope) == 2]

    def with_factors(self, factors: Iterable[Factor]) -> GraphicalModel:
        return GraphicalModel(self.variables, tuple(factors))


class MarginalTable(dict):
    """Maps variable index to ``(P(false), P(true))``.

    Stored as false-first to match the table encoding; use :meth:`p_true`
    for the usual query.
    """

    def p_true(self, index: int) -> float:
        return self[index][1]

    def p_false(self, index: int) -> float:
        return self[index][0]

    def check(self, atol: float = 1e-9) -> None:
        for idx, (p0, p1) in self.items():
            if not (-atol <= p0 <= 1 + atol and -atol <= p1 <= 1 + atol):
                raise ContractError(f"marginal of {idx} out of [0,1]: {(p0, p1)}")
            if abs(p0 + p1 - 1.0) > atol:
                raise ContractError(f"marginal of {idx} not normalized: {(p0, p1)}")


def _require_assignment(model: GraphicalModel, assignment: Mapping[int, bool]) -> None:
    missing = [i for i in model.indices if i not in assignment]
    if missing:
        raise ContractError(f"assignment misses variables {missing}")


def joint_weight(model: GraphicalModel, assignment: Mapping[int, bool]) -> float:
    """Unnormalized product of all factor entries selected by ``assignment``."""
    _require_assignment(model, assignment)
    w = 1.0
    for f in model.factors:
        w *= f.value(assignment)
    return w


def _enumerate(model: GraphicalModel):
    n = len(model.variables)
    if n > MAX_ENUMERATION_VARIABLES:
        raise ModelSizeError(
            f"{n} variables exceeds enumeration guard of {MAX_ENUMERATION_VARIABLES}"
        )
    indices = model.indices
    for values in itertools.product((False, True), repeat=n):
        assignment = dict(zip(indices, values))
        yield assignment, joint_weight(model, assignment)


def partition_function(model: GraphicalModel) -> float:
    """Sum of :func:`joint_weight` over all ``2**n`` assignments."""
    z = math.fsum(w for _, w in _enumerate(model))
    if z <= 0.0:
        raise DegenerateModelError("partition function is zero")
    return z


def brute_force_marginals(model: GraphicalModel) -> MarginalTable:
    """Posterior marginals by full enumeration."""
    indices = model.indices
    true_mass: dict[int, list[float]] = {i: [] for i in indices}
    weights = []
    for assignment, w in _enumerate(model):
        weights.append(w)
        for i in indices:
            if assignment[i]:
                true_mass[i].append(w)
    z = math.fsum(weights)
    if z <= 0.0:
        raise DegenerateModelError("partition function is zero")
    out = MarginalTable()
    for i in indices:
        p1 = math.fsum(true_mass[i]) / z
        out[i] = (1.0 - p1, p1)
    return out


# -- plain-text dump format -------------------------------------------------
#
#   graphfact-model 1
#   var <index> <kind> <source_id or ->
#   factor <v1> [<v2>] : <e0> <e1> [<e2> <e3>]
#
# Entries use repr() so a dump/load round trip is exact.

_DUMP_HEADER = "graphfact-model 1"


def dumps(model: GraphicalModel) -> str:
    lines = [_DUMP_HEADER]
    for v in model.variables:
        lines.append(f"var {v.index} {v.kind.value} {v.source_id or '-'}")
    for f in model.factors:
        scope = " ".join(str(i) for i in f.scope)
        table = " ".join(repr(x) for x in f.table)
        lines.append(f"factor {scope} : {table}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> GraphicalModel:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].strip() != _DUMP_HEADER:
        raise ValueError("not a graphfact model dump")
    variables, factors = [], []
    for ln in lines[1:]:
        head, *rest = ln.split()
        if head == "var":
            index, kind, source = rest
            variables.append(
                VariableId(int(index), VariableKind(kind), "" if source == "-" else source)
            )
        elif head == "factor":
            sep = rest.index(":")
            scope = tuple(int(x) for x in rest[:sep])
            table = tuple(float(x) for x in rest[sep + 1 :])
            factors.append(Factor(scope, table))
        else:
            raise ValueError(f"unknown dump line: {ln!r}")
    return GraphicalModel(tuple(variables), tuple(factors))
