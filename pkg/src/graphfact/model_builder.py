"""Build the atom/context graphical model and label atoms from its marginals."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence
from urllib.parse import urlparse

from graphfact.factor_graph import (
    ContractError,
    Factor,
    GraphicalModel,
    MarginalTable,
    VariableId,
    VariableKind,
)

BODY_CHAR_LIMIT = 4000
TIE_TOLERANCE = 1e-9


class DanglingReferenceError(ContractError):
    """A relation points at an atom or context that does not exist."""


class Label(str, enum.Enum):
    TRUE = "True"
    FALSE = "False"
    UNVERIFIED = "Unverified"
    UNLABELED = "Unlabeled"


class RelationKind(str, enum.Enum):
    ENTAIL = "entail"
    CONTRADICT = "contradict"
    NEUTRAL = "neutral"


@dataclass(frozen=True)
class AtomRecord:
    id: str
    original_text: str
    revised_text: str = ""
    label: Label = Label.UNLABELED
    posterior: float | None = None

    @property
    def text(self) -> str:
        return self.revised_text or self.original_text


@dataclass(frozen=True)
class ContextRecord:
    id: str
    title: str = ""
    link: str = ""
    snippet: str = ""
    body: str = ""
    prior: float = 0.99

    def __post_init__(self):
        if len(self.body) > BODY_CHAR_LIMIT:
            object.__setattr__(self, "body", self.body[:BODY_CHAR_LIMIT])
        if not 0.0 < self.prior < 1.0:
            raise ContractError(f"context prior must be in (0, 1), got {self.prior}")

    @property
    def text(self) -> str:
        """Passage shown to the relation model and the refiner."""
        return self.body or self.snippet or self.title

    @property
    def dedup_key(self) -> tuple[str, str]:
        return (self.link, self.snippet)


@dataclass(frozen=True)
class RelationRecord:
    source_id: str
    target_id: str
    kind: RelationKind
    p: float

    def __post_init__(self):
        object.__setattr__(self, "kind", RelationKind(self.kind))
        if self.source_id == self.target_id:
            raise ContractError("relation source and target must differ")
        if not 0.0 < self.p <= 1.0:
            raise ContractError(f"relation probability must be in (0, 1], got {self.p}")


@dataclass(frozen=True)
class PriorConfig:
    atom_prior: float = 0.5
    reliable_context_prior: float = 0.99
    unreliable_context_prior: float = 0.7
    # hosts whose pages get the unreliable prior
    unreliable_domains: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("atom_prior", "reliable_context_prior", "unreliable_context_prior"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ContractError(f"{name} must be in (0, 1), got {v}")

    def context_prior(self, link: str) -> float:
        host = urlparse(link).hostname or ""
        for d in self.unreliable_domains:
            if host == d or host.endswith("." + d):
                return self.unreliable_context_prior
        return self.reliable_context_prior


def _check_p(p: float) -> None:
    if not 0.0 < p <= 1.0:
        raise ContractError(f"relation probability must be in (0, 1], got {p}")


def entailment_factor(p: float, source: int = 0, target: int = 1) -> Factor:
    """Source true pulls the target towards true with strength ``p``.

    A false source leaves the target untouched (all 0.5).
    """
    _check_p(p)
    # (s=0,t=0), (s=0,t=1), (s=1,t=0), (s=1,t=1)
    return Factor((source, target), (0.5, 0.5, 1.0 - p, p))


def contradiction_factor(p: float, source: int = 0, target: int = 1) -> Factor:
    _check_p(p)
    return Factor((source, target), (0.5, 0.5, p, 1.0 - p))


def relation_factor(kind: RelationKind, p: float, source: int, target: int) -> Factor | None:
    kind = RelationKind(kind)
    if kind == RelationKind.ENTAIL:
        return entailment_factor(p, source, target)
    if kind == RelationKind.CONTRADICT:
        return contradiction_factor(p, source, target)
    return None


def merge_duplicate_contexts(
    contexts: Sequence[ContextRecord], relations: Sequence[RelationRecord] = ()
) -> tuple[list[ContextRecord], list[RelationRecord]]:
    """Drop contexts sharing link and snippet with an earlier one.

    Relations on a dropped context are redirected to the kept copy; when that
    produces a second relation for the same pair, the first one wins.
    """
    kept: dict[tuple[str, str], ContextRecord] = {}
    alias: dict[str, str] = {}
    for c in contexts:
        first = kept.setdefault(c.dedup_key, c)
        alias[c.id] = first.id
    out_rel, seen = [], set()
    for r in relations:
        r2 = replace(
            r,
            source_id=alias.get(r.source_id, r.source_id),
            target_id=alias.get(r.target_id, r.target_id),
        )
        pair = (r2.source_id, r2.target_id)
        if r2.source_id == r2.target_id or pair in seen:
            continue
        seen.add(pair)
        out_rel.append(r2)
    return list(kept.values()), out_rel


def build_model(
    atoms: Sequence[AtomRecord],
    contexts: Sequence[ContextRecord],
    relations: Sequence[RelationRecord],
    priors: PriorConfig | None = None,
) -> GraphicalModel:
    """One Boolean variable per atom and context, prior factors, relation factors.

    Atoms take indices ``0..n-1`` in input order, contexts follow. Neutral
    relations add nothing.
    """
    priors = priors or PriorConfig()
    contexts, relations = merge_duplicate_contexts(contexts, relations)
    atom_ids = [a.id for a in atoms]
    ctx_ids = [c.id for c in contexts]
    if len(set(atom_ids)) != len(atom_ids):
        raise ContractError("atom ids must be unique")
    if len(set(ctx_ids)) != len(ctx_ids) or set(ctx_ids) & set(atom_ids):
        raise ContractError("context ids must be unique and distinct from atom ids")

    index: dict[str, int] = {}
    variables, factors = [], []
    for a in atoms:
        index[a.id] = len(variables)
        variables.append(VariableId(index[a.id], VariableKind.ATOM, a.id))
        factors.append(Factor((index[a.id],), (1.0 - priors.atom_prior, priors.atom_prior)))
    for c in contexts:
        index[c.id] = len(variables)
        variables.append(VariableId(index[c.id], VariableKind.CONTEXT, c.id))
        factors.append(Factor((index[c.id],), (1.0 - c.prior, c.prior)))

    ctx_set = set(ctx_ids)
    for r in relations:
        if r.source_id not in ctx_set:
            raise DanglingReferenceError(f"relation source {r.source_id!r} is not a known context")
        if r.target_id not in index:
            raise DanglingReferenceError(f"relation target {r.target_id!r} is unknown")
        f = relation_factor(r.kind, r.p, index[r.source_id], index[r.target_id])
        if f is not None:
            factors.append(f)
    return GraphicalModel(tuple(variables), tuple(factors))


def atom_index(model: GraphicalModel) -> dict[str, int]:
    return {v.source_id: v.index for v in model.variables if v.kind == VariableKind.ATOM}


def context_index(model: GraphicalModel) -> dict[str, int]:
    return {v.source_id: v.index for v in model.variables if v.kind == VariableKind.CONTEXT}


def label_for(posterior: float, tol: float = TIE_TOLERANCE) -> Label:
    if abs(posterior - 0.5) <= tol:
        return Label.UNVERIFIED
    return Label.TRUE if posterior > 0.5 else Label.FALSE


def label_atoms(
    marginals: MarginalTable,
    atoms: Sequence[AtomRecord],
    model: GraphicalModel | None = None,
) -> list[AtomRecord]:
    """Attach posterior and True/False/Unverified label to every atom.

    Without ``model`` the atoms are assumed to occupy indices ``0..n-1`` in
    order, which is what :func:`build_model` produces.
    """
    lookup = atom_index(model) if model is not None else {a.id: i for i, a in enumerate(atoms)}
    out = []
    for a in atoms:
        idx = lookup.get(a.id)
        if idx is None or idx not in marginals:
            raise ContractError(f"no marginal for atom {a.id!r}")
        p = marginals.p_true(idx)
        out.append(replace(a, label=label_for(p), posterior=p))
    return out
