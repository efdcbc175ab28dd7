"""Long-form factuality metrics, relative gain, and summary aggregation."""

from __future__ import annotations

import math
import re
import statistics
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Mapping, Sequence

from graphfact.factor_graph import ContractError, GraphicalModel, VariableKind
from graphfact.model_builder import AtomRecord, Label

REPORT_METRICS = ("precision", "recall_at_k", "f1_at_k", "verifiability", "comprehensiveness")


class FormatError(ValueError):
    """Model output could not be parsed. ``raw`` carries the offending text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


def supported_count(labels: Iterable[Label | AtomRecord]) -> int:
    n = 0
    for x in labels:
        label = x.label if isinstance(x, AtomRecord) else Label(x)
        n += label == Label.TRUE
    return n


def precision(labels: Sequence[Label | AtomRecord]) -> float:
    """Fraction of atoms labelled True; Unverified counts as unsupported."""
    if len(labels) == 0:
        raise ContractError("precision needs at least one atom")
    return supported_count(labels) / len(labels)


def recall_at_k(supported: int, k: int) -> float:
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    return min(supported / k, 1.0)


def f1_at_k(precision: float, recall: float, supported: int) -> float:
    if supported <= 0:
        return 0.0
    f1 = 2.0 * precision * recall / (precision + recall)
    # the harmonic mean lies between its arguments; keep rounding from leaving that range
    return min(max(f1, min(precision, recall)), max(precision, recall))


def verifiability(model: GraphicalModel, atoms: Sequence[AtomRecord] | None = None) -> int:
    """Number of atoms touched by at least one entail/contradict factor."""
    atom_vars = {v.index: v.source_id for v in model.variables if v.kind == VariableKind.ATOM}
    if atoms is not None:
        wanted = {a.id for a in atoms}
        atom_vars = {i: s for i, s in atom_vars.items() if s in wanted}
    touched = set()
    for f in model.binary_factors():
        touched.update(v for v in f.scope if v in atom_vars)
    return len(touched)


def comprehensiveness(n_in: int, n_out: int) -> float:
    if n_in + n_out <= 0:
        raise ContractError("comprehensiveness needs n_in + n_out > 0")
    return n_in / (n_in + n_out)


def relative_gain(s_response: float, s_correction: float) -> float:
    """Symmetric relative change from response to correction, in [-2, 2].

    Both zero is defined as no change.
    """
    if s_response < 0 or s_correction < 0:
        raise ContractError("relative gain is defined for non-negative scores")
    total = s_response + s_correction
    if total == 0:
        return 0.0
    g = 2.0 * (s_correction - s_response) / total
    return min(2.0, max(-2.0, g))


@dataclass(frozen=True)
class FactualityReport:
    n_atoms: int
    supported: int
    precision: float
    recall_at_k: float
    f1_at_k: float
    verifiability: int
    comprehensiveness: float
    k_used: int

    def __post_init__(self):
        if not 0 <= self.supported <= self.n_atoms:
            raise ContractError("supported must lie in [0, n_atoms]")
        for name in ("precision", "recall_at_k", "f1_at_k", "comprehensiveness"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} out of [0, 1]: {v}")

    def with_k(self, k: int) -> FactualityReport:
        r = recall_at_k(self.supported, k)
        return replace(self, recall_at_k=r, f1_at_k=f1_at_k(self.precision, r, self.supported), k_used=k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> FactualityReport:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def make_report(
    atoms: Sequence[AtomRecord],
    model: GraphicalModel,
    k: int | None = None,
    coverage: tuple[int, int] | None = None,
) -> FactualityReport:
    """Report for one labelled response.

    ``k`` defaults to the response's own atom count. Without ``coverage``
    (``n_in``, ``n_out``) no atom is known to be missing, so C is 1.
    """
    n = len(atoms)
    s = supported_count(atoms)
    pr = precision(atoms) if n else 0.0
    k = k if k is not None else max(n, 1)
    r = recall_at_k(s, k)
    n_in, n_out = coverage if coverage is not None else (max(n, 1), 0)
    return FactualityReport(
        n_atoms=n,
        supported=s,
        precision=pr,
        recall_at_k=r,
        f1_at_k=f1_at_k(pr, r, s),
        verifiability=verifiability(model, atoms),
        comprehensiveness=comprehensiveness(n_in, n_out),
        k_used=k,
    )


def median_k(atom_counts: Sequence[int]) -> int:
    """Median atom count; even-sized inputs average the middle pair, rounding half up."""
    if not atom_counts:
        raise ContractError("median of an empty dataset")
    m = statistics.median(atom_counts)
    return max(1, int(math.floor(m + 0.5)))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class Summary:
    k: int
    count: int
    response: dict[str, tuple[float, float]]
    correction: dict[str, tuple[float, float]] | None = None
    gains: dict[str, tuple[float, float]] | None = None

    def rows(self, label: str = "all") -> list[dict]:
        out = []
        for metric in REPORT_METRICS:
            row = {"group": label, "metric": metric, "count": self.count, "k": self.k}
            row["response_mean"], row["response_std"] = self.response[metric]
            if self.correction is not None:
                row["correction_mean"], row["correction_std"] = self.correction[metric]
                row["gain_mean"], row["gain_std"] = self.gains[metric]
            out.append(row)
        return out


def aggregate(
    responses: Sequence[FactualityReport],
    corrections: Sequence[FactualityReport] | None = None,
    k: int | None = None,
) -> Summary:
    """Mean and sample standard deviation per metric, plus per-pair gains.

    K defaults to the median atom count over the original responses and is
    applied to every report before recall and F1 are averaged.
    """
    if not responses:
        raise ContractError("aggregate needs at least one report")
    if corrections is not None and len(corrections) != len(responses):
        raise ContractError("responses and corrections must pair up")
    k = k if k is not None else median_k([r.n_atoms for r in responses])
    resp = [r.with_k(k) for r in responses]

    def table(reports):
        return {m: _mean_std([float(getattr(r, m)) for r in reports]) for m in REPORT_METRICS}

    summary = Summary(k=k, count=len(resp), response=table(resp))
    if corrections is not None:
        corr = [r.with_k(k) for r in corrections]
        summary.correction = table(corr)
        summary.gains = {
            m: _mean_std(
                [relative_gain(float(getattr(a, m)), float(getattr(b, m))) for a, b in zip(resp, corr)]
            )
            for m in REPORT_METRICS
        }
    return summary


# -- LLM-as-a-judge -----------------------------------------------------------

_VERDICT = re.compile(r"\[(Yes|No)\]", re.IGNORECASE)


def parse_verdict(text: str) -> str:
    """Last ``[Yes]``/``[No]`` marker in the judge's output."""
    found = _VERDICT.findall(text or "")
    if not found:
        raise FormatError("judge output has no [Yes]/[No] verdict", raw=text)
    return found[-1].capitalize()


def judge_equivalence(reference: str, candidate: str, llm) -> str:
    """Ask the judge model whether ``candidate`` means the same as ``reference``.

    ``llm`` is anything with a ``complete(prompt) -> str`` method, normally a
    :class:`graphfact.llm_io.GenerationClient`.
    """
    from graphfact.prompts import render_judge

    return parse_verdict(llm.complete(render_judge(reference, candidate)))
