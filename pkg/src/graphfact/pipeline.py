"""Factuality assessment stages and the feedback-driven correction loop.

Assessment runs atomize -> revise -> retrieve -> relate -> build model ->
WMB marginals -> label -> report. The correction loop repeatedly assesses
the current answer, hands the flagged atoms and their evidence to a
refinement model, and keeps the refined answer only if its precision went
up.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

from graphfact import prompts
from graphfact.factor_graph import ContractError, GraphicalModel
from graphfact.inference import InferenceConfig, marginals
from graphfact.llm_io import SearchResult
from graphfact.metrics import FactualityReport, FormatError, make_report
from graphfact.model_builder import (
    AtomRecord,
    ContextRecord,
    Label,
    PriorConfig,
    RelationKind,
    RelationRecord,
    atom_index,
    build_model,
    context_index,
    label_atoms,
)

log = logging.getLogger(__name__)


class TextGenerator(Protocol):
    def complete(self, prompt: str) -> str: ...


class Searcher(Protocol):
    def search(self, query: str, k: int = 3) -> list[SearchResult]: ...


class StageError(RuntimeError):
    """A pipeline stage failed. ``stage`` names it; ``trace`` holds any partial loop trace."""

    def __init__(self, stage: str, cause: BaseException, trace: CorrectionTrace | None = None):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.trace = trace


@dataclass(frozen=True)
class CorrectionConfig:
    theta: float = 0.95
    max_iterations: int = 3
    k_contexts: int = 3
    ibound: int = 6
    prompts: str = "default"
    # K for recall; None uses each response's own atom count
    recall_k: int | None = None
    context_relations: bool = False
    parallelism: int = 4
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError(f"theta must be in [0, 1], got {self.theta}")
        for name in ("max_iterations", "k_contexts", "ibound", "parallelism"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.prompts != "default":
            raise ContractError(f"unknown prompt set {self.prompts!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorrectionConfig:
        d = dict(d)
        if isinstance(d.get("priors"), dict):
            pri = dict(d["priors"])
            pri["unreliable_domains"] = tuple(pri.get("unreliable_domains", ()))
            d["priors"] = PriorConfig(**pri)
        return cls(**d)


@dataclass
class Services:
    llm: TextGenerator
    search: Searcher


def run_stage(stage: str, fn: Callable, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(stage, exc) from exc


def _pmap(fn, items, parallelism: int) -> list:
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


# -- stages -----------------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")
_NUMBERED = re.compile(r"^\s*(\d+)[.)]\s+(.*\S)\s*$")


def atomize(response: str, llm: TextGenerator) -> list[AtomRecord]:
    """Split a response into atomic claims, one bullet per line of model output."""
    if not response or not response.strip():
        raise ContractError("response must be non-empty")
    raw = llm.complete(prompts.render_atomize(response))
    texts = [m.group(1) for m in map(_BULLET.match, raw.splitlines()) if m]
    if not texts:
        raise FormatError("atomizer output has no bulleted atoms", raw=raw)
    return [AtomRecord(id=f"a{i}", original_text=t) for i, t in enumerate(texts, start=1)]


def revise(atoms: Sequence[AtomRecord], response: str, llm: TextGenerator) -> list[AtomRecord]:
    """Make each atom self-contained; the atom count never changes."""
    if not atoms:
        return []
    raw = llm.complete(prompts.render_revise(response, [a.original_text for a in atoms]))
    numbered = {}
    for line in raw.splitlines():
        m = _NUMBERED.match(line)
        if m:
            numbered.setdefault(int(m.group(1)), m.group(2))
    if sorted(numbered) != list(range(1, len(atoms) + 1)):
        raise FormatError(
            f"reviser returned items {sorted(numbered)} for {len(atoms)} atoms", raw=raw
        )
    return [
        AtomRecord(a.id, a.original_text, numbered[i], a.label, a.posterior)
        for i, a in enumerate(atoms, start=1)
    ]


def _clean_line(text: str) -> str:
    for line in text.splitlines():
        line = line.strip().strip('"').strip()
        if line:
            return line
    return ""


def make_query(atom: AtomRecord, llm: TextGenerator) -> str:
    query = _clean_line(llm.complete(prompts.render_query(atom.text)))
    if not query:
        raise FormatError(f"empty search query for atom {atom.id}", raw=query)
    return query


def retrieve_contexts(
    atoms: Sequence[AtomRecord],
    config: CorrectionConfig,
    services: Services,
) -> tuple[list[ContextRecord], dict[str, str]]:
    """Search per atom and pool the hits, dropping repeated link+snippet pairs.

    Returns the contexts (ids ``c1..cm`` in first-seen order) and the query
    used for each atom.
    """
    queries = _pmap(lambda a: make_query(a, services.llm), list(atoms), config.parallelism)
    hits = _pmap(lambda q: services.search.search(q, config.k_contexts), queries, config.parallelism)
    contexts: list[ContextRecord] = []
    seen = set()
    for results in hits:
        for r in results:
            key = (r.link, r.snippet)
            if key in seen:
                continue
            seen.add(key)
            contexts.append(
                ContextRecord(
                    id=f"c{len(contexts) + 1}",
                    title=r.title,
                    link=r.link,
                    snippet=r.snippet,
                    body=r.fetched_body,
                    prior=config.priors.context_prior(r.link),
                )
            )
    return contexts, {a.id: q for a, q in zip(atoms, queries)}


_REL = re.compile(r"RELATION\s*:\s*\W*(entailment|contradiction|neutral)", re.IGNORECASE)
_PROB = re.compile(r"PROBABILITY\s*:\s*([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)", re.IGNORECASE)
_KINDS = {
    "entailment": RelationKind.ENTAIL,
    "contradiction": RelationKind.CONTRADICT,
    "neutral": RelationKind.NEUTRAL,
}


def parse_relation(raw: str) -> tuple[RelationKind, float]:
    kind, prob = _REL.search(raw or ""), _PROB.search(raw or "")
    if not kind or not prob:
        raise FormatError("relation output lacks RELATION/PROBABILITY lines", raw=raw)
    p = float(prob.group(1))
    if not 0.0 < p <= 1.0:
        raise FormatError(f"relation probability {p} outside (0, 1]", raw=raw)
    return _KINDS[kind.group(1).lower()], p


def extract_relations(
    atoms: Sequence[AtomRecord],
    contexts: Sequence[ContextRecord],
    llm: TextGenerator,
    context_relations: bool = False,
    parallelism: int = 1,
) -> list[RelationRecord]:
    """One relation per (context, atom) pair, neutral ones included.

    With ``context_relations`` every unordered context pair is judged too,
    with the earlier context as premise.
    """
    if not atoms:
        raise ContractError("extract_relations needs at least one atom")
    pairs = [(c.id, c.text, a.id, a.text) for c in contexts for a in atoms]
    if context_relations:
        pairs += [
            (c.id, c.text, d.id, d.text)
            for i, c in enumerate(contexts)
            for d in contexts[i + 1 :]
        ]

    def judge(pair):
        src, premise, dst, hypothesis = pair
        kind, p = parse_relation(llm.complete(prompts.render_relation(premise, hypothesis)))
        return RelationRecord(src, dst, kind, p)

    return _pmap(judge, pairs, parallelism)


@dataclass
class Assessment:
    atoms: list[AtomRecord]
    contexts: list[ContextRecord]
    relations: list[RelationRecord]
    model: GraphicalModel
    report: FactualityReport
    queries: dict[str, str] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.report.precision


def evaluate(
    atoms: Sequence[AtomRecord],
    contexts: Sequence[ContextRecord],
    relations: Sequence[RelationRecord],
    config: CorrectionConfig,
) -> tuple[list[AtomRecord], GraphicalModel, FactualityReport]:
    """Model construction, WMB inference, labelling and the report."""
    model = build_model(atoms, contexts, relations, config.priors)
    post = marginals(model, InferenceConfig(ibound=config.ibound))
    labelled = label_atoms(post, atoms, model)
    return labelled, model, make_report(labelled, model, k=config.recall_k)


def assess(
    question: str, response: str, config: CorrectionConfig, services: Services
) -> Assessment:
    """Full factuality assessment of one response.

    ``question`` is carried for the record; the assessment itself looks at
    the response only.
    """
    atoms = run_stage("atomize", atomize, response, services.llm)
    atoms = run_stage("revise", revise, atoms, response, services.llm)
    contexts, queries = run_stage("retrieve", retrieve_contexts, atoms, config, services)
    relations = run_stage(
        "relate",
        extract_relations,
        atoms,
        contexts,
        services.llm,
        config.context_relations,
        config.parallelism,
    )
    labelled, model, report = run_stage("evaluate", evaluate, atoms, contexts, relations, config)
    return Assessment(labelled, contexts, relations, model, report, queries)


# -- feedback and refinement ------------------------------------------------


@dataclass(frozen=True)
class Evidence:
    atom_id: str
    context_id: str
    kind: RelationKind
    p: float


@dataclass
class Feedback:
    flagged_atoms: list[AtomRecord] = field(default_factory=list)
    evidence: list[Evidence] = field(default_factory=list)
    contexts: dict[str, ContextRecord] = field(default_factory=dict)

    @property
    def incorrect(self) -> list[AtomRecord]:
        return [a for a in self.flagged_atoms if a.label == Label.FALSE]

    @property
    def unverified(self) -> list[AtomRecord]:
        return [a for a in self.flagged_atoms if a.label == Label.UNVERIFIED]

    def is_empty(self) -> bool:
        return not self.flagged_atoms

    def evidence_for(self, atom_id: str) -> list[Evidence]:
        return [e for e in self.evidence if e.atom_id == atom_id]

    def to_dict(self) -> dict:
        return {
            "flagged_atoms": [
                {"id": a.id, "text": a.text, "label": a.label.value, "posterior": a.posterior}
                for a in self.flagged_atoms
            ],
            "evidence": [
                {"atom_id": e.atom_id, "context_id": e.context_id, "kind": e.kind.value, "p": e.p}
                for e in self.evidence
            ],
        }


def build_feedback(
    atoms: Sequence[AtomRecord],
    model: GraphicalModel,
    contexts: Sequence[ContextRecord],
    relations: Sequence[RelationRecord],
) -> Feedback:
    """False and Unverified atoms, plus every model edge into a False atom.

    Only edges that made it into the model count, so neutral relations never
    show up as evidence.
    """
    a_idx, c_idx = atom_index(model), context_index(model)
    edges = {frozenset(f.scope) for f in model.binary_factors()}
    flagged = [a for a in atoms if a.label in (Label.FALSE, Label.UNVERIFIED)]
    false_ids = {a.id for a in flagged if a.label == Label.FALSE}
    by_id = {c.id: c for c in contexts}
    evidence, used = [], {}
    for r in relations:
        if r.kind == RelationKind.NEUTRAL or r.target_id not in false_ids:
            continue
        if r.source_id not in c_idx:
            continue
        if frozenset((c_idx[r.source_id], a_idx[r.target_id])) not in edges:
            continue
        evidence.append(Evidence(r.target_id, r.source_id, r.kind, r.p))
        used[r.source_id] = by_id[r.source_id]
    return Feedback(flagged, evidence, used)


_RELATION_WORD = {RelationKind.ENTAIL: "ENTAILMENT", RelationKind.CONTRADICT: "CONTRADICTION"}


def render_feedback_prompt(question: str, response: str, feedback: Feedback) -> str:
    incorrect = [
        prompts.IncorrectAtom(
            a.text,
            [
                (feedback.contexts[e.context_id].text, _RELATION_WORD[e.kind])
                for e in feedback.evidence_for(a.id)
            ],
        )
        for a in feedback.incorrect
    ]
    return prompts.render_refine(question, response, incorrect, [a.text for a in feedback.unverified])


def clean_answer(raw: str) -> str:
    text = (raw or "").strip()
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        text = text[1:-1].strip()
    if not text:
        raise FormatError("model returned an empty answer", raw=raw)
    return text


def refine(question: str, response: str, feedback: Feedback, llm: TextGenerator) -> str:
    if feedback.is_empty():
        raise ContractError("refine needs non-empty feedback")
    prompt = render_feedback_prompt(question, response, feedback)
    return run_stage("refine", lambda: clean_answer(llm.complete(prompt)))


def baseline_llm1(question: str, response: str, llm: TextGenerator) -> str:
    """Correct from the model's own knowledge, no evidence."""
    prompt = prompts.render_llm1(question, response)
    return run_stage("llm1", lambda: clean_answer(llm.complete(prompt)))


def baseline_llm2(
    question: str,
    response: str,
    contexts: Sequence[ContextRecord | str],
    unverified: Sequence[AtomRecord | str],
    llm: TextGenerator,
) -> str:
    ctx = [c.text if isinstance(c, ContextRecord) else c for c in contexts]
    atoms = [a.text if isinstance(a, AtomRecord) else a for a in unverified]
    prompt = prompts.render_llm2(question, response, ctx, atoms)
    return run_stage("llm2", lambda: clean_answer(llm.complete(prompt)))


# -- the loop ---------------------------------------------------------------


@dataclass
class Iteration:
    response: str
    report: FactualityReport
    feedback: Feedback
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "report": self.report.to_dict(),
            "feedback": self.feedback.to_dict(),
            "accepted": self.accepted,
        }


@dataclass
class CorrectionTrace:
    """Every assessed answer in order; entry 0 is the original response."""

    question: str
    iterations: list[Iteration] = field(default_factory=list)
    final_response: str = ""

    @property
    def rounds(self) -> int:
        return max(0, len(self.iterations) - 1)

    @property
    def initial(self) -> Iteration:
        return self.iterations[0]

    @property
    def final(self) -> Iteration:
        return [it for it in self.iterations if it.accepted][-1]

    def accepted_precisions(self) -> list[float]:
        return [it.report.precision for it in self.iterations if it.accepted]

    def to_records(self, instance_id: str = "") -> list[dict]:
        out = []
        for i, it in enumerate(self.iterations):
            out.append({"id": instance_id, "step": i, **it.to_dict()})
        out.append(
            {"id": instance_id, "step": "final", "question": self.question, "final_response": self.final_response}
        )
        return out

    def to_jsonl(self, instance_id: str = "") -> str:
        return "".join(
            json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in self.to_records(instance_id)
        )


def run_correction_loop(
    question: str,
    response: str,
    config: CorrectionConfig,
    services: Services,
    refiner: Callable[[str, str, Feedback], str] | None = None,
) -> CorrectionTrace:
    """Assess, refine while precision is below ``theta``, keep only improvements.

    Stops when precision reaches ``theta``, when a refinement does not raise
    precision, or after ``max_iterations`` refinements. ``refiner`` replaces
    the LLM corrector, e.g. with a stub in tests.
    """
    trace = CorrectionTrace(question, final_response=response)

    def feedback_of(a: Assessment) -> Feedback:
        return build_feedback(a.atoms, a.model, a.contexts, a.relations)

    def do_refine(q, y, fb):
        if refiner is not None:
            return refiner(q, y, fb)
        return refine(q, y, fb, services.llm)

    try:
        current = assess(question, response, config, services)
        fb = feedback_of(current)
        trace.iterations.append(Iteration(response, current.report, fb, True))
        rounds = 0
        while current.precision < config.theta and rounds < config.max_iterations:
            if fb.is_empty():
                break
            candidate_text = run_stage("refine", do_refine, question, response, fb)
            rounds += 1
            candidate = assess(question, candidate_text, config, services)
            cand_fb = feedback_of(candidate)
            accepted = candidate.precision > current.precision
            trace.iterations.append(Iteration(candidate_text, candidate.report, cand_fb, accepted))
            if not accepted:
                break
            response, current, fb = candidate_text, candidate, cand_fb
            trace.final_response = response
    except StageError as exc:
        exc.trace = trace
        raise
    return trace
