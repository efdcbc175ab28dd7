"""Dataset ingestion, synthetic-answer construction and benchmark runs.

Dataset wire format: UTF-8 JSON Lines, one object per line::

    {"id": "bio-001", "category": "biography", "question": "...",
     "response": "...", "origin": "Human", "reference_correction": null}

``origin`` is ``Human`` or ``Synthetic``; ``reference_correction`` is
optional. A questions file for ``synth`` uses the same shape without
``response``/``origin``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from graphfact import prompts
from graphfact.factor_graph import ContractError
from graphfact.llm_io import GenerationClient, Mode, ResponseStore, SearchClient
from graphfact.metrics import FactualityReport, Summary, aggregate, median_k
from graphfact.pipeline import (
    CorrectionConfig,
    CorrectionTrace,
    Iteration,
    Services,
    StageError,
    TextGenerator,
    clean_answer,
    run_stage,
    assess,
    build_feedback,
    run_correction_loop,
)

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class Origin(str, enum.Enum):
    HUMAN = "Human"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    category: str
    question: str
    response: str
    origin: Origin = Origin.HUMAN
    reference_correction: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "origin", Origin(self.origin))
        if not self.id:
            raise ContractError("record id must be non-empty")
        if not self.question.strip() or not self.response.strip():
            raise ContractError(f"record {self.id}: question and response must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = self.origin.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetRecord:
        if not isinstance(d, dict):
            raise ContractError("record must be a JSON object")
        missing = [k for k in ("id", "question", "response") if k not in d]
        if missing:
            raise ContractError(f"missing fields: {', '.join(missing)}")
        for k in ("id", "category", "question", "response"):
            if k in d and not isinstance(d[k], str):
                raise ContractError(f"field {k!r} must be a string")
        ref = d.get("reference_correction")
        if ref is not None and not isinstance(ref, str):
            raise ContractError("reference_correction must be a string or null")
        return cls(
            id=d["id"],
            category=d.get("category", ""),
            question=d["question"],
            response=d["response"],
            origin=d.get("origin", Origin.HUMAN.value),
            reference_correction=ref,
        )


@dataclass(frozen=True)
class LineDiagnostic:
    line: int
    message: str


class Dataset(list):
    """List of records that also remembers which input lines were rejected."""

    def __init__(self, records=(), diagnostics=()):
        super().__init__(records)
        self.diagnostics: list[LineDiagnostic] = list(diagnostics)


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Parse a JSONL dataset, keeping valid lines and reporting the rest.

    Blank lines are ignored. Raises :class:`DatasetError` when no line is
    valid or record ids repeat.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    records, diags, seen = [], [], set()
    with path.open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = DatasetRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, ContractError, ValueError) as exc:
                diags.append(LineDiagnostic(n, str(exc)))
                continue
            if rec.id in seen:
                diags.append(LineDiagnostic(n, f"duplicate id {rec.id!r}"))
                continue
            seen.add(rec.id)
            records.append(rec)
    for d in diags:
        log.warning("%s:%d skipped: %s", path, d.line, d.message)
    if not records:
        raise DatasetError(f"{path}: no valid records ({len(diags)} malformed lines)")
    return Dataset(records, diags)


def write_dataset(records: Sequence[DatasetRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")


def select_canonical(answers: Sequence[tuple[str, float]]) -> str:
    """Highest-scored answer; the earliest one wins a tie."""
    if not answers:
        raise ContractError("select_canonical needs at least one answer")
    best = 0
    for i, (_, score) in enumerate(answers):
        if score > answers[best][1]:
            best = i
    return answers[best][0]


def synth_incorrect(question: str, llm: TextGenerator) -> str:
    """A deliberately wrong answer to ``question``."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    prompt = prompts.render_synth_incorrect(question)
    return run_stage("synth", lambda: clean_answer(llm.complete(prompt)))


def synthetic_record(record: DatasetRecord | dict, llm: TextGenerator) -> DatasetRecord:
    d = record.to_dict() if isinstance(record, DatasetRecord) else dict(record)
    return DatasetRecord(
        id=d["id"],
        category=d.get("category", ""),
        question=d["question"],
        response=synth_incorrect(d["question"], llm),
        origin=Origin.SYNTHETIC,
        reference_correction=d.get("reference_correction"),
    )


# -- benchmark runs ---------------------------------------------------------


@dataclass(frozen=True)
class ServiceSettings:
    """Everything that enters a request key, so replay finds the recording."""

    model_name: str = "default"
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None
    fetch_bodies: bool = True


@dataclass
class RunManifest:
    dataset: str
    output_dir: str
    store: str | None = None
    mode: Mode = Mode.CACHE
    task: str = "correct"
    config: CorrectionConfig = field(default_factory=CorrectionConfig)
    services: ServiceSettings = field(default_factory=ServiceSettings)
    workers: int = 4
    timestamp: str = ""

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.task not in ("assess", "correct"):
            raise ContractError(f"unknown task {self.task!r}")
        if self.workers < 1:
            raise ContractError("workers must be positive")
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        d = dict(d)
        d["config"] = CorrectionConfig.from_dict(d.get("config", {}))
        d["services"] = ServiceSettings(**d.get("services", {}))
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunManifest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def make_services(manifest: RunManifest) -> Services:
    """Clients for the manifest's mode, endpoints and keys taken from the environment."""
    store = ResponseStore(manifest.store) if manifest.store else None
    s = manifest.services
    common = dict(store=store, mode=manifest.mode)
    llm = GenerationClient.from_env(
        model_name=s.model_name,
        temperature=s.temperature,
        max_tokens=s.max_tokens,
        seed=s.seed,
        **common,
    )
    search = SearchClient.from_env(fetch_bodies=s.fetch_bodies, **common)
    return Services(llm, search)


@dataclass
class RecordOutcome:
    record: DatasetRecord
    trace: CorrectionTrace | None = None
    error: str | None = None
    stage: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {
            "id": self.record.id,
            "category": self.record.category,
            "origin": self.record.origin.value,
            "status": "ok" if self.ok else "error",
        }
        if self.ok:
            d["response_report"] = self.trace.initial.report.to_dict()
            d["correction_report"] = self.trace.final.report.to_dict()
            d["rounds"] = self.trace.rounds
            d["final_response"] = self.trace.final_response
        else:
            d["stage"] = self.stage
            d["error"] = self.error
        return d


@dataclass
class BenchmarkResult:
    outcomes: list[RecordOutcome]
    summaries: dict[str, Summary]
    output_dir: Path

    @property
    def failures(self) -> list[RecordOutcome]:
        return [o for o in self.outcomes if not o.ok]


def _assess_only(record: DatasetRecord, config: CorrectionConfig, services: Services) -> CorrectionTrace:
    a = assess(record.question, record.response, config, services)
    fb = build_feedback(a.atoms, a.model, a.contexts, a.relations)
    return CorrectionTrace(record.question, [Iteration(record.response, a.report, fb, True)], record.response)


def _run_record(record: DatasetRecord, manifest: RunManifest, services: Services) -> RecordOutcome:
    try:
        if manifest.task == "assess":
            trace = _assess_only(record, manifest.config, services)
        else:
            trace = run_correction_loop(record.question, record.response, manifest.config, services)
        return RecordOutcome(record, trace)
    except StageError as exc:
        log.error("record %s failed in %s: %s", record.id, exc.stage, exc.cause)
        return RecordOutcome(record, exc.trace, f"{type(exc.cause).__name__}: {exc.cause}", exc.stage)
    except Exception as exc:  # noqa: BLE001 - isolate per-record failures
        log.exception("record %s failed", record.id)
        return RecordOutcome(record, None, f"{type(exc).__name__}: {exc}", "unknown")


def summarize(outcomes: Sequence[RecordOutcome], corrections: bool = True) -> dict[str, Summary]:
    """Overall summary plus one per origin, all at the overall median K."""
    ok = [o for o in outcomes if o.ok]
    if not ok:
        return {}
    k = median_k([o.trace.initial.report.n_atoms for o in ok])
    groups = {"all": ok}
    for origin in Origin:
        members = [o for o in ok if o.record.origin == origin]
        if members:
            groups[origin.value] = members
    out = {}
    for name, members in groups.items():
        resp = [o.trace.initial.report for o in members]
        corr = [o.trace.final.report for o in members] if corrections else None
        out[name] = aggregate(resp, corr, k=k)
    return out


def _summary_rows(summaries: dict[str, Summary]) -> list[dict]:
    return [row for name, s in summaries.items() for row in s.rows(name)]


def _precision_table(outcomes: Sequence[RecordOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "origin", "n_atoms", "precision_before", "precision_after", "rounds"])
    for o in outcomes:
        if not o.ok:
            continue
        before, after = o.trace.initial.report, o.trace.final.report
        w.writerow(
            [o.record.id, o.record.origin.value, before.n_atoms, f"{before.precision:.4f}", f"{after.precision:.4f}", o.trace.rounds]
        )
    return buf.getvalue()


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def write_outputs(manifest: RunManifest, outcomes: Sequence[RecordOutcome], summaries: dict[str, Summary]) -> Path:
    """Write the run directory. Only ``manifest.json`` carries a timestamp."""
    out = Path(manifest.output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for o in outcomes:
        if o.trace is not None:
            (out / "traces" / f"{o.record.id}.jsonl").write_text(o.trace.to_jsonl(o.record.id), encoding="utf-8")
    (out / "records.jsonl").write_text(_jsonl(o.to_dict() for o in outcomes), encoding="utf-8")
    (out / "summary.jsonl").write_text(_jsonl(_summary_rows(summaries)), encoding="utf-8")
    (out / "precision_table.csv").write_text(_precision_table(outcomes), encoding="utf-8")
    (out / "errors.jsonl").write_text(
        _jsonl({"id": o.record.id, "stage": o.stage, "error": o.error} for o in outcomes if not o.ok),
        encoding="utf-8",
    )
    return out


def run_benchmark(manifest: RunManifest, services: Services | None = None) -> BenchmarkResult:
    """Assess or correct every record, isolating failures, and write the run directory.

    Records run concurrently on ``manifest.workers`` threads; results are
    written in dataset order so replayed runs reproduce the same files.
    """
    records = load_dataset(manifest.dataset)
    services = services or make_services(manifest)
    with ThreadPoolExecutor(max_workers=manifest.workers) as pool:
        outcomes = list(pool.map(lambda r: _run_record(r, manifest, services), records))
    summaries = summarize(outcomes, corrections=manifest.task == "correct")
    out = write_outputs(manifest, outcomes, summaries)
    return BenchmarkResult(outcomes, summaries, out)


def load_run(run_dir: str | os.PathLike) -> tuple[list[dict], list[dict]]:
    """Per-record rows and summary rows of a finished run."""
    run_dir = Path(run_dir)
    records = [json.loads(l) for l in (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines() if l]
    summary = [json.loads(l) for l in (run_dir / "summary.jsonl").read_text(encoding="utf-8").splitlines() if l]
    return records, summary


def recompute_summary(run_dir: str | os.PathLike) -> dict[str, Summary]:
    """Rebuild the summaries from ``records.jsonl``."""
    records, _ = load_run(run_dir)
    ok = [r for r in records if r["status"] == "ok"]
    if not ok:
        return {}
    corrected = RunManifest.load(Path(run_dir) / "manifest.json").task == "correct"
    resp = [FactualityReport.from_dict(r["response_report"]) for r in ok]
    corr = [FactualityReport.from_dict(r["correction_report"]) for r in ok]
    k = median_k([r.n_atoms for r in resp])
    groups = {"all": list(range(len(ok)))}
    for origin in Origin:
        idx = [i for i, r in enumerate(ok) if r["origin"] == origin.value]
        if idx:
            groups[origin.value] = idx
    return {
        name: aggregate([resp[i] for i in idx], [corr[i] for i in idx] if corrected else None, k=k)
        for name, idx in groups.items()
    }


def format_summary(summaries: dict[str, Summary]) -> str:
    lines = []
    for name, s in summaries.items():
        lines.append(f"[{name}] n={s.count} K={s.k}")
        lines.append(f"  {'metric':<18}{'response':>18}{'correction':>18}{'gain':>18}")
        for row in s.rows(name):
            cells = [f"{row['response_mean']:.3f} ± {row['response_std']:.3f}"]
            if "correction_mean" in row:
                cells.append(f"{row['correction_mean']:.3f} ± {row['correction_std']:.3f}")
                cells.append(f"{row['gain_mean']:+.3f} ± {row['gain_std']:.3f}")
            lines.append(f"  {row['metric']:<18}" + "".join(f"{c:>18}" for c in cells))
    return "\n".join(lines)
