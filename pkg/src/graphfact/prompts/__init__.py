"""Prompt templates shipped as text assets, and their renderers.

Substitution markers
--------------------
``judge.txt``            ``{}`` reference, ``{}`` candidate
``llm1.txt``             ``{}`` question, ``{}`` original answer
``llm2.txt``             ``{}`` question, ``{}`` contexts, ``{}`` original answer,
                         ``{}`` unverified atoms
``refine.txt``           ``{}`` question, ``{incorrect atoms}``,
                         ``{contexts for incorrect atoms}``,
                         ``{relations from contexts to incorrect atoms}``
``synth_incorrect.txt``  ``{}`` question
``atomize.txt``          ``{response}``
``revise.txt``           ``{response}``, ``{atoms}``
``query.txt``            ``{statement}``
``relation.txt``         ``{premise}``, ``{hypothesis}``

Templates are filled with :meth:`str.format`; none of them contains a
literal brace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

TEMPLATE_NAMES = (
    "judge",
    "llm1",
    "llm2",
    "refine",
    "synth_incorrect",
    "atomize",
    "revise",
    "query",
    "relation",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(f"unknown prompt template {name!r}")
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def _quoted(text: str) -> str:
    return f'"{text}"'


def _quoted_lines(items: Sequence[str]) -> str:
    return "\n".join(_quoted(x) for x in items)


def render_judge(reference: str, candidate: str) -> str:
    return load_template("judge").format(reference, candidate)


def render_llm1(question: str, response: str) -> str:
    return load_template("llm1").format(question, response)


def render_llm2(
    question: str, response: str, contexts: Sequence[str], unverified: Sequence[str]
) -> str:
    return load_template("llm2").format(
        question, _quoted_lines(contexts), response, _quoted_lines(unverified)
    )


def render_synth_incorrect(question: str) -> str:
    return load_template("synth_incorrect").format(question)


@dataclass
class IncorrectAtom:
    """An atom to correct, with the passages linked to it and their relation."""

    text: str
    evidence: list[tuple[str, str]] = field(default_factory=list)  # (passage, "ENTAILMENT"/"CONTRADICTION")


def render_refine(
    question: str,
    response: str,
    incorrect: Sequence[IncorrectAtom],
    unverified: Sequence[str] = (),
) -> str:
    """Fill the corrector template.

    The atom block opens with the original answer, then lists incorrect atoms
    followed by unverified ones; contexts and relations are numbered
    ``<atom>-<context>`` as in the template's examples.
    """
    atoms = [f"ORIGINAL ANSWER: {_quoted(response)}"]
    contexts, relations = [], []
    for i, atom in enumerate(incorrect, start=1):
        atoms.append(f"INCORRECT ATOM {i}: {_quoted(atom.text)}")
        for j, (passage, relation) in enumerate(atom.evidence, start=1):
            contexts.append(f"CONTEXT {i}-{j} FOR INCORRECT ATOM {i}: {_quoted(passage)}")
            relations.append(
                f"RELATION FROM CONTEXT {i}-{j} TO INCORRECT ATOM {i}: {_quoted(relation)}"
            )
    for k, text in enumerate(unverified, start=1):
        atoms.append(f"UNVERIFIED ATOM {k}: {_quoted(text)}")
    return load_template("refine").format(
        question,
        **{
            "incorrect atoms": "\n".join(atoms),
            "contexts for incorrect atoms": "\n".join(contexts),
            "relations from contexts to incorrect atoms": "\n".join(relations),
        },
    )


def render_atomize(response: str) -> str:
    return load_template("atomize").format(response=response)


def render_revise(response: str, atoms: Sequence[str]) -> str:
    listing = "\n".join(f"{i}. {a}" for i, a in enumerate(atoms, start=1))
    return load_template("revise").format(response=response, atoms=listing)


def render_query(statement: str) -> str:
    return load_template("query").format(statement=statement)


def render_relation(premise: str, hypothesis: str) -> str:
    return load_template("relation").format(premise=premise, hypothesis=hypothesis)
