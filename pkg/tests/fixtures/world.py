"""A scripted stand-in for the generation and search services.

The world knows a set of fictional people. Each has a true value and a false
value for a list of biographical slots, and a few hobby-style claims that no
page ever mentions. Every prompt template gets a deterministic rule-based
answer, so recording through the real clients yields a hermetic replay store.

Refinement behaviour is scripted per question via ``policy``:

``fix``      replace every incorrect atom with the true sentence, drop unverified ones
``fix_one``  fix only the first incorrect atom
``stall``    fix incorrect atoms but keep unverified ones; with nothing incorrect, echo
``worse``    keep the answer and add one more false claim
``echo``     return the original answer
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from html import escape

import httpx

LLM_BASE = "http://llm.fixture/v1"
SEARCH_URL = "http://search.fixture/search"
WIKI = "https://encyclopedia.example/wiki"

# (slot, sentence template, value pool); {N} is the subject
SLOTS = [
    ("birth_year", "{N} was born in {v}.", [str(y) for y in range(1931, 1991)]),
    ("birth_city", "{N} was born in the city of {v}.", ["Lisbon", "Oslo", "Quito", "Perth", "Lyon", "Dakar", "Graz", "Turin", "Kyoto", "Tampa"]),
    ("field", "{N} studied {v} at university.", ["chemistry", "history", "law", "botany", "economics", "music", "geology", "linguistics"]),
    ("university", "{N} graduated from {v}.", ["Northfield College", "Lakeside University", "Harbor Institute", "Ridgeway University", "Pinecrest College"]),
    ("job", "{N} worked as a {v}.", ["cartographer", "journalist", "surgeon", "architect", "librarian", "engineer", "pilot", "teacher"]),
    ("employer", "{N} was employed by {v}.", ["Atlas Mapping", "Blue Harbor Press", "Corvid Labs", "Delta Transit", "Evergreen Foods"]),
    ("award", "{N} received the {v}.", ["Silver Compass Award", "Meridian Prize", "Gold Quill Medal", "Harbor Light Award"]),
    ("spouse", "{N} married {v}.", ["Ana Ruiz", "Tom Becker", "Lena Park", "Omar Haddad", "Ivy Chen"]),
    ("children", "{N} had {v} children.", ["two", "three", "four", "five"]),
    ("book", "{N} wrote a book titled {v}.", ["Salt Roads", "The Quiet Delta", "Maps of Ash", "Northern Lines", "River Clocks"]),
    ("instrument", "{N} played the {v}.", ["cello", "oboe", "piano", "banjo", "harp"]),
    ("residence", "{N} lived in {v} for most of their life.", ["Bergen", "Tucson", "Leeds", "Adelaide", "Porto", "Halifax"]),
    ("retired", "{N} retired in {v}.", [str(y) for y in range(1995, 2021)]),
    ("language", "{N} spoke {v} fluently.", ["Portuguese", "Finnish", "Swahili", "Korean", "Dutch", "Greek"]),
]
SLOT_INDEX = {name: i for i, (name, _, _) in enumerate(SLOTS)}
QUERY_WORDS = {name: name.replace("_", " ") for name, _, _ in SLOTS}

UNKNOWN = [
    ("hobby", "{N} enjoyed {v} on weekends.", ["kite flying", "birdwatching", "pottery", "rowing"]),
    ("pet", "{N} owned a dog named {v}.", ["Biscuit", "Pepper", "Comet", "Juniper"]),
]


def _norm(text: str) -> str:
    return " ".join(text.strip().strip('"').rstrip(".").lower().split())


@dataclass
class Person:
    name: str
    pronoun: str
    truth: dict[str, str] = field(default_factory=dict)
    falsehood: dict[str, str] = field(default_factory=dict)
    overrides: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        rng = random.Random(self.name)
        for slot, _, pool in SLOTS:
            true_v, false_v = rng.sample(pool, 2)
            self.truth[slot] = self.overrides.get(slot, true_v)
            if false_v == self.truth[slot]:
                false_v = true_v
            self.falsehood[slot] = false_v

    @property
    def slug(self) -> str:
        return self.name.lower().replace(" ", "-")

    def sentence(self, slot: str, kind: str) -> str:
        """Named sentence for ``slot``; kind is true, false or unknown."""
        if kind == "unknown":
            tpl, pool = next((t, p) for s, t, p in UNKNOWN if s == slot)
            return tpl.format(N=self.name, v=random.Random(self.name + slot).choice(pool))
        tpl = SLOTS[SLOT_INDEX[slot]][1]
        value = self.truth[slot] if kind == "true" else self.falsehood[slot]
        return tpl.format(N=self.name, v=value)


@dataclass
class Scenario:
    """One question/answer pair: a person and the (slot, kind) claims made."""

    id: str
    person: Person
    claims: list[tuple[str, str]]
    policy: str = "fix"
    origin: str = "Human"

    @property
    def question(self) -> str:
        return f"Tell me a bio of {self.person.name}."


def render_answer(person: Person, sentences: list[str]) -> str:
    """Join named sentences, switching to the pronoun after the first."""
    out = []
    for i, s in enumerate(sentences):
        if i and s.startswith(person.name + " "):
            s = person.pronoun + s[len(person.name):]
        out.append(s)
    return " ".join(out)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=\.)\s+", text.strip()) if s.strip()]


class World:
    def __init__(self, scenarios: list[Scenario]):
        self.scenarios = scenarios
        self.people = {s.person.name: s.person for s in scenarios}
        self.by_question = {s.question: s for s in scenarios}
        self.claims: dict[str, tuple[Person, str, str]] = {}
        for p in self.people.values():
            for slot, _, _ in SLOTS:
                self.claims[_norm(p.sentence(slot, "true"))] = (p, slot, "true")
                if p.falsehood[slot] != p.truth[slot]:
                    self.claims[_norm(p.sentence(slot, "false"))] = (p, slot, "false")
            for slot, _, _ in UNKNOWN:
                self.claims[_norm(p.sentence(slot, "unknown"))] = (p, slot, "unknown")
        self.queries = {}
        for p in self.people.values():
            for slot, _, _ in SLOTS + UNKNOWN:
                self.queries[f"{p.name} {slot.replace('_', ' ')}"] = (p, slot)

    # -- helpers ------------------------------------------------------------

    def subject_of(self, text: str) -> Person | None:
        for name, p in self.people.items():
            if text.startswith(name):
                return p
        return None

    def named(self, sentence: str, person: Person) -> str:
        for pro in ("He ", "She "):
            if sentence.startswith(pro):
                return person.name + " " + sentence[len(pro):]
        return sentence

    def lookup(self, sentence: str) -> tuple[Person, str, str] | None:
        return self.claims.get(_norm(sentence))

    def scenario_answer(self, sc: Scenario) -> str:
        return render_answer(sc.person, [sc.person.sentence(slot, kind) for slot, kind in sc.claims])

    def synth_answer(self, sc: Scenario) -> str:
        return render_answer(
            sc.person,
            [sc.person.sentence(slot, "false" if kind == "true" else kind) for slot, kind in sc.claims],
        )

    # -- prompt handlers ----------------------------------------------------

    def respond(self, prompt: str) -> str:
        if prompt.startswith("Instructions:\nBreak the RESPONSE"):
            return self._atomize(prompt)
        if prompt.startswith("Instructions:\nEach ATOM below"):
            return self._revise(prompt)
        if prompt.startswith("Instructions:\nWrite a well-structured Google search query"):
            return self._query(prompt)
        if prompt.startswith("Instructions:\nDecide the logical relation"):
            return self._relation(prompt)
        if "YOUR TASK:" in prompt:
            return self._refine(prompt)
        if prompt.startswith("Instructions:\nYou are provided with a QUESTION and an ORIGINAL ANSWER."):
            return self._llm1(prompt)
        if "CONTEXTS FOR QUESTION" in prompt and prompt.rstrip().endswith("CORRECTED ANSWER:"):
            return self._llm2(prompt)
        if "factually incorrect ANSWER" in prompt:
            return self._synth(prompt)
        if prompt.startswith("You are an expert evaluator."):
            return self._judge(prompt)
        raise ValueError(f"world cannot answer prompt starting {prompt[:60]!r}")

    @staticmethod
    def _field(prompt: str, label: str) -> str:
        found = re.findall(rf"^{label}: (.*)$", prompt, re.MULTILINE)
        if not found:
            raise ValueError(f"no {label} in prompt")
        return found[-1]

    def _atomize(self, prompt):
        response = self._field(prompt, "RESPONSE")
        return "\n".join(f"- {s}" for s in split_sentences(response))

    def _revise(self, prompt):
        response = self._field(prompt, "RESPONSE")
        person = self.subject_of(response)
        block = prompt.split("ATOMS:\n", 1)[1].split("\nREVISED ATOMS:", 1)[0]
        out = []
        for line in block.splitlines():
            num, text = line.split(". ", 1)
            out.append(f"{num}. {self.named(text, person) if person else text}")
        return "\n".join(out)

    def _query(self, prompt):
        statement = self._field(prompt, "STATEMENT")
        hit = self.lookup(statement)
        if hit is None:
            return statement
        person, slot, _ = hit
        return f"{person.name} {slot.replace('_', ' ')}"

    def _relation(self, prompt):
        premise = self._field(prompt, "PREMISE")
        hypothesis = self._field(prompt, "HYPOTHESIS")
        hit = self.lookup(hypothesis)
        if hit is not None and hit[2] != "unknown":
            person, slot, kind = hit
            true_sentence = person.sentence(slot, "true")
            if true_sentence.rstrip(".") in premise:
                if kind == "true":
                    return "RELATION: entailment\nPROBABILITY: 0.95"
                return "RELATION: contradiction\nPROBABILITY: 0.9"
        return "RELATION: neutral\nPROBABILITY: 0.6"

    def _refine(self, prompt):
        task = prompt.split("YOUR TASK:", 1)[1]
        question = self._field(task, "QUESTION").strip('"')
        sc = self.by_question[question]
        person = sc.person
        original = self._field(task, "ORIGINAL ANSWER").strip('"')
        incorrect = {_norm(m) for m in re.findall(r'^INCORRECT ATOM \d+: "(.*)"$', task, re.MULTILINE)}
        unverified = {_norm(m) for m in re.findall(r'^UNVERIFIED ATOM \d+: "(.*)"$', task, re.MULTILINE)}
        sentences = [self.named(s, person) for s in split_sentences(original)]

        if sc.policy == "echo" or (sc.policy == "stall" and not incorrect):
            return original
        if sc.policy == "worse":
            used = {self.lookup(s)[1] for s in sentences if self.lookup(s)}
            extra = next(slot for slot, _, _ in SLOTS if slot not in used)
            return render_answer(person, sentences + [person.sentence(extra, "false")])

        out, fixed = [], 0
        for s in sentences:
            key = _norm(s)
            if key in incorrect and (sc.policy != "fix_one" or fixed == 0):
                _, slot, _ = self.lookup(s)
                out.append(person.sentence(slot, "true"))
                fixed += 1
            elif key in unverified and sc.policy == "fix":
                continue
            else:
                out.append(s)
        return f'"{render_answer(person, out)}"'

    def _llm1(self, prompt):
        question = self._field(prompt, "QUESTION")
        sc = self.by_question[question]
        person = sc.person
        sentences = [self.named(s, person) for s in split_sentences(self._field(prompt, "ORIGINAL ANSWER"))]
        out = []
        for s in sentences:
            hit = self.lookup(s)
            out.append(person.sentence(hit[1], "true") if hit and hit[2] == "false" else s)
        return render_answer(person, out)

    def _llm2(self, prompt):
        question = self._field(prompt, "QUESTION")
        person = self.by_question[question].person
        block = prompt.rsplit("UNVERIFIED ATOMS: ", 1)[1].split("\nCORRECTED ANSWER:", 1)[0]
        drop = {_norm(x) for x in re.findall(r'"(.*?)"', block)}
        original = prompt.rsplit("ORIGINAL ANSWER: ", 1)[1].split("\nUNVERIFIED ATOMS:", 1)[0]
        kept = [s for s in (self.named(x, person) for x in split_sentences(original)) if _norm(s) not in drop]
        return render_answer(person, kept or [person.sentence("birth_year", "true")])

    def _synth(self, prompt):
        question = self._field(prompt, "QUESTION")
        return self.synth_answer(self.by_question[question])

    def _judge(self, prompt):
        tail = prompt.rsplit("Now evaluate the following:", 1)[1]
        ref = self._field(tail, "Reference")
        cand = self._field(tail, "Candidate")
        verdict = "[Yes]" if _norm(ref) == _norm(cand) else "[No]"
        return f"The statements {'match' if verdict == '[Yes]' else 'differ'}.\nAnswer: {verdict}"

    # -- search and pages ---------------------------------------------------

    def search(self, query: str, num: int) -> list[dict]:
        hit = self.queries.get(query)
        if hit is None:
            return []
        person, slot = hit
        results = []
        if slot in SLOT_INDEX:
            results.append(
                {
                    "title": f"{person.name}: {QUERY_WORDS[slot]}",
                    "link": f"{WIKI}/{person.slug}/{slot}",
                    "snippet": person.sentence(slot, "true"),
                }
            )
        results.append(
            {
                "title": f"{person.name} - overview",
                "link": f"{WIKI}/{person.slug}",
                "snippet": f"{person.name} is a person described in this encyclopedia.",
            }
        )
        return results[:num]

    def page(self, path: str) -> str | None:
        parts = path.strip("/").split("/")
        if len(parts) < 2 or parts[0] != "wiki":
            return None
        person = next((p for p in self.people.values() if p.slug == parts[1]), None)
        if person is None:
            return None
        if len(parts) == 3:
            sentences = [person.sentence(parts[2], "true")]
        else:
            sentences = [person.sentence(slot, "true") for slot, _, _ in SLOTS]
        paras = "".join(f"<p>{escape(s)}</p>" for s in sentences)
        return (
            f"<html><head><title>{escape(person.name)}</title><style>p {{margin: 0}}</style></head>"
            f"<body><h1>{escape(person.name)}</h1>{paras}<script>var x = 1;</script></body></html>"
        )

    # -- transport ----------------------------------------------------------

    def handler(self, request: httpx.Request) -> httpx.Response:
        url = str(request.url)
        if url == f"{LLM_BASE}/chat/completions":
            body = json.loads(request.content)
            text = self.respond(body["messages"][0]["content"])
            return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})
        if url == SEARCH_URL:
            body = json.loads(request.content)
            return httpx.Response(200, json={"organic": self.search(body["q"], body["num"])})
        if request.url.host == "encyclopedia.example":
            html = self.page(request.url.path)
            if html is not None:
                return httpx.Response(200, text=html, headers={"content-type": "text/html"})
        return httpx.Response(404, text="not found")

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handler)


def _claims(true=(), false=(), unknown=()):
    return [(s, "true") for s in true] + [(s, "false") for s in false] + [(s, "unknown") for s in unknown]


def default_scenarios() -> list[Scenario]:
    """Twelve instances: six human answers and six synthetic incorrect ones."""
    S = SLOTS
    names = [s for s, _, _ in S]
    bio14 = [(n, "true") for n in names[:6]] + [(n, "false") for n in names[6:13]] + [("hobby", "unknown")]
    return [
        Scenario("h01", Person("Marta Quell", "She"), bio14, "stall"),
        Scenario("h02", Person("Ivo Brandt", "He"), _claims(true=names[:5])),
        Scenario(
            "h03",
            Person("John Smith", "He", overrides={"birth_year": "1980"}),
            _claims(true=["job", "birth_year", "field"], false=["award", "book"]),
            "fix",
        ),
        Scenario("h04", Person("Petra Lind", "She"), _claims(true=["birth_year", "job"], false=["field", "award", "spouse", "book"]), "fix_one"),
        Scenario("h05", Person("Oskar Vale", "He"), _claims(true=["birth_year", "job"], false=["award"], unknown=["pet"]), "worse"),
        Scenario("h06", Person("Nadia Roth", "She"), _claims(true=["birth_year", "job", "field"], unknown=["hobby"]), "echo"),
        Scenario("s01", Person("Elias Moor", "He"), _claims(true=["birth_year", "job", "field", "award"]), "fix", "Synthetic"),
        Scenario("s02", Person("Greta Holm", "She"), _claims(true=["birth_year", "job", "spouse", "book", "language"]), "fix_one", "Synthetic"),
        Scenario("s03", Person("Tomas Reyes", "He"), _claims(true=["birth_city", "university", "employer"], unknown=["hobby"]), "fix", "Synthetic"),
        Scenario("s04", Person("Hana Ito", "She"), _claims(true=["birth_year", "instrument", "residence", "children"]), "stall", "Synthetic"),
        Scenario("s05", Person("Viktor Sand", "He"), _claims(true=["job", "award", "retired"]), "worse", "Synthetic"),
        Scenario("s06", Person("Lucia Ferro", "She"), _claims(true=["field", "university", "language", "book", "spouse", "job"]), "fix", "Synthetic"),
    ]
