import random
from pathlib import Path

import httpx
import pytest

from fixtures.world import LLM_BASE, SEARCH_URL, World, default_scenarios
from graphfact.llm_io import GenerationClient, Mode, ResponseStore, SearchClient
from graphfact.pipeline import CorrectionConfig, Services

FIXTURES = Path(__file__).parent / "fixtures"
REPLAY = FIXTURES / "replay"
DATASET = FIXTURES / "dataset.jsonl"
MODEL = "fixture-model"


def _offline(request: httpx.Request) -> httpx.Response:
    raise httpx.ConnectError(f"network disabled in tests: {request.url}")


def offline_http() -> httpx.Client:
    return httpx.Client(transport=httpx.MockTransport(_offline))


def replay_services(store=REPLAY) -> Services:
    """Strict replay over the bundled store; any miss raises instead of calling out."""
    http = offline_http()
    llm = GenerationClient(base_url=LLM_BASE, model_name=MODEL, store=store, mode=Mode.REPLAY, http=http, backoff=0)
    search = SearchClient(endpoint=SEARCH_URL, store=store, mode=Mode.REPLAY, http=http, backoff=0)
    return Services(llm, search)


def world_services(tmp_path, mode=Mode.RECORD) -> tuple[World, Services]:
    """Live-like services backed by the scripted world, recording into ``tmp_path``."""
    world = World(default_scenarios())
    http = httpx.Client(transport=world.transport())
    store = ResponseStore(tmp_path / "store")
    llm = GenerationClient(base_url=LLM_BASE, model_name=MODEL, store=store, mode=mode, http=http, backoff=0)
    search = SearchClient(endpoint=SEARCH_URL, store=store, mode=mode, http=http, backoff=0)
    return world, Services(llm, search)


class ScriptedLLM:
    """Minimal ``complete`` implementation answering by prompt prefix."""

    def __init__(self, rules, default=None):
        self.rules = list(rules)
        self.default = default
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        for marker, reply in self.rules:
            if marker in prompt:
                return reply(prompt) if callable(reply) else reply
        if self.default is None:
            raise AssertionError(f"unexpected prompt: {prompt[:80]!r}")
        return self.default


@pytest.fixture
def replay():
    return replay_services()


@pytest.fixture
def config():
    return CorrectionConfig()


@pytest.fixture
def rng():
    return random.Random(20240601)


ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if number not in ACCEPTANCE or ACCEPTANCE[number][1] == "PASS":
        ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        line = f"[{status}] {number}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
