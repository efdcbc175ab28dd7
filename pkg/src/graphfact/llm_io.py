"""Text-generation and web-search clients with a record/replay response store.

Generation speaks the OpenAI-compatible ``/chat/completions`` wire format and
search speaks the Serper ``/search`` request/response shape, so any
compatible gateway can be plugged in through environment variables:

    GRAPHFACT_LLM_BASE_URL, GRAPHFACT_LLM_API_KEY, GRAPHFACT_LLM_MODEL
    GRAPHFACT_SEARCH_URL, GRAPHFACT_SEARCH_API_KEY

Every request has a SHA-256 content key. The :class:`ResponseStore` keeps one
JSON file per key, and the client mode decides how it is used:

``live``    never touch the store
``cache``   read through the store, filling it on a miss
``record``  always call the service and overwrite the stored entry
``replay``  serve only from the store; a miss raises :class:`ReplayMissError`
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from html.parser import HTMLParser
from pathlib import Path
from typing import Any, Callable

import httpx

log = logging.getLogger(__name__)

BODY_CHAR_LIMIT = 4000
DEFAULT_SEARCH_URL = "https://google.serper.dev/search"
DEFAULT_K = 3


class Mode(str, enum.Enum):
    LIVE = "live"
    CACHE = "cache"
    RECORD = "record"
    REPLAY = "replay"


class ServiceError(RuntimeError):
    pass


class RetryableError(ServiceError):
    """Transport or server failure that persisted through every retry."""


class ReplayMissError(ServiceError):
    """Strict replay found no stored response for a request."""


def content_key(kind: str, payload: dict) -> str:
    blob = json.dumps({"kind": kind, **payload}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationRequest:
    model_name: str
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def key(self) -> str:
        return content_key("generate", asdict(self))


@dataclass(frozen=True)
class SearchResult:
    title: str
    link: str
    snippet: str
    fetched_body: str = ""

    def __post_init__(self):
        if len(self.fetched_body) > BODY_CHAR_LIMIT:
            object.__setattr__(self, "fetched_body", self.fetched_body[:BODY_CHAR_LIMIT])


@dataclass
class CacheEntry:
    key: str
    value: Any
    created_at: str
    request: dict | None = None


class ResponseStore:
    """Directory of ``<kind>/<sha256>.json`` files.

    Writes go through a temp file and an atomic rename, so concurrent writers
    of the same key simply leave the last complete copy behind.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _path(self, kind: str, key: str) -> Path:
        return self.root / kind / f"{key}.json"

    def get(self, kind: str, key: str) -> CacheEntry | None:
        path = self._path(kind, key)
        if not path.exists():
            return None
        data = json.loads(path.read_text(encoding="utf-8"))
        return CacheEntry(data["key"], data["value"], data["created_at"], data.get("request"))

    def put(self, kind: str, key: str, value: Any, request: dict | None = None) -> CacheEntry:
        entry = CacheEntry(key, value, datetime.now(timezone.utc).isoformat(), request)
        path = self._path(kind, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(asdict(entry), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
        return entry

    def keys(self, kind: str) -> list[str]:
        folder = self.root / kind
        return sorted(p.stem for p in folder.glob("*.json")) if folder.exists() else []


def with_retries(
    call: Callable[[], Any],
    attempts: int = 3,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
    what: str = "request",
):
    """Run ``call`` up to ``attempts`` times with exponential backoff.

    Transport errors, 429 and 5xx responses are retried; other HTTP errors
    propagate immediately.
    """
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            return call()
        except httpx.HTTPStatusError as exc:
            status = exc.response.status_code
            if status != 429 and status < 500:
                raise ServiceError(f"{what} failed with HTTP {status}") from exc
            last = exc
        except httpx.TransportError as exc:
            last = exc
        if attempt + 1 < attempts:
            delay = backoff * (2**attempt)
            log.warning("%s failed (%s), retrying in %.2fs", what, last, delay)
            sleep(delay)
    raise RetryableError(f"{what} failed after {attempts} attempts: {last}") from last


class _Service:
    kind = ""

    def __init__(
        self,
        store: ResponseStore | str | os.PathLike | None = None,
        mode: Mode | str = Mode.LIVE,
        http: httpx.Client | None = None,
        attempts: int = 3,
        backoff: float = 0.5,
        max_parallel: int = 8,
        timeout: float = 60.0,
    ):
        self.mode = Mode(mode)
        if store is not None and not isinstance(store, ResponseStore):
            store = ResponseStore(store)
        if self.mode != Mode.LIVE and store is None:
            raise ValueError(f"mode {self.mode.value!r} needs a response store")
        self.store = store
        self.http = http or httpx.Client(timeout=timeout, follow_redirects=True)
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = time.sleep
        self._gate = threading.BoundedSemaphore(max_parallel)
        self._lock = threading.Lock()
        self.network_calls = 0
        self.store_hits = 0

    def _served(self, key: str, request: dict, fetch: Callable[[], Any]) -> Any:
        if self.mode in (Mode.CACHE, Mode.REPLAY):
            entry = self.store.get(self.kind, key)
            if entry is not None:
                with self._lock:
                    self.store_hits += 1
                return entry.value
            if self.mode == Mode.REPLAY:
                raise ReplayMissError(f"no recorded {self.kind} response for key {key[:12]}")
        with self._gate:
            value = fetch()
        with self._lock:
            self.network_calls += 1
        if self.mode in (Mode.CACHE, Mode.RECORD):
            self.store.put(self.kind, key, value, request)
        return value


class GenerationClient(_Service):
    kind = "generate"

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model_name: str = "default",
        temperature: float = 0.0,
        max_tokens: int = 1024,
        seed: int | None = None,
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.base_url = (base_url or "").rstrip("/")
        self.api_key = api_key
        self.model_name = model_name
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.seed = seed

    @classmethod
    def from_env(cls, **kwargs) -> GenerationClient:
        kwargs.setdefault("base_url", os.environ.get("GRAPHFACT_LLM_BASE_URL"))
        kwargs.setdefault("api_key", os.environ.get("GRAPHFACT_LLM_API_KEY"))
        kwargs.setdefault("model_name", os.environ.get("GRAPHFACT_LLM_MODEL", "default"))
        return cls(**kwargs)

    def _post(self, request: GenerationRequest) -> str:
        if not self.base_url:
            raise ServiceError("generation endpoint not configured (GRAPHFACT_LLM_BASE_URL)")
        payload = {
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}

        def call():
            resp = self.http.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
            resp.raise_for_status()
            return resp.json()

        data = with_retries(call, self.attempts, self.backoff, self.sleep, "generation")
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ServiceError(f"unexpected completion payload: {data!r:.200}") from exc

    def generate(self, request: GenerationRequest) -> str:
        return self._served(request.key, asdict(request), lambda: self._post(request))

    def complete(self, prompt: str) -> str:
        return self.generate(
            GenerationRequest(self.model_name, prompt, self.temperature, self.max_tokens, self.seed)
        )


class _TextExtractor(HTMLParser):
    _skip = {"script", "style", "noscript", "head"}

    def __init__(self):
        super().__init__()
        self.parts: list[str] = []
        self._depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._skip:
            self._depth += 1

    def handle_endtag(self, tag):
        if tag in self._skip and self._depth:
            self._depth -= 1

    def handle_data(self, data):
        if not self._depth and data.strip():
            self.parts.append(" ".join(data.split()))


def html_to_text(html: str) -> str:
    parser = _TextExtractor()
    parser.feed(html)
    return " ".join(parser.parts)


class SearchClient(_Service):
    kind = "search"

    def __init__(
        self,
        api_key: str | None = None,
        endpoint: str = DEFAULT_SEARCH_URL,
        fetch_bodies: bool = True,
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.api_key = api_key
        self.endpoint = endpoint
        self.fetch_bodies = fetch_bodies

    @classmethod
    def from_env(cls, **kwargs) -> SearchClient:
        kwargs.setdefault("api_key", os.environ.get("GRAPHFACT_SEARCH_API_KEY"))
        kwargs.setdefault("endpoint", os.environ.get("GRAPHFACT_SEARCH_URL", DEFAULT_SEARCH_URL))
        return cls(**kwargs)

    def _fetch_body(self, link: str) -> str:
        try:
            resp = self.http.get(link)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            log.info("could not fetch %s: %s", link, exc)
            return ""
        return html_to_text(resp.text)[:BODY_CHAR_LIMIT]

    def _post(self, query: str, k: int) -> dict:
        headers = {"X-API-KEY": self.api_key} if self.api_key else {}

        def call():
            resp = self.http.post(self.endpoint, json={"q": query, "num": k}, headers=headers)
            resp.raise_for_status()
            return resp.json()

        data = with_retries(call, self.attempts, self.backoff, self.sleep, "search")
        organic = []
        for hit in data.get("organic", []):
            link = hit.get("link", "")
            body = self._fetch_body(link) if self.fetch_bodies and link else ""
            organic.append(
                {
                    "title": hit.get("title", ""),
                    "link": link,
                    "snippet": hit.get("snippet", ""),
                    "body": body,
                }
            )
        return {"organic": organic}

    def search(self, query: str, k: int = DEFAULT_K) -> list[SearchResult]:
        """Top ``k`` results, deduplicated by link, bodies capped at 4000 chars."""
        if not query or not query.strip():
            raise ValueError("query must be non-empty")
        if k < 1:
            raise ValueError("k must be positive")
        request = {"q": query, "num": k}
        data = self._served(content_key("search", request), request, lambda: self._post(query, k))
        out, seen = [], set()
        for hit in data.get("organic", []):
            link = hit.get("link", "")
            if link in seen:
                continue
            seen.add(link)
            out.append(
                SearchResult(hit.get("title", ""), link, hit.get("snippet", ""), hit.get("body", ""))
            )
            if len(out) == k:
                break
        return out
