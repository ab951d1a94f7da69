"""Answering queries: cache lookup, retries, batch fallback and transcripts."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

from .backends import Backend, Reply, TransportError
from .queries import Answer, ParseError, Query
from .render import Prompt, RenderOptions, TemplateRegistry, render_prompt, render_reminder

DEFAULT_BACKOFF = (1.0, 4.0, 16.0)


class InvalidAnswer(RuntimeError):
    """The backend never produced a parsable reply; ``raw_text`` holds the last one."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


@dataclass(frozen=True)
class TranscriptEntry:
    query_digest: str
    model_id: str
    prompt: str
    response: str
    input_tokens: int
    output_tokens: int
    latency: float = 0.0
    cached: bool = False

    def digest(self) -> str:
        # latency and cache provenance vary between otherwise identical runs
        stable = (self.query_digest, self.model_id, self.prompt, self.response, self.input_tokens, self.output_tokens)
        return hashlib.sha256(json.dumps(stable).encode()).hexdigest()


class Transcript:
    """Append-only log of prompt/response exchanges."""

    def __init__(self):
        self._entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def append(self, entry: TranscriptEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    def __iter__(self) -> Iterator[TranscriptEntry]:
        return iter(list(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def input_tokens(self) -> int:
        return sum(e.input_tokens for e in self._entries)

    @property
    def output_tokens(self) -> int:
        return sum(e.output_tokens for e in self._entries)

    def digest(self) -> str:
        """Order-independent content hash, stable under concurrent dispatch."""
        h = hashlib.sha256()
        for d in sorted(e.digest() for e in self._entries):
            h.update(d.encode())
        return h.hexdigest()

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self._entries)


def cache_key(backend: Backend, prompt: Prompt, query: Query, render: RenderOptions) -> str:
    """Digest over backend, model, template version, prompt text and the inputs the images are drawn from."""
    h = hashlib.sha256()
    for piece in (backend.backend_id, backend.model_id, prompt.template_key, prompt.text, query.digest(), render.digest()):
        h.update(piece.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class ResponseCache:
    """Content-addressed reply store at ``<root>/<2 hex>/<digest>.json``; writes are atomic renames."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        try:
            return json.loads(self.path(key).read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            return None  # torn or foreign file; treat as a miss and overwrite

    def put(self, key: str, record: dict) -> None:
        target = self.path(key)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, sort_keys=True)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


class Session:
    """Binds a backend to templates, render options, a cache and a transcript.

    ``answer`` never returns an unparsed reply: it re-prompts with a reminder
    up to ``max_retries`` times, and splits a batch whose numbered reply does
    not line up into single-item queries.
    """

    def __init__(
        self,
        backend: Backend,
        templates: TemplateRegistry | None = None,
        render: RenderOptions | None = None,
        cache: ResponseCache | str | Path | None = None,
        max_retries: int = 3,
        backoff: Sequence[float] = DEFAULT_BACKOFF,
        sleep: Callable[[float], None] = time.sleep,
        max_in_flight: int = 1,
        template_overrides: dict[str, str] | None = None,
    ):
        if max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        self.backend = backend
        self.templates = templates or TemplateRegistry.default()
        self.render = render or RenderOptions()
        self.cache = ResponseCache(cache) if isinstance(cache, (str, Path)) else cache
        self.max_retries = max_retries
        self.backoff = tuple(backoff)
        self.sleep = sleep
        self.max_in_flight = max_in_flight
        self.template_overrides = dict(template_overrides or {})
        self.transcript = Transcript()
        self.backend_calls = 0  # every live backend invocation
        self.network_calls = 0  # the subset that went to a remote service
        self._lock = threading.Lock()
        self._scopes: list[Transcript] = []

    # -- transcript scoping --------------------------------------------------

    @contextmanager
    def recording(self) -> Iterator[Transcript]:
        """Collect the entries produced inside the block into a fresh transcript as well."""
        scoped = Transcript()
        with self._lock:
            self._scopes = self._scopes + [scoped]
        try:
            yield scoped
        finally:
            with self._lock:
                self._scopes = [s for s in self._scopes if s is not scoped]

    def _log(self, entry: TranscriptEntry) -> None:
        self.transcript.append(entry)
        for scope in self._scopes:
            scope.append(entry)

    # -- core ----------------------------------------------------------------

    def with_template(self, query: Query) -> Query:
        override = self.template_overrides.get(query.template_id)
        if override is None:
            return query
        return replace(query, template_id=override)

    def _call(self, query: Query, prompt: Prompt) -> tuple[Reply, float]:
        attempt = 0
        while True:
            start = time.perf_counter()
            try:
                with self._lock:
                    self.backend_calls += 1
                    self.network_calls += self.backend.remote
                reply = self.backend.respond(query, prompt)
                return reply, time.perf_counter() - start
            except TransportError:
                if attempt >= len(self.backoff):
                    raise
                self.sleep(self.backoff[attempt])
                attempt += 1

    def _entry(self, query: Query, exchange: dict, latency: float, cached: bool) -> TranscriptEntry:
        return TranscriptEntry(
            query.digest(), self.backend.model_id, exchange["prompt"], exchange["response"],
            int(exchange["input_tokens"]), int(exchange["output_tokens"]), latency, cached,
        )

    def _live(self, query: Query, prompt: Prompt, exchanges: list[dict]) -> str:
        reply, latency = self._call(query, prompt)
        exchange = {
            "prompt": prompt.text,
            "response": reply.text,
            "input_tokens": reply.input_tokens,
            "output_tokens": reply.output_tokens,
        }
        exchanges.append(exchange)
        self._log(self._entry(query, exchange, latency, False))
        return reply.text

    def _store(self, key: str, query: Query, text: str, exchanges: list[dict], fallback: bool = False) -> None:
        if self.cache is None:
            return
        self.cache.put(
            key,
            {
                "query_digest": query.digest(),
                "raw_text": text,
                "input_tokens": sum(e["input_tokens"] for e in exchanges),
                "output_tokens": sum(e["output_tokens"] for e in exchanges),
                "attempts": len(exchanges),
                "exchanges": exchanges,
                "fallback": fallback,
                "timestamp": time.time(),
            },
        )

    def _replay(self, query: Query, key: str) -> Answer | None:
        """Serve ``query`` from the cache, re-logging the original exchanges; None on a miss."""
        if self.cache is None:
            return None
        hit = self.cache.get(key)
        if hit is None:
            return None
        if hit.get("fallback"):
            for exchange in hit["exchanges"]:
                self._log(self._entry(query, exchange, 0.0, True))
            return self._fallback(query)
        try:
            value = query.parse(hit["raw_text"])
        except ParseError:
            return None  # written by an older parser; answer live and overwrite
        for exchange in hit.get("exchanges", []):
            self._log(self._entry(query, exchange, 0.0, True))
        return Answer(value, hit["raw_text"], int(hit.get("attempts", 1)), True)

    def answer(self, query: Query) -> Answer:
        query = self.with_template(query)
        prompt = render_prompt(query, self.templates, self.render)
        key = cache_key(self.backend, prompt, query, self.render)
        served = self._replay(query, key)
        if served is not None:
            return served

        exchanges: list[dict] = []
        text = self._live(query, prompt, exchanges)
        try:
            value = query.parse(text)
        except ParseError:
            if query.batch_size > 1:
                self._store(key, query, text, exchanges, fallback=True)
                return self._fallback(query)
        else:
            self._store(key, query, text, exchanges)
            return Answer(value, text, 1)

        retry_prompt = prompt.with_suffix(render_reminder(query, self.templates))
        for _ in range(self.max_retries):
            text = self._live(query, retry_prompt, exchanges)
            try:
                value = query.parse(text)
            except ParseError:
                continue
            self._store(key, query, text, exchanges)
            return Answer(value, text, len(exchanges))
        raise InvalidAnswer(f"no parsable answer after {len(exchanges)} attempts for a {query.kind} query", text)

    def _fallback(self, query: Query) -> Answer:
        parts = [self.answer(q) for q in query.split()]
        return Answer(
            query.merge([p.value for p in parts]),
            "\n".join(p.raw_text for p in parts),
            1 + sum(p.attempts for p in parts),
            all(p.cached for p in parts),
        )

    def answer_many(self, queries: Sequence[Query]) -> list[Answer]:
        """Answer independent queries, up to ``max_in_flight`` at once; results keep input order."""
        if self.max_in_flight == 1 or len(queries) < 2:
            return [self.answer(q) for q in queries]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(self.answer, queries))
