"""Document expansion: prompt rendering, query generation and expansion files.

Two query sources share one output type (:class:`ExpandedQueries`): a remote
completion endpoint driven by :func:`generate_remote`, and the offline
:class:`SyntheticExpander` which builds queries from salient passage terms.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
import warnings
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

from .data import DataError, Passage, split_words

log = logging.getLogger(__name__)

STOPWORDS = frozenset("""
a about above after again against all also am an and any are as at be because been before being below
between both but by can could did do does doing down during each few for from further had has have having
he her here hers him his how i if in into is it its itself just me more most my no nor not now of off on
once only or other our out over own same she should so some such than that the their them then there these
they this those through to too under until up very was we were what when where which while who whom why
will with would you your relate relates related
""".split())


# -- prompts ------------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\{(n|passage|examples)\}")


@dataclass(frozen=True)
class PromptTemplate:
    kind: str
    text: str
    exemplars: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        if self.kind not in ("zero-shot", "few-shot"):
            raise ValueError(f"unknown template kind {self.kind!r}")
        if self.text.count("{passage}") != 1:
            raise ValueError("template text must contain the {passage} placeholder exactly once")
        if self.kind == "few-shot" and not self.exemplars:
            raise ValueError("few-shot templates need at least one exemplar")

    @classmethod
    def parse(cls, source: str) -> "PromptTemplate":
        """Parse the sectioned text format of the shipped template files.

        ``kind: ...`` header, then a ``--- template`` section, then zero or
        more ``--- example`` sections of ``passage:``/``query:`` lines.
        Lines starting with ``#`` before the first section are comments.
        """
        kind = None
        sections: list[tuple[str, list[str]]] = []
        for lineno, line in enumerate(source.splitlines(), 1):
            if line.startswith("--- "):
                sections.append((line[4:].strip(), []))
            elif sections:
                sections[-1][1].append(line)
            elif line.strip() and not line.startswith("#"):
                key, _, value = line.partition(":")
                if key.strip() != "kind":
                    raise DataError(f"template line {lineno}: unexpected header {line!r}")
                kind = value.strip()
        if kind is None:
            raise DataError("template is missing a 'kind:' header")
        text = None
        exemplars = []
        for name, lines in sections:
            if name == "template":
                text = "\n".join(lines).strip("\n") + "\n"
            elif name == "example":
                passage, queries = None, []
                for line in lines:
                    key, _, value = line.partition(":")
                    if key.strip() == "passage":
                        passage = value.strip()
                    elif key.strip() == "query":
                        queries.append(value.strip())
                if not passage or not queries:
                    raise DataError("template example needs a passage and at least one query")
                exemplars.append((passage, tuple(queries)))
            else:
                raise DataError(f"unknown template section {name!r}")
        if text is None:
            raise DataError("template has no '--- template' section")
        return cls(kind, text, tuple(exemplars))

    @classmethod
    def load(cls, path_or_name: str) -> "PromptTemplate":
        """Load a template file, or a shipped default by name."""
        builtin = {"zero-shot": "zero_shot.txt", "few-shot": "few_shot.txt"}
        if path_or_name in builtin:
            source = resources.files("expandpt").joinpath("templates", builtin[path_or_name]).read_text("utf-8")
        else:
            source = Path(path_or_name).read_text("utf-8")
        return cls.parse(source)


def _render_exemplars(exemplars) -> str:
    blocks = []
    for i, (passage, queries) in enumerate(exemplars, 1):
        blocks.append(f"Positive Example {i} -\nInput: {passage}\nOutput:\n" + "\n".join(queries) + "\n")
    return "\n".join(blocks)


def render_prompt(template: PromptTemplate, passage: Passage, n: int) -> str:
    """Fill the template in a single pass; substituted text is never re-scanned."""
    if n < 1:
        raise ValueError("n must be >= 1")
    values = {"n": str(n), "passage": passage.text, "examples": _render_exemplars(template.exemplars)}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template.text)


# -- generation parameters and records ------------------------------------------

@dataclass(frozen=True)
class GenerationParams:
    top_p: float = 0.95
    top_k: int = 50
    temperature: float = 0.7
    max_new_tokens: int = 128
    n_queries_requested: int = 3

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.n_queries_requested < 1:
            raise ValueError("n_queries_requested must be >= 1")


@dataclass
class ExpandedQueries:
    passage_id: str
    queries: list[str]
    generator: str
    params: dict = field(default_factory=dict)
    created_at: str | None = None
    shortfall: int = 0

    def to_record(self) -> dict:
        rec = {"passage_id": self.passage_id, "queries": list(self.queries),
               "generator": self.generator, "params": self.params}
        if self.created_at is not None:
            rec["created_at"] = self.created_at
        return rec


def dedup_casefold(items: Iterable[str]) -> list[str]:
    seen, out = set(), []
    for q in items:
        key = q.casefold()
        if key not in seen:
            seen.add(key)
            out.append(q)
    return out


# -- completion parsing -------------------------------------------------------

class EmptyExpansion(DataError):
    pass


_ENUM_PREFIX = re.compile(
    r"^\s*(?:\(?\d+\s*[.):\]]|[-*•‣◦]|(?:q|query)\s*\d*\s*[:.)])\s*", re.IGNORECASE)


def parse_completion(raw: str) -> list[str]:
    """One query per line, enumeration stripped, case-insensitively deduplicated."""
    out = []
    for line in raw.splitlines():
        q = _ENUM_PREFIX.sub("", line, count=1).strip()
        if q:
            out.append(q)
    out = dedup_casefold(out)
    if not out:
        raise EmptyExpansion("completion contained no queries")
    return out


# -- remote endpoint ------------------------------------------------------------

class EndpointError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class EndpointTimeout(EndpointError):
    pass


class ResponseParseError(EndpointError):
    pass


class RateLimiter:
    """Global requests-per-second limit shared across worker threads."""

    def __init__(self, rate: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 0.0 if not rate else 1.0 / rate
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock, self._sleep = clock, sleep

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


class CompletionAdapter:
    """Plain completion protocol: POST {prompt, top_p, top_k, temperature, max_tokens} -> {"text"}."""

    def build_body(self, prompt: str, params: GenerationParams) -> dict:
        return {"prompt": prompt, "top_p": params.top_p, "top_k": params.top_k,
                "temperature": params.temperature, "max_tokens": params.max_new_tokens}

    def parse_body(self, body) -> str:
        if isinstance(body, dict):
            if isinstance(body.get("text"), str):
                return body["text"]
            choices = body.get("choices")
            if isinstance(choices, list) and choices and isinstance(choices[0], dict) \
                    and isinstance(choices[0].get("text"), str):
                return choices[0]["text"]
        raise ResponseParseError("response has no 'text' field")


class ChatAdapter(CompletionAdapter):
    """Chat-style endpoints: one user message in, first choice's content out."""

    def build_body(self, prompt: str, params: GenerationParams) -> dict:
        body = super().build_body(prompt, params)
        del body["prompt"]
        body["messages"] = [{"role": "user", "content": prompt}]
        return body

    def parse_body(self, body) -> str:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ResponseParseError("response has no choices[0].message.content") from None
        if not isinstance(content, str):
            raise ResponseParseError("message content is not a string")
        return content


ADAPTERS = {"completion": CompletionAdapter, "chat": ChatAdapter}


@dataclass
class EndpointConfig:
    url: str
    token_env: str | None = None
    timeout: float = 30.0
    retries: int = 2
    rate_limit: float | None = None
    backoff: float = 0.5
    model: str = "remote"
    adapter: str = "completion"


class EndpointMetrics:
    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.failures = 0
        self.retries = 0

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)


_RETRY_STATUS = {408, 425, 429, 500, 502, 503, 504}


def generate_remote(endpoint: EndpointConfig, prompt: str, params: GenerationParams,
                    client: httpx.Client | None = None, limiter: RateLimiter | None = None,
                    metrics: EndpointMetrics | None = None, sleep: Callable[[float], None] = time.sleep) -> str:
    """POST one completion request; retry transport failures and 5xx with backoff."""
    if not endpoint.url:
        raise EndpointError("no endpoint URL configured")
    adapter = ADAPTERS[endpoint.adapter]()
    headers = {"Content-Type": "application/json"}
    if endpoint.token_env:
        token = os.environ.get(endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
    body = adapter.build_body(prompt, params)
    own_client = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)
    metrics = metrics or EndpointMetrics()
    try:
        last_exc: EndpointError | None = None
        for attempt in range(endpoint.retries + 1):
            if attempt:
                metrics.bump("retries")
                sleep(endpoint.backoff * 2 ** (attempt - 1))
            if limiter is not None:
                limiter.acquire()
            metrics.bump("requests")
            try:
                resp = client.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except httpx.TimeoutException as exc:
                last_exc = EndpointTimeout(f"request timed out after {endpoint.timeout}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last_exc = EndpointError(f"transport failure: {exc}")
                continue
            if resp.status_code in _RETRY_STATUS:
                last_exc = EndpointError(f"endpoint returned HTTP {resp.status_code}", resp.status_code)
                continue
            if not 200 <= resp.status_code < 300:
                metrics.bump("failures")
                raise EndpointError(f"endpoint returned HTTP {resp.status_code}", resp.status_code)
            try:
                payload = resp.json()
            except (json.JSONDecodeError, ValueError):
                metrics.bump("failures")
                raise ResponseParseError("response body is not JSON", resp.status_code) from None
            return adapter.parse_body(payload)
        metrics.bump("failures")
        assert last_exc is not None
        raise last_exc
    finally:
        if own_client:
            client.close()


# -- synthetic generator --------------------------------------------------------

SKELETONS = ("what is {x}", "how does {x} relate to {y}", "{x} {y} {z}")


def content_terms(text: str) -> list[str]:
    return [w for w in split_words(text) if w.isalnum() and w not in STOPWORDS and len(w) > 1]


class SyntheticExpander:
    """Seeded offline query generator ranking terms by tf x idf."""

    def __init__(self, corpus: Sequence[Passage] = (), pool_size: int = 8):
        df: Counter[str] = Counter()
        for p in corpus:
            df.update(set(content_terms(p.text)))
        self.doc_freq = df
        self.n_docs = len(corpus)
        self.pool_size = pool_size

    def ranked_terms(self, text: str) -> list[tuple[str, float]]:
        tf = Counter(content_terms(text))
        scored = []
        for term, count in tf.items():
            idf = math.log((self.n_docs + 1) / (self.doc_freq.get(term, 0) + 1)) + 1.0
            scored.append((term, count * idf))
        scored.sort(key=lambda ts: (-ts[1], ts[0]))
        return scored

    def generate(self, passage: Passage, n: int, seed: int) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        pool = self.ranked_terms(passage.text)[: self.pool_size]
        if not pool:
            words = split_words(passage.text)[:5]
            return [" ".join(words) if words else passage.text.strip()]
        terms = [t for t, _ in pool]
        weights = np.array([s for _, s in pool], dtype=np.float64)
        weights /= weights.sum()
        key = zlib.crc32(f"{passage.id}\x00{passage.text}".encode("utf-8"))
        rng = np.random.default_rng([seed & 0xFFFFFFFF, key, n])
        queries: list[str] = []
        seen: set[str] = set()
        for _ in range(20 * n):
            if len(queries) >= n:
                break
            usable = [s for s in SKELETONS if s.count("{") <= len(terms)]
            skel = usable[int(rng.integers(len(usable)))]
            k = skel.count("{")
            picked = rng.choice(len(terms), size=k, replace=False, p=weights)
            q = skel.format(**dict(zip("xyz", (terms[i] for i in picked))))
            if q.casefold() not in seen:
                seen.add(q.casefold())
                queries.append(q)
        return queries

    def expand(self, passage: Passage, n: int, seed: int) -> ExpandedQueries:
        qs = self.generate(passage, n, seed)
        return ExpandedQueries(passage.id, qs, "synthetic", {"n": n, "seed": seed}, shortfall=max(0, n - len(qs)))


def generate_synthetic(passage: Passage, n: int, seed: int, corpus: Sequence[Passage] = ()) -> list[str]:
    return SyntheticExpander(corpus or [passage]).generate(passage, n, seed)


# -- fan-out --------------------------------------------------------------------

def expand_remote(passages: Sequence[Passage], template: PromptTemplate, endpoint: EndpointConfig,
                  params: GenerationParams, workers: int = 4, client: httpx.Client | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> tuple[list[ExpandedQueries], dict]:
    """Expand passages through the endpoint with a worker pool and a global rate limit.

    Results come back in corpus order regardless of completion order. Passages
    whose completion parses to nothing are skipped and counted.
    """
    limiter = RateLimiter(endpoint.rate_limit, sleep=sleep)
    metrics = EndpointMetrics()
    shared = client or httpx.Client(timeout=endpoint.timeout)
    echo = asdict(params)

    def one(p: Passage):
        prompt = render_prompt(template, p, params.n_queries_requested)
        raw = generate_remote(endpoint, prompt, params, client=shared, limiter=limiter, metrics=metrics, sleep=sleep)
        try:
            return ExpandedQueries(p.id, parse_completion(raw), f"remote:{endpoint.model}", echo)
        except EmptyExpansion:
            return None

    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = dict(zip((p.id for p in passages), pool.map(one, passages)))
    finally:
        if client is None:
            shared.close()
    records = [results[p.id] for p in passages if results[p.id] is not None]
    stats = {"requests": metrics.requests, "retries": metrics.retries, "failures": metrics.failures,
             "skipped_empty": len(passages) - len(records)}
    return records, stats


# -- persistence ----------------------------------------------------------------

class OrphanExpansionWarning(UserWarning):
    pass


def persist_expansions(records: Iterable[ExpandedQueries], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if not rec.queries:
                raise DataError(f"record for {rec.passage_id!r} has no queries")
            fh.write(json.dumps(rec.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def read_expansion_records(path) -> list[ExpandedQueries]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                queries = rec["queries"]
                if not isinstance(queries, list) or not all(isinstance(q, str) and q.strip() for q in queries):
                    raise ValueError("queries must be a list of non-empty strings")
                out.append(ExpandedQueries(str(rec["passage_id"]), list(queries), str(rec.get("generator", "")),
                                           dict(rec.get("params", {})), rec.get("created_at")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"expansion line {lineno}: {exc}") from None
    return out


def load_expansions(path, corpus_ids: Iterable[str] | None = None) -> dict[str, list[str]]:
    """Map passage_id -> queries; records with unknown ids are dropped with a warning."""
    records = read_expansion_records(path)
    known = None if corpus_ids is None else set(corpus_ids)
    out: dict[str, list[str]] = {}
    orphans = []
    for rec in records:
        if known is not None and rec.passage_id not in known:
            orphans.append(rec.passage_id)
            continue
        out[rec.passage_id] = dedup_casefold(out.get(rec.passage_id, []) + rec.queries)
    if orphans:
        msg = f"{len(orphans)} expansion record(s) reference unknown passages: {orphans[:10]}"
        log.warning(msg)
        warnings.warn(msg, OrphanExpansionWarning, stacklevel=2)
    return out
