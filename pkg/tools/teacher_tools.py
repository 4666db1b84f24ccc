"""
Chat-completion gateway for the teacher LLM.

Requests go out in the de-facto chat-completions JSON shape (single user turn).
Every response is stored in a content-addressed cache, so a warm cache replays a
whole run without touching the network. Token usage and cost accumulate in a
session ledger.
"""
import os
import re
import csv
import json
import math
import time
import hashlib
import logging
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from decimal import Decimal, ROUND_HALF_UP
from typing import Optional, List, Dict, Any, Callable, Sequence, Tuple

import requests
from pydantic import BaseModel, Field

API_KEY_ENV = "REASONRANK_API_KEY"
DEFAULT_TEMPERATURE = 1.0
DEFAULT_TOP_P = 0.9
DEFAULT_MAX_RETRIES = 3
DEFAULT_CONCURRENCY = 4
TOKEN_INFLATION = 1.3
RETRYABLE_STATUS = {429, 500, 502, 503, 504}

_APPROX_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class GatewayError(RuntimeError):
    def __init__(self, message: str, attempts: int = 0):
        self.attempts = attempts
        super().__init__(message)


class OfflineCacheMiss(GatewayError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"offline cache miss for request {key[:12]}", attempts=0)


class TransportError(RuntimeError):
    """Network-level failure (connection reset, timeout); always retryable."""


# --- Pydantic Models ---
class CompletionRequest(BaseModel, frozen=True):
    model: str
    prompt: str
    temperature: float = Field(DEFAULT_TEMPERATURE, ge=0.0)
    top_p: float = Field(DEFAULT_TOP_P, gt=0.0, le=1.0)
    max_tokens: int = Field(2048, ge=1, description="Maximum response tokens.")

    def to_payload(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }


class Pricing(BaseModel, frozen=True):
    input_per_1k: float = Field(ge=0.0, description="USD per 1K input tokens.")
    output_per_1k: float = Field(ge=0.0, description="USD per 1K output tokens.")

    def cost(self, input_tokens: int, output_tokens: int) -> float:
        return input_tokens * self.input_per_1k / 1000.0 + output_tokens * self.output_per_1k / 1000.0


class UsageRecord(BaseModel):
    input_tokens: int = Field(0, ge=0)
    output_tokens: int = Field(0, ge=0)
    requests: int = Field(0, ge=0)
    cost: float = Field(0.0, ge=0.0)


class CompletionResult(BaseModel):
    key: str
    text: str
    usage: UsageRecord
    cached: bool = False


class CostProfile(BaseModel, frozen=True):
    """Average per-query token split for one prompt mode."""
    mode: str
    input_tokens: int = Field(ge=0)
    output_tokens: int = Field(ge=0)

    @property
    def total_tokens(self) -> int:
        return self.input_tokens + self.output_tokens


# --- Token and cost accounting ---
def approx_token_count(text: str) -> int:
    return math.ceil(len(_APPROX_TOKEN_RE.findall(text)) * TOKEN_INFLATION)


def round_cost(value: float) -> float:
    return float(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def estimate_cost(input_tokens: int, output_tokens: int, pricing: Pricing) -> float:
    if input_tokens < 0 or output_tokens < 0:
        raise ValueError(f"token counts must be non-negative, got ({input_tokens}, {output_tokens})")
    return round_cost(pricing.cost(input_tokens, output_tokens))


def profile_cost(profile: CostProfile, pricing: Pricing) -> float:
    return estimate_cost(profile.input_tokens, profile.output_tokens, pricing)


def cache_key(request: CompletionRequest) -> str:
    material = json.dumps(
        {"model": request.model, "prompt": request.prompt, "temperature": request.temperature, "top_p": request.top_p},
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


class UsageLedger:
    """Thread-safe per-request usage log for one session."""

    def __init__(self, pricing: Pricing):
        self.pricing = pricing
        self._lock = threading.Lock()
        self._rows: List[Tuple[str, UsageRecord, bool]] = []

    def record(self, key: str, usage: UsageRecord, cached: bool) -> None:
        with self._lock:
            self._rows.append((key, usage, cached))

    def rows(self) -> List[Tuple[str, UsageRecord, bool]]:
        with self._lock:
            return list(self._rows)

    def totals(self) -> UsageRecord:
        rows = self.rows()
        return UsageRecord(
            input_tokens=sum(u.input_tokens for _, u, _ in rows),
            output_tokens=sum(u.output_tokens for _, u, _ in rows),
            requests=sum(u.requests for _, u, _ in rows),
            cost=sum(u.cost for _, u, _ in rows),
        )

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["key", "cached", "requests", "input_tokens", "output_tokens", "cost_usd"])
            for key, usage, cached in sorted(self.rows(), key=lambda row: row[0]):
                writer.writerow([key, int(cached), usage.requests, usage.input_tokens, usage.output_tokens, f"{usage.cost:.6f}"])


class ResponseCache:
    """Content-addressed store: <root>/<key[:2]>/<key>.json holding request and response."""

    def __init__(self, root: str):
        self.root = root
        self._locks: Dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def path_for(self, key: str) -> str:
        return os.path.join(self.root, key[:2], f"{key}.json")

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def put(self, key: str, request: CompletionRequest, text: str, usage: UsageRecord) -> None:
        path = self.path_for(key)
        record = {"key": key, "request": request.model_dump(), "response": text, "usage": usage.model_dump()}
        with self._lock_for(key):
            os.makedirs(os.path.dirname(path), exist_ok=True)
            fd, tmp_path = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(record, f, indent=2, sort_keys=True, ensure_ascii=False)
                f.write("\n")
            os.replace(tmp_path, path)


# --- Transports ---
class TransportResponse(BaseModel):
    status: int
    body: Dict[str, Any] = Field(default_factory=dict)


class HttpTransport:
    """POSTs chat payloads; safe to share across the gateway's worker threads."""

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.getenv(API_KEY_ENV, "")
        self.timeout = timeout
        self.calls = 0
        self._calls_lock = threading.Lock()
        self._local = threading.local()

    @property
    def session(self) -> requests.Session:
        # requests.Session is not thread-safe: one per worker thread
        session = getattr(self._local, "session", None)
        if session is None:
            session = self._local.session = requests.Session()
        return session

    def send(self, payload: Dict[str, Any]) -> TransportResponse:
        with self._calls_lock:
            self.calls += 1
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(str(e)) from e
        try:
            body = response.json()
        except ValueError:
            body = {"raw": response.text}
        return TransportResponse(status=response.status_code, body=body if isinstance(body, dict) else {"raw": body})


def _content_of(body: Dict[str, Any]) -> str:
    try:
        return body["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as e:
        raise GatewayError(f"response body has no choices[0].message.content: {str(body)[:200]}") from e


class TeacherGateway:
    def __init__(
        self,
        transport: Any,
        cache: ResponseCache,
        pricing: Pricing,
        max_retries: int = DEFAULT_MAX_RETRIES,
        backoff_seconds: float = 1.0,
        cache_only: bool = False,
        concurrency: int = DEFAULT_CONCURRENCY,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.cache = cache
        self.ledger = UsageLedger(pricing)
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.cache_only = cache_only
        self.concurrency = max(1, concurrency)
        self._sleep = sleep

    @property
    def pricing(self) -> Pricing:
        return self.ledger.pricing

    def complete(self, request: CompletionRequest) -> CompletionResult:
        key = cache_key(request)
        hit = self.cache.get(key)
        if hit is not None:
            logging.debug(f"Cache hit {key[:12]}")
            usage = UsageRecord()
            self.ledger.record(key, usage, cached=True)
            return CompletionResult(key=key, text=hit["response"], usage=usage, cached=True)
        if self.cache_only or self.transport is None:
            raise OfflineCacheMiss(key)

        body, attempts = self._send_with_retries(request.to_payload(), key)
        text = _content_of(body)
        reported = body.get("usage") or {}
        input_tokens = int(reported.get("prompt_tokens") or approx_token_count(request.prompt))
        output_tokens = int(reported.get("completion_tokens") or approx_token_count(text))
        usage = UsageRecord(
            input_tokens=input_tokens,
            output_tokens=output_tokens,
            requests=attempts,
            cost=self.pricing.cost(input_tokens, output_tokens),
        )
        self.cache.put(key, request, text, usage)
        self.ledger.record(key, usage, cached=False)
        return CompletionResult(key=key, text=text, usage=usage, cached=False)

    def _send_with_retries(self, payload: Dict[str, Any], key: str) -> Tuple[Dict[str, Any], int]:
        total_attempts = self.max_retries + 1
        last_problem = ""
        for attempt in range(1, total_attempts + 1):
            try:
                response = self.transport.send(payload)
            except TransportError as e:
                last_problem = f"transport error: {e}"
            else:
                if response.status == 200:
                    return response.body, attempt
                if response.status not in RETRYABLE_STATUS:
                    raise GatewayError(f"request {key[:12]} rejected with HTTP {response.status}", attempts=attempt)
                last_problem = f"HTTP {response.status}"
            if attempt < total_attempts:
                delay = self.backoff_seconds * (2 ** (attempt - 1))
                logging.warning(f"Request {key[:12]} failed ({last_problem}), attempt {attempt}/{total_attempts}; retrying in {delay:.1f}s")
                self._sleep(delay)
        logging.error(f"Request {key[:12]} failed after {total_attempts} attempts: {last_problem}")
        raise GatewayError(f"request {key[:12]} failed after {total_attempts} attempts: {last_problem}", attempts=total_attempts)

    def complete_many(self, requests_: Sequence[CompletionRequest]) -> List[CompletionResult]:
        if not requests_:
            return []
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self.complete, requests_))
