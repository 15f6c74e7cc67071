"""JSON POST with exponential-backoff retries and an overall time budget."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import requests

log = logging.getLogger(__name__)

RETRY_STATUS = frozenset({408, 425, 429, 500, 502, 503, 504})


class TransportError(RuntimeError):
    def __init__(self, message: str, attempts: int, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class BudgetExceeded(TransportError):
    def __init__(self, elapsed: float, budget: float, attempts: int):
        super().__init__(f"timeout budget of {budget:.1f}s exceeded after {elapsed:.2f}s", attempts)
        self.elapsed = elapsed
        self.budget = budget


@dataclass
class PostResult:
    body: dict
    retries: int
    latency_s: float


def post_json(url: str, payload: dict, headers: dict | None = None, *, attempts: int = 3,
              backoff_base: float = 1.0, budget_s: float | None = None,
              session: requests.Session | None = None, sleep=time.sleep) -> PostResult:
    """POST ``payload`` and decode the JSON reply.

    Transport errors, timeouts and retryable statuses are retried with
    delays ``backoff_base * 2**i``.  Other 4xx replies fail at once.  When
    ``budget_s`` is set it bounds the whole call including backoff.
    """
    http = session or requests
    start = time.monotonic()
    last = None
    status = None
    for attempt in range(attempts):
        timeout = None
        if budget_s is not None:
            timeout = budget_s - (time.monotonic() - start)
            if timeout <= 0:
                raise BudgetExceeded(time.monotonic() - start, budget_s, attempt)
        try:
            resp = http.post(url, json=payload, headers=headers or {}, timeout=timeout)
        except requests.Timeout as exc:
            last, status = exc, None
            if budget_s is not None and time.monotonic() - start >= budget_s:
                raise BudgetExceeded(time.monotonic() - start, budget_s, attempt + 1) from exc
        except requests.RequestException as exc:
            last, status = exc, None
        else:
            if resp.status_code < 400:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise TransportError(f"non-JSON reply from {url}", attempt + 1, resp.status_code) from exc
                return PostResult(body, attempt, time.monotonic() - start)
            status = resp.status_code
            last = f"HTTP {status}: {resp.text[:300]}"
            if status not in RETRY_STATUS:
                raise TransportError(f"{url}: {last}", attempt + 1, status)
        if attempt + 1 < attempts:
            wait = backoff_base * 2 ** attempt
            if budget_s is not None and time.monotonic() - start + wait >= budget_s:
                raise BudgetExceeded(time.monotonic() - start + wait, budget_s, attempt + 1)
            log.warning("POST %s failed (%s); retry %d/%d in %.2fs", url, last, attempt + 1, attempts - 1, wait)
            sleep(wait)
    raise TransportError(f"{url}: giving up after {attempts} attempts: {last}", attempts, status)
