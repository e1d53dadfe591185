"""HTTP plumbing shared by every stage that talks to the network."""

from __future__ import annotations

import logging
import random
import time
from pathlib import Path
from typing import Callable, Optional, TypeVar
from urllib.parse import unquote, urlparse

import requests

from risbench.errors import NetworkError, PermanentNetworkError, RateLimited

log = logging.getLogger(__name__)

USER_AGENT = "risbench/0.1 (retrievability measurement harness)"
T = TypeVar("T")


def make_session(user_agent: str = USER_AGENT) -> requests.Session:
    s = requests.Session()
    s.headers["User-Agent"] = user_agent
    return s


def backoff_delays(attempts: int, base: float, cap: float = 60.0, jitter: float = 0.0, rng=None):
    rng = rng or random
    for i in range(attempts - 1):
        yield min(cap, base * (2**i)) + (rng.uniform(0, jitter) if jitter else 0.0)


def with_retries(
    fn: Callable[[], T],
    attempts: int = 3,
    base_delay: float = 1.0,
    retry_on: tuple = (NetworkError,),
    sleep: Callable[[float], None] = time.sleep,
    jitter: float = 0.0,
) -> T:
    """Call ``fn`` until it succeeds or ``attempts`` run out; re-raises the last error."""
    delays = list(backoff_delays(attempts, base_delay, jitter=jitter))
    for i in range(attempts):
        try:
            return fn()
        except retry_on as exc:
            if i == attempts - 1 or not getattr(exc, "retryable", True):
                raise
            log.info("attempt %d failed (%s); retrying in %.2fs", i + 1, exc, delays[i])
            sleep(delays[i])
    raise AssertionError("unreachable")


def check_response(resp: requests.Response) -> requests.Response:
    if resp.status_code == 429:
        raise RateLimited(f"{resp.url}: HTTP 429")
    if resp.status_code >= 500:
        raise NetworkError(f"{resp.url}: HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise PermanentNetworkError(f"{resp.url}: HTTP {resp.status_code}")
    return resp


def fetch_bytes(url: str, session: Optional[requests.Session] = None, timeout: float = 30.0) -> bytes:
    """GET an http(s) or file URL and return the body; raises NetworkError on failure."""
    parsed = urlparse(url)
    if parsed.scheme == "file":
        path = Path(unquote(parsed.path))
        try:
            return path.read_bytes()
        except OSError as exc:
            raise PermanentNetworkError(f"{url}: {exc}") from exc
    if parsed.scheme not in ("http", "https"):
        raise PermanentNetworkError(f"unsupported URL scheme in {url!r}")
    session = session or make_session()
    try:
        resp = session.get(url, timeout=timeout)
    except requests.RequestException as exc:
        raise NetworkError(f"{url}: {exc}") from exc
    check_response(resp)
    return resp.content
