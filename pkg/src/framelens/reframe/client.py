"""Minimal chat-completion client with retry and backoff."""

from __future__ import annotations

import logging
import os
import time
from typing import Protocol

import httpx

from ..errors import EndpointError
from .items import ReframeConfig

log = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str:
        """Return the assistant message text for a single user prompt."""


class HTTPChatClient:
    """POSTs ``{"model", "messages", "temperature"}`` and reads ``choices[0].message.content``."""

    def __init__(self, config: ReframeConfig, *, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.config = config
        key = os.environ.get(config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout_s, headers=headers, transport=transport)
        self._sleep = sleep

    def close(self) -> None:
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, prompt: str) -> str:
        cfg = self.config
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
        }
        last: str = ""
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(cfg.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._http.post(cfg.endpoint_url, json=body)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("endpoint attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}"
                log.warning("endpoint attempt %d failed: %s", attempt + 1, last)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"unexpected response body: {exc}") from None
        raise EndpointError(f"endpoint unreachable after {cfg.max_retries + 1} attempts ({last})")


class CannedClient:
    """Offline client: returns the canned response whose key occurs in the prompt.

    Keys are usually the source question text. Longer keys are tried first so
    a question that contains another one still gets its own response. Every
    prompt sent is kept in ``sent``.
    """

    def __init__(self, responses: dict[str, str]):
        self.responses = dict(responses)
        self._keys = sorted(self.responses, key=len, reverse=True)
        self.sent: list[str] = []

    def complete(self, prompt: str) -> str:
        self.sent.append(prompt)
        for key in self._keys:
            if key in prompt:
                return self.responses[key]
        raise EndpointError("no canned response matches the prompt")
