"""HTTP client for a remote generation endpoint.

Wire protocol: POST {base_url}/v1/generate with JSON
{"prompt": str, "temperature": float, "max_tokens": int, "seed": int},
expecting 200 with {"text": str}. Anything else (connection failure,
non-200, malformed body) is an endpoint error, retried with exponential
backoff up to max_attempts. A bearer token is attached from the
MAPO_ENDPOINT_TOKEN environment variable when present.
"""

from __future__ import annotations

import os
import time
from typing import Callable

import requests

from mapo.errors import EndpointError

TOKEN_ENV_VAR = "MAPO_ENDPOINT_TOKEN"


class RemoteClient:
    def __init__(
        self,
        base_url: str,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        max_in_flight: int = 1,
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._session = session or requests.Session()

    def generate_text(self, prompt: str, temperature: float, max_tokens: int, seed: int) -> str:
        body = {
            "prompt": prompt,
            "temperature": temperature,
            "max_tokens": max_tokens,
            "seed": seed,
        }
        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt > 0:
                self._sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._session.post(
                    f"{self.base_url}/v1/generate",
                    json=body,
                    headers=headers,
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code != 200:
                last_error = EndpointError(f"endpoint returned status {resp.status_code}")
                continue
            try:
                payload = resp.json()
                text = payload["text"]
            except (ValueError, KeyError, TypeError) as exc:
                last_error = EndpointError(f"malformed endpoint reply: {exc}")
                continue
            if not isinstance(text, str):
                last_error = EndpointError("endpoint reply 'text' is not a string")
                continue
            return text
        raise EndpointError(
            f"endpoint {self.base_url} failed after {self.max_attempts} attempts: {last_error}"
        )
