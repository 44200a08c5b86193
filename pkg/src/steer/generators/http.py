"""Client for OpenAI-compatible ``/completions`` endpoints that return logprobs.

Raw vocabulary logits are not exposed by such servers, so each token's
confidence is the largest returned log-probability (tagged
``logprobs_proxy``). A response without logprobs is an error: confidences
are never filled in with defaults.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Optional

import httpx

from ..confidence import token_from_logprobs
from .base import Backend, Generator, GeneratorError, GeneratorSpec, StepOutput, split_at_separator

logger = logging.getLogger(__name__)

API_KEY_ENV = "STEER_API_KEY"


class HttpGenerator(Generator):
    def __init__(self, spec: GeneratorSpec, *, attempts: int = 3, backoff: float = 0.5,
                 timeout: float = 60.0, client: Optional[httpx.Client] = None):
        if spec.backend is not Backend.HTTP:
            raise ValueError("HttpGenerator needs a spec with backend='http'")
        self.spec = spec
        self.attempts = attempts
        self.backoff = backoff
        self._base = spec.endpoint.rstrip("/")
        headers = {}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def close(self):
        self._client.close()

    def check(self) -> None:
        try:
            resp = self._client.get(f"{self._base}/models")
        except httpx.HTTPError as exc:
            raise GeneratorError(f"cannot reach {self._base}: {exc}") from exc
        if resp.status_code >= 400:
            raise GeneratorError(f"{self._base}/models answered HTTP {resp.status_code}")

    def _post(self, payload: dict) -> dict:
        url = f"{self._base}/completions"
        last_error = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, self.attempts, url, exc)
                continue
            if resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("attempt %d/%d to %s got HTTP %d", attempt + 1, self.attempts,
                               url, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise GeneratorError(f"{url} rejected the request: HTTP {resp.status_code} {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise GeneratorError(f"{url} returned invalid JSON") from exc
        raise GeneratorError(f"{url} failed after {self.attempts} attempts ({last_error})")

    def generate_step(self, prompt: str, question_id: str = "", step_index: int = 0) -> StepOutput:
        if not prompt:
            raise GeneratorError("prompt must be non-empty")
        data = self._post({
            "model": self.spec.name,
            "prompt": prompt,
            "temperature": self.spec.temperature,
            "stop": [self.spec.stop_sequence],
            "max_tokens": self.spec.max_tokens_per_step,
            "logprobs": 1,
        })
        return parse_completion(data, self.spec.stop_sequence)


def parse_completion(data: dict, stop_sequence: str) -> StepOutput:
    """Turn one completions response body into a :class:`StepOutput`."""
    try:
        choice = data["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GeneratorError("completion response has no choices[0].text") from exc

    lp = choice.get("logprobs")
    if not lp or lp.get("tokens") is None:
        raise GeneratorError("completion response carries no logprobs")
    tok_texts = lp["tokens"]
    tok_lps = lp.get("token_logprobs") or [None] * len(tok_texts)
    top = lp.get("top_logprobs") or [None] * len(tok_texts)
    if not (len(tok_lps) == len(top) == len(tok_texts)):
        raise GeneratorError("logprobs arrays have mismatched lengths")
    if text and not tok_texts:
        raise GeneratorError("completion text has no per-token logprobs")

    step_text, hit_sep = split_at_separator(text, stop_sequence)
    tokens = []
    consumed = 0
    for tok, tok_lp, top_j in zip(tok_texts, tok_lps, top):
        # drop tokens that start beyond the separator if the server ignored `stop`
        if hit_sep and consumed >= len(step_text):
            break
        consumed += len(tok)
        candidates = list(top_j.values()) if top_j else []
        if tok_lp is not None:
            candidates.append(tok_lp)
        if not candidates:
            raise GeneratorError(f"token {tok!r} has no log-probability")
        tokens.append(token_from_logprobs(tok, candidates))

    finish = choice.get("finish_reason")
    if hit_sep:
        eos = False
    elif finish == "stop":
        if "stop_reason" in choice:
            # vLLM reports the matched stop string here and None for a true EOS
            eos = choice["stop_reason"] != stop_sequence
            hit_sep = not eos
        else:
            eos = text.strip() == ""
            hit_sep = not eos
    else:
        eos = False

    usage = data.get("usage") or {}
    return StepOutput(
        text=step_text,
        tokens=tokens,
        eos=eos,
        prompt_tokens=int(usage.get("prompt_tokens") or 0),
        hit_separator=hit_sep,
    )
