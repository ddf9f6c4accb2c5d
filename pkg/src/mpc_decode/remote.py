"""HTTP-backed policy and outcome scorers speaking the OpenAI-compatible
completion protocol.

Base URL and credential come from MPC_DECODE_BASE_URL / MPC_DECODE_API_KEY
unless given explicitly. Requests retry up to 3 attempts with exponential
backoff starting at 500 ms, and only on transport errors, 429, or 5xx.
"""

from __future__ import annotations

import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import requests

from .core import Action, StateObs
from .policy import (
    Policy,
    PolicyContext,
    PolicyError,
    ScoringUnavailable,
    SupportUnavailable,
    render_prompt,
)

BASE_URL_VAR = "MPC_DECODE_BASE_URL"
API_KEY_VAR = "MPC_DECODE_API_KEY"

RETRY_ATTEMPTS = 3
BACKOFF_BASE_S = 0.5
RETRYABLE_STATUSES = frozenset({429}) | frozenset(range(500, 600))


class RemoteError(PolicyError):
    pass


@dataclass
class RemoteConfig:
    base_url: Optional[str] = None
    api_key: Optional[str] = None
    model: str = "default"
    max_tokens: int = 128
    use_chat: bool = False
    timeout_s: float = 60.0
    max_in_flight: int = 8
    backoff_base_s: float = BACKOFF_BASE_S
    stop: tuple[str, ...] = ("\n",)

    def resolved_base_url(self) -> str:
        url = self.base_url or os.environ.get(BASE_URL_VAR)
        if not url:
            raise RemoteError(f"no base URL configured (set {BASE_URL_VAR})")
        return url.rstrip("/")

    def resolved_api_key(self) -> Optional[str]:
        return self.api_key or os.environ.get(API_KEY_VAR)


class HttpClient:
    """Session with bounded in-flight requests and the retry policy above."""

    def __init__(self, cfg: RemoteConfig):
        self.cfg = cfg
        self.session = requests.Session()
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)

    def post(self, path: str, payload: dict) -> dict:
        url = self.cfg.resolved_base_url() + path
        headers = {"Content-Type": "application/json"}
        key = self.cfg.resolved_api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error: Optional[Exception] = None
        for attempt in range(RETRY_ATTEMPTS):
            if attempt:
                time.sleep(self.cfg.backoff_base_s * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    resp = self.session.post(
                        url, json=payload, headers=headers, timeout=self.cfg.timeout_s
                    )
            except requests.RequestException as e:
                last_error = e
                continue
            if resp.status_code in RETRYABLE_STATUSES:
                last_error = RemoteError(f"HTTP {resp.status_code} from {url}")
                continue
            if resp.status_code != 200:
                raise RemoteError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            return resp.json()
        raise RemoteError(f"request to {url} failed after {RETRY_ATTEMPTS} attempts: {last_error}")


def _whitespace_tokens(text: str) -> int:
    return max(1, len(text.split()))


@dataclass
class Completion:
    text: str
    logprob: float
    token_count: int


class RemotePolicy(Policy):
    """Samples actions from a completion endpoint, one line per action.

    With no world oracle the policy imagines the next observation itself
    (model-as-world); simulated environments should pass true transitions.
    """

    def __init__(self, cfg: Optional[RemoteConfig] = None):
        self.cfg = cfg or RemoteConfig()
        self.client = HttpClient(self.cfg)

    # -- wire helpers -------------------------------------------------------

    def _complete(self, prompt: str, temperature: float, n: int = 1) -> list[Completion]:
        if self.cfg.use_chat:
            payload = {
                "model": self.cfg.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": temperature,
                "max_tokens": self.cfg.max_tokens,
                "logprobs": True,
                "n": n,
            }
            body = self.client.post("/chat/completions", payload)
        else:
            payload = {
                "model": self.cfg.model,
                "prompt": prompt,
                "temperature": temperature,
                "max_tokens": self.cfg.max_tokens,
                "logprobs": 1,
                "n": n,
                "stop": list(self.cfg.stop),
            }
            body = self.client.post("/completions", payload)
        choices = body.get("choices")
        if not choices:
            raise RemoteError("response carries no choices")
        usage = body.get("usage") or {}
        completion_tokens = usage.get("completion_tokens")
        out = []
        for ch in choices:
            text = (ch.get("text") or ch.get("message", {}).get("content") or "").strip()
            lp_info = ch.get("logprobs") or {}
            token_lps = lp_info.get("token_logprobs") or []
            logprob = float(sum(lp for lp in token_lps if lp is not None))
            if completion_tokens is not None and len(choices) == 1:
                tokens = int(completion_tokens)
            else:
                tokens = _whitespace_tokens(text)
            out.append(Completion(text=text, logprob=logprob, token_count=max(1, tokens)))
        return out

    # -- policy surface ------------------------------------------------------

    def sample_step(self, ctx: PolicyContext, alpha: float, rng: np.random.Generator) -> tuple[Action, float]:
        comp = self._complete(render_prompt(ctx), temperature=alpha, n=1)[0]
        if not comp.text:
            raise RemoteError("endpoint returned an empty action")
        return Action(text=comp.text, token_count=comp.token_count), comp.logprob

    def predict_obs(self, ctx: PolicyContext, action: Action, rng: np.random.Generator) -> StateObs:
        prompt = render_prompt(ctx) + f" {action.text}\nObservation:"
        comp = self._complete(prompt, temperature=0.0, n=1)[0]
        return StateObs(text=comp.text)

    def distribution(self, ctx: PolicyContext):
        raise SupportUnavailable("support unavailable for remote policies")

    def support(self, ctx: PolicyContext):
        raise SupportUnavailable("support unavailable for remote policies")

    def score_sequence(self, ctx: PolicyContext, actions: Sequence[Action], alpha: float = 1.0) -> float:
        raise ScoringUnavailable("scoring unavailable without a scoring endpoint")


class CompletionScorer:
    """Outcome scorer over the completion protocol: sends the candidate text
    under a scoring instruction and parses one scalar from the reply."""

    def __init__(self, cfg: Optional[RemoteConfig] = None,
                 instruction: str = "Rate the following solution between 0 and 1. Reply with one number.\n"):
        self.cfg = cfg or RemoteConfig()
        self.client = HttpClient(self.cfg)
        self.instruction = instruction
        self.clamped_count = 0

    def score(self, text: str) -> float:
        body = self.client.post(
            "/completions",
            {
                "model": self.cfg.model,
                "prompt": self.instruction + text,
                "temperature": 0.0,
                "max_tokens": 8,
                "logprobs": 0,
                "n": 1,
            },
        )
        try:
            reply = body["choices"][0]["text"].strip()
            return float(reply.split()[0])
        except (KeyError, IndexError, ValueError) as e:
            raise RemoteError(f"unparseable score reply: {e}") from e


class PlainPostScorer:
    """Outcome scorer for endpoints accepting POST {text} -> {score}."""

    def __init__(self, cfg: Optional[RemoteConfig] = None, path: str = "/score"):
        self.cfg = cfg or RemoteConfig()
        self.client = HttpClient(self.cfg)
        self.path = path
        self.clamped_count = 0

    def score(self, text: str) -> float:
        body = self.client.post(self.path, {"text": text})
        if "score" not in body:
            raise RemoteError("score endpoint reply has no 'score' field")
        return float(body["score"])
