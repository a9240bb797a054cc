"""Concrete token-stream backends: a scripted deterministic mock and an
OpenAI-compatible completions client."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional

import httpx

from .decoding import TIERS, BackendError, StepOutput, greedy_step

log = logging.getLogger(__name__)

MAIN_SECTION = "main"

# ---------------------------------------------------------------------------
# evidence blocks, shared with the pipeline so over-long contexts can be compacted

_EVIDENCE_BLOCK = re.compile(r'<evidence id="([^"]*)">\n(.*?)\n</evidence>', re.S)


def format_evidence_block(doc_id: str, text: str) -> str:
    return f'\n<evidence id="{doc_id}">\n{text}\n</evidence>\n'


def compact_context(context: str, max_chars: int) -> str:
    """Drop evidence bodies, oldest first, until the context fits ``max_chars``.

    Reasoning text is never touched; if the context is still too long once
    every evidence body is gone it is returned as is.
    """
    while len(context) > max_chars:
        match = _EVIDENCE_BLOCK.search(context)
        if match is None:
            break
        stub = f'<evidence id="{match.group(1)}" omitted="input window"/>'
        context = context[:match.start()] + stub + context[match.end():]
    return context


# ---------------------------------------------------------------------------
# mock backend

class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class MockStep:
    token: str
    logits: Mapping[str, float]


@dataclass(frozen=True)
class MockScript:
    sections: Mapping[str, tuple[MockStep, ...]]
    branches: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if MAIN_SECTION not in self.sections:
            raise ScriptError("script has no main section")
        for name, steps in self.sections.items():
            for n, step in enumerate(steps):
                if not step.logits:
                    raise ScriptError(f"[{name}] step {n}: empty logit map")
                if not all(math.isfinite(v) for v in step.logits.values()):
                    raise ScriptError(f"[{name}] step {n}: non-finite logit")
                if greedy_step(step.logits) != step.token:
                    raise ScriptError(f"[{name}] step {n}: token {step.token!r} is not the argmax of its logits")
        subs = [s for s, _ in self.branches]
        for i, a in enumerate(subs):
            if not a:
                raise ScriptError("branch substring must be non-empty")
            for b in subs[i + 1:]:
                if a in b or b in a:
                    raise ScriptError(f"branch substrings overlap: {a!r} / {b!r}")
        for sub, label in self.branches:
            if label not in self.sections:
                raise ScriptError(f"branch {sub!r} targets unknown section {label!r}")

    @classmethod
    def from_tokens(cls, tokens, **sections) -> "MockScript":
        """Script that emits ``tokens`` with a single unit logit each."""
        def steps(seq):
            return tuple(MockStep(t, {t: 0.0}) for t in seq)
        return cls({MAIN_SECTION: steps(tokens), **{k: steps(v) for k, v in sections.items()}})


_ESCAPES = {"s": " ", "n": "\n", "t": "\t", "|": "|", ",": ",", ":": ":", "\\": "\\", "#": "#", "[": "["}


def _split_unescaped(text: str, sep: str, maxsplit: int = -1, from_right: bool = False) -> list[str]:
    positions = []
    i = 0
    while i < len(text):
        if text[i] == "\\":
            i += 2
            continue
        if text[i] == sep:
            positions.append(i)
        i += 1
    if maxsplit >= 0:
        positions = positions[-maxsplit:] if from_right else positions[:maxsplit]
    parts, start = [], 0
    for p in positions:
        parts.append(text[start:p])
        start = p + 1
    parts.append(text[start:])
    return parts


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            if nxt not in _ESCAPES:
                raise ScriptError(f"unknown escape \\{nxt}")
            out.append(_ESCAPES[nxt])
            i += 2
            continue
        out.append(ch)
        i += 1
    return "".join(out)


_BRANCH = re.compile(r'^branch\s+(".*")\s*->\s*(\S+)\s*$')
_SECTION = re.compile(r"^\[([A-Za-z0-9_\-]+)\]\s*$")


def parse_script(text: str) -> MockScript:
    """Parse the mock script format.

    One step per line: ``token`` or ``token | tokA:logit,tokB:logit``.
    ``[name]`` starts a new section (the implicit first one is ``main``);
    ``branch "substring" -> name`` switches to that section whenever the
    substring newly appears in the context. Escapes inside tokens: ``\\s``
    space, ``\\n`` newline, ``\\t`` tab, and backslash before ``| , : # [ \\``.
    Lines starting with ``#`` are comments.
    """
    sections: dict[str, list[MockStep]] = {MAIN_SECTION: []}
    branches: list[tuple[str, str]] = []
    current = MAIN_SECTION
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            m = _BRANCH.match(line)
            if m:
                branches.append((json.loads(m.group(1)), m.group(2)))
                continue
            m = _SECTION.match(line)
            if m:
                current = m.group(1)
                if current in sections and sections[current]:
                    raise ScriptError(f"section {current!r} defined twice")
                sections.setdefault(current, [])
                continue
            parts = _split_unescaped(line, "|", maxsplit=1)
            token = _unescape(parts[0].strip())
            if not token:
                raise ScriptError("empty token")
            if len(parts) == 1:
                logits = {token: 0.0}
            else:
                logits = {}
                for item in _split_unescaped(parts[1].strip(), ","):
                    pair = _split_unescaped(item.strip(), ":", 1, from_right=True)
                    if len(pair) != 2:
                        raise ScriptError(f"expected token:logit, got {item.strip()!r}")
                    name, value = pair
                    logits[_unescape(name)] = float(value)
            sections[current].append(MockStep(token, logits))
        except ScriptError as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
        except (ValueError, json.JSONDecodeError) as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
    return MockScript({k: tuple(v) for k, v in sections.items()}, tuple(branches))


def load_script(path) -> MockScript:
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read())


class MockSession:
    """Per-generation cursor into a MockScript."""

    def __init__(self, script: MockScript, tier: str):
        self.script = script
        self.tier = tier
        self.section = MAIN_SECTION
        self.pos = 0
        self._fired: Optional[list[int]] = None

    def step(self, context: str, bias: Optional[Mapping[str, float]] = None) -> Optional[StepOutput]:
        """Advance one step; None once the current section is exhausted."""
        if self._fired is None:
            # occurrences already in the prompt never fire
            self._fired = [context.count(sub) for sub, _ in self.script.branches]
        for n, (sub, label) in enumerate(self.script.branches):
            seen = context.count(sub)
            if seen > self._fired[n]:
                self._fired[n] = seen
                self.section, self.pos = label, 0
                break
        steps = self.script.sections[self.section]
        if self.pos >= len(steps):
            return None
        logits = dict(steps[self.pos].logits)
        self.pos += 1
        for token, value in (bias or {}).items():
            # tokens the script does not list are unreachable, biased or not
            if token in logits:
                logits[token] += value
        token = greedy_step(logits)
        return StepOutput(token, logits if self.tier == "logits" else None)

    def stream(self, context: str, bias: Optional[Mapping[str, float]], max_tokens: int) -> Iterator[StepOutput]:
        for _ in range(max_tokens):
            out = self.step(context, bias)
            if out is None:
                return
            yield out
            context += out.token


@dataclass
class MockBackend:
    script: MockScript
    tier: str = "logits"

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")

    def open_session(self) -> MockSession:
        return MockSession(self.script, self.tier)


# ---------------------------------------------------------------------------
# remote backend

@dataclass(frozen=True)
class RemoteBackendConfig:
    base_url: str
    model: str
    timeout: float = 60.0
    tier: str = "bias"
    max_retries: int = 3
    top_logprobs: int = 20
    backoff: float = 0.5
    max_input_chars: int = 16000
    api_key: Optional[str] = None
    token_ids: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.tier not in TIERS:
            raise ValueError(f"tier must be one of {TIERS}")

    @classmethod
    def from_env(cls, base_url: Optional[str] = None, **overrides) -> "RemoteBackendConfig":
        url = base_url or os.environ.get("FACTVERIFY_BASE_URL")
        if not url:
            raise ValueError("no backend URL given and FACTVERIFY_BASE_URL is unset")
        return cls(
            base_url=url.rstrip("/"),
            model=overrides.pop("model", None) or os.environ.get("FACTVERIFY_MODEL", "default"),
            api_key=overrides.pop("api_key", None) or os.environ.get("FACTVERIFY_API_KEY"),
            **overrides,
        )


class _Retryable(Exception):
    pass


def _parse_logprobs(choice: dict) -> Optional[dict[str, float]]:
    lp = choice.get("logprobs")
    if not lp:
        return None
    top = lp.get("top_logprobs")
    if isinstance(top, list) and top and isinstance(top[0], dict):
        return {str(k): float(v) for k, v in top[0].items()}
    content = lp.get("content")
    if isinstance(content, list) and content:
        return {e["token"]: float(e["logprob"]) for e in content[0].get("top_logprobs", [])}
    return None


class RemoteSession:
    def __init__(self, backend: "RemoteBackend"):
        self.backend = backend

    def stream(self, context: str, bias: Optional[Mapping[str, float]], max_tokens: int) -> Iterator[StepOutput]:
        return self.backend.remote_stream(context, bias, max_tokens)


class RemoteBackend:
    """Client for an OpenAI-compatible ``/completions`` endpoint with SSE streaming.

    On the logits tier each streamed token carries its top-k logprobs, which
    stand in for logits (they differ by a per-step constant, so argmax and
    additive rewards behave the same). Tokens outside the top-k are absent,
    i.e. unreachable by a reward.
    """

    def __init__(self, cfg: RemoteBackendConfig, transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.cfg = cfg
        self.tier = cfg.tier
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
        self._client = httpx.Client(base_url=cfg.base_url, timeout=cfg.timeout, transport=transport,
                                    headers=headers)
        self.last_attempts = 0
        self.last_request: Optional[dict] = None

    def open_session(self) -> RemoteSession:
        return RemoteSession(self)

    def close(self) -> None:
        self._client.close()

    def build_request(self, context: str, bias: Optional[Mapping[str, float]], max_tokens: int) -> dict:
        body = {
            "model": self.cfg.model,
            "prompt": compact_context(context, self.cfg.max_input_chars),
            "max_tokens": max_tokens,
            "temperature": 0,
            "stream": True,
        }
        if bias:
            body["logit_bias"] = {str(self.cfg.token_ids.get(t, t)): v for t, v in bias.items()}
        if self.cfg.tier == "logits":
            body["logprobs"] = self.cfg.top_logprobs
        return body

    def _request(self, body: dict) -> Iterator[StepOutput]:
        with self._client.stream("POST", "/completions", json=body) as resp:
            if resp.status_code == 429 or resp.status_code >= 500:
                raise _Retryable(f"HTTP {resp.status_code}")
            if resp.status_code >= 400:
                resp.read()
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            for line in resp.iter_lines():
                if not line.startswith("data:"):
                    continue
                data = line[5:].strip()
                if data == "[DONE]":
                    return
                chunk = json.loads(data)
                choices = chunk.get("choices") or []
                if not choices:
                    continue
                choice = choices[0]
                text = choice.get("text")
                if text is None:
                    text = (choice.get("delta") or {}).get("content")
                if text:
                    yield StepOutput(text, _parse_logprobs(choice) if self.cfg.tier == "logits" else None)
                if choice.get("finish_reason"):
                    return

    def remote_stream(self, context: str, bias: Optional[Mapping[str, float]],
                      max_tokens: int) -> Iterator[StepOutput]:
        """Stream tokens, retrying transient failures with exponential backoff.

        A retry resumes from the text received so far. After ``max_retries``
        retries a BackendError carries that partial text.
        """
        emitted: list[str] = []
        attempt = 0
        while True:
            attempt += 1
            self.last_attempts = attempt
            remaining = max_tokens - len(emitted)
            body = self.build_request(context + "".join(emitted), bias, remaining)
            self.last_request = body
            try:
                for out in self._request(body):
                    emitted.append(out.token)
                    yield out
                return
            except (_Retryable, httpx.TransportError, json.JSONDecodeError) as exc:
                if attempt > self.cfg.max_retries:
                    raise BackendError(f"giving up after {attempt} attempts: {exc}",
                                       partial="".join(emitted), attempts=attempt) from exc
                delay = self.cfg.backoff * 2 ** (attempt - 1)
                log.warning("backend attempt %d failed (%s); retrying in %.2fs", attempt, exc, delay)
                self._sleep(delay)
