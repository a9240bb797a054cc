"""Greedy decoding with trigger-activated, geometrically decaying logit rewards.

Whenever the generated tail equals the trigger sequence, every reward target
token gets ``delta0 * gamma**i`` added to its next-step logit, where ``i``
counts the trigger hits already rewarded. With the defaults (20, 0.1) the
bonuses run 20, 2, 0.2, 0.02, ... so the model is pushed hard into a first
reflection pass and then released.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Iterator, Mapping, Optional, Protocol, Sequence

TIERS = ("logits", "bias")

DEFAULT_TRIGGER = ("Conflict", ":")
DEFAULT_REWARD_TARGETS = frozenset({"yes"})


class DecodingError(RuntimeError):
    pass


class BackendError(RuntimeError):
    """Backend failure; ``partial`` holds the text generated before it."""

    def __init__(self, message: str, partial: str = "", attempts: int = 0):
        super().__init__(message)
        self.partial = partial
        self.attempts = attempts


@dataclass(frozen=True)
class RewardConfig:
    delta0: float = 20.0
    gamma: float = 0.1
    trigger: tuple[str, ...] = DEFAULT_TRIGGER
    reward_targets: frozenset[str] = DEFAULT_REWARD_TARGETS
    max_reflections: int = 3

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not math.isfinite(self.delta0):
            raise ValueError("delta0 must be finite")
        if not self.trigger:
            raise ValueError("trigger sequence must be non-empty")
        if not self.reward_targets:
            raise ValueError("reward_targets must be non-empty")
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")
        object.__setattr__(self, "trigger", tuple(self.trigger))
        object.__setattr__(self, "reward_targets", frozenset(self.reward_targets))

    def reward(self, i: int) -> float:
        # decimal arithmetic so 20 * 0.1**2 is the double nearest 0.2, not 0.20000000000000004
        return float(Decimal(repr(self.delta0)) * Decimal(repr(self.gamma)) ** i)


@dataclass
class DecodeSession:
    tier: str = "logits"
    tokens: list[str] = field(default_factory=list)
    trigger_hits: int = 0
    dea_injections: int = 0
    injected_chars: int = 0
    events: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    length_capped: bool = False
    started: float = field(default_factory=time.perf_counter)
    elapsed: float = 0.0

    @property
    def text(self) -> str:
        return "".join(self.tokens)


@dataclass(frozen=True)
class StepOutput:
    token: str
    logits: Optional[Mapping[str, float]] = None


class BackendSession(Protocol):
    def stream(self, context: str, bias: Optional[Mapping[str, float]],
               max_tokens: int) -> Iterator[StepOutput]: ...


class TokenBackend(Protocol):
    """A model service producing tokens one step at a time.

    ``tier`` is ``"logits"`` when step outputs carry a logit (or logprob) map
    and ``"bias"`` when the service only accepts an additive per-token bias.
    """

    tier: str

    def open_session(self) -> BackendSession: ...


@dataclass(frozen=True)
class HookAction:
    kind: str  # "splice" or "stop"
    text: str = ""


class StreamHook(Protocol):
    def on_token(self, session: DecodeSession, token: str) -> Optional[HookAction]: ...


def match_trigger(generated: Sequence[str], trigger: Sequence[str]) -> bool:
    n = len(trigger)
    if n == 0 or len(generated) < n:
        return False
    return list(generated[-n:]) == list(trigger)


def apply_reward(logits: Mapping[str, float], session: DecodeSession, cfg: RewardConfig) -> dict[str, float]:
    """Return logits with the current reward added to the targets if the trigger matched.

    Increments ``session.trigger_hits`` on a match. Targets missing from the
    map (outside a top-k window) stay missing.
    """
    for token, value in logits.items():
        if not math.isfinite(value):
            raise DecodingError(f"non-finite logit for {token!r}")
    out = dict(logits)
    if not match_trigger(session.tokens, cfg.trigger):
        return out
    bonus = cfg.reward(session.trigger_hits)
    for token in cfg.reward_targets:
        if token in out:
            out[token] = out[token] + bonus
    session.events.append({"event": "reward", "step": len(session.tokens), "i": session.trigger_hits,
                           "bonus": bonus})
    session.trigger_hits += 1
    return out


def greedy_step(logits: Mapping[str, float]) -> str:
    """Argmax token; ties go to the lexicographically smallest token."""
    if not logits:
        raise DecodingError("cannot select from empty logits")
    return min(logits.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def generate(backend: TokenBackend, prompt: str, cfg: RewardConfig,
             hooks: Sequence[StreamHook] = (), max_tokens: int = 5000) -> tuple[list[str], DecodeSession]:
    """Greedy generation with reward decoding and stream hooks.

    Ordinary steps consume the backend's own stream. When the trigger has
    just been emitted and fewer than ``cfg.max_reflections`` hits were
    rewarded, the next step is requested on its own: logit backends return
    scores that get the reward before argmax, bias-only backends receive the
    reward as a request bias. Hooks see every token and may splice text into
    the context (the model continues from it) or stop generation.
    """
    if backend.tier not in TIERS:
        raise DecodingError(f"unknown backend tier {backend.tier!r}")
    session = DecodeSession(tier=backend.tier)
    conn = backend.open_session()
    context = prompt
    stream: Optional[Iterator[StepOutput]] = None

    def fail(exc: Exception):
        session.stop_reason = "error"
        session.elapsed = time.perf_counter() - session.started
        raise BackendError(f"backend failed after {len(session.tokens)} tokens: {exc}",
                           partial=session.text, attempts=getattr(exc, "attempts", 0)) from exc

    try:
        while True:
            if len(session.tokens) >= max_tokens:
                session.length_capped = True
                session.stop_reason = "length"
                break
            rewarded = (session.trigger_hits < cfg.max_reflections
                        and match_trigger(session.tokens, cfg.trigger))
            applied = None
            if rewarded:
                if stream is not None:
                    stream.close()
                    stream = None
                if backend.tier == "logits":
                    out = next(iter(conn.stream(context, None, 1)), None)
                    if out is None:
                        session.stop_reason = "eos"
                        break
                    if out.logits is None:
                        raise DecodingError("logit-tier backend returned no logits")
                    applied = apply_reward(out.logits, session, cfg)
                    token = greedy_step(applied)
                else:
                    bias = apply_reward(dict.fromkeys(cfg.reward_targets, 0.0), session, cfg)
                    applied = bias
                    out = next(iter(conn.stream(context, bias, 1)), None)
                    if out is None:
                        session.stop_reason = "eos"
                        break
                    token = out.token
            else:
                if stream is None:
                    stream = iter(conn.stream(context, None, max_tokens - len(session.tokens)))
                out = next(stream, None)
                if out is None:
                    session.stop_reason = "eos"
                    break
                token = out.token

            session.tokens.append(token)
            context += token
            session.events.append({"event": "token", "token": token, "logits": applied})

            stop = False
            for hook in hooks:
                action = hook.on_token(session, token)
                if action is None:
                    continue
                if action.kind == "splice":
                    context += action.text
                    session.events.append({"event": "splice", "text": action.text})
                    if stream is not None:
                        stream.close()
                        stream = None
                elif action.kind == "stop":
                    stop = True
                    break
                else:
                    raise DecodingError(f"unknown hook action {action.kind!r}")
            if stop:
                session.stop_reason = "hook"
                break
    except BackendError as exc:
        fail(exc)
    finally:
        if stream is not None:
            stream.close()
    session.elapsed = time.perf_counter() - session.started
    return list(session.tokens), session


def write_trace(session: DecodeSession, path) -> None:
    """Dump a session's token and reward events as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"event": "session", "tier": session.tier, "trigger_hits": session.trigger_hits,
                  "dea_injections": session.dea_injections, "stop_reason": session.stop_reason,
                  "length_capped": session.length_capped}
        fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True) + "\n")
        for event in session.events:
            fh.write(json.dumps(event, ensure_ascii=False, sort_keys=True) + "\n")


def read_trace(path) -> tuple[dict, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or rows[0].get("event") != "session":
        raise ValueError(f"{path}: not a decode trace")
    return rows[0], rows[1:]


def replay_tokens(events: Sequence[dict]) -> list[str]:
    return [e["token"] for e in events if e["event"] == "token"]
