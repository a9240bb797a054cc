"""Per-claim verification: prompt rendering, on-demand evidence injection,
reflection via reward decoding, and verdict parsing."""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

from . import LABELS
from .backends import format_evidence_block
from .corpus import ClaimSample
from .decoding import DecodeSession, HookAction, RewardConfig, TokenBackend, generate, write_trace
from .retrieval import BM25Retriever, RankedList, RetrievalIndex, Retriever

log = logging.getLogger(__name__)

CAP_NOTICE = "\n<evidence>No further evidence is available. Conclude with what you have.</evidence>\n"

_SENTENCE_END = re.compile(r"[。！？；.!?;\n]")


class TemplateError(ValueError):
    pass


class VerdictParseError(ValueError):
    pass


@dataclass(frozen=True)
class TriangulationTemplate:
    evidence_request: str = "[NEED_EVIDENCE]"
    conflict_tail: str = "Conflict:"
    label_marker: str = "Final label:"
    explanation_marker: str = "Explanation:"

    def __post_init__(self):
        markers = self.markers
        if any(not m for m in markers):
            raise TemplateError("template markers must be non-empty")
        if len(set(markers)) != len(markers):
            raise TemplateError("template markers must be pairwise distinct")

    @property
    def markers(self) -> tuple[str, ...]:
        return (self.evidence_request, self.conflict_tail, self.label_marker, self.explanation_marker)


DEFAULT_TEMPLATE = TriangulationTemplate()

_PROMPT = """You are a professional fact-checker. Decide whether the claim below is supported (SUP), \
refuted (REF), or cannot be decided from the evidence (NEI).

Claim: {claim}

Evidence is not shown up front. Whenever you need evidence, write {request} and stop; the next \
retrieved document will be appended right after it. At most {cap} documents are available.

Reason through these steps in order:
1. Relevance. Judge how each piece of evidence relates to the claim and give an initial label.
2. Key information. Extract the key facts from the evidence: subjects, events, times, places, quantities.
3. Consistency. Compare those facts with the claim and refine the label.
4. Explanation. Draft a short explanation of the label, grounded in the evidence.
5. Reflection. Check the claim, the evidence, the label and the explanation against each other. \
Write "{conflict} yes" if anything contradicts, then go back to step 1; otherwise write "{conflict} no".
6. Answer. When no conflict remains, end with exactly these two lines:
{label} SUP, REF or NEI
{explanation} your explanation in one paragraph
"""


def render_prompt(claim: ClaimSample, template: TriangulationTemplate = DEFAULT_TEMPLATE,
                  max_evidence: int = 3) -> str:
    text = claim.claim.strip()
    if not text:
        raise TemplateError(f"claim {claim.id!r} is empty")
    for marker in template.markers:
        if marker in text:
            raise TemplateError(f"claim {claim.id!r} contains template marker {marker!r}")
    prompt = _PROMPT.format(
        claim=text,
        request=template.evidence_request,
        cap=max_evidence,
        conflict=template.conflict_tail,
        label=template.label_marker,
        explanation=template.explanation_marker,
    )
    if prompt.count(text) != 1:
        raise TemplateError(f"claim {claim.id!r} collides with the template text")
    return prompt


@dataclass(frozen=True)
class ParsedVerdict:
    label: str
    explanation: str
    conflict: Optional[str]  # last "yes"/"no" reflection answer, None if never answered


def parse_verdict(transcript: str, template: TriangulationTemplate = DEFAULT_TEMPLATE) -> ParsedVerdict:
    """Read the final answer; the last label and explanation markers win."""
    at = transcript.rfind(template.label_marker)
    if at < 0:
        raise VerdictParseError("no final label marker in output")
    m = re.match(r"\s*\**\s*([A-Za-z]+)", transcript[at + len(template.label_marker):])
    label = m.group(1).upper() if m else ""
    if label not in LABELS:
        raise VerdictParseError(f"unrecognized label {label!r}")

    at = transcript.rfind(template.explanation_marker)
    if at < 0:
        raise VerdictParseError("no explanation marker in output")
    rest = transcript[at + len(template.explanation_marker):]
    ends = [rest.find(mk) for mk in template.markers if mk in rest]
    explanation = rest[:min(ends)] if ends else rest
    explanation = explanation.strip()
    if not explanation:
        raise VerdictParseError("empty explanation")

    answers = re.findall(re.escape(template.conflict_tail) + r"\s*(yes|no)\b", transcript, re.I)
    conflict = answers[-1].lower() if answers else None
    return ParsedVerdict(label, explanation, conflict)


# ---------------------------------------------------------------------------
# dynamic evidence augmentation

def truncate_evidence(text: str, budget: int) -> str:
    """Cut to ``budget`` characters, preferring a sentence end in the second half."""
    if len(text) <= budget:
        return text
    head = text[:budget]
    ends = [m.end() for m in _SENTENCE_END.finditer(head)]
    if ends and ends[-1] >= budget // 2:
        return head[:ends[-1]]
    return head


@dataclass(frozen=True)
class DeaAction:
    kind: str  # "continue", "inject" or "notice"
    doc_id: str = ""
    text: str = ""


@dataclass
class DeaState:
    evidence: Mapping[str, str]
    cap: int = 3
    budget: int = 3000
    sentinel: str = DEFAULT_TEMPLATE.evidence_request
    injected: list[str] = field(default_factory=list)
    injected_chars: int = 0
    notices: int = 0
    tail: str = ""


def dea_step(state: DeaState, retrieved: RankedList, emitted: str) -> DeaAction:
    """Decide what to splice after the text emitted since the last check.

    A sentinel asks for the best-ranked document not yet injected. Once
    ``state.cap`` documents are in (or the ranking is used up) every further
    request gets the closing notice instead.
    """
    if not retrieved.entries:
        raise ValueError("dea_step needs a non-empty ranking")
    window = state.tail + emitted
    hit = window.find(state.sentinel)
    if hit < 0:
        state.tail = window[-(len(state.sentinel) - 1):] if len(state.sentinel) > 1 else ""
        return DeaAction("continue")
    state.tail = window[hit + len(state.sentinel):]
    pending = [d for d in retrieved.doc_ids if d not in state.injected]
    if len(state.injected) >= state.cap or not pending:
        state.notices += 1
        return DeaAction("notice", text=CAP_NOTICE)
    doc_id = pending[0]
    body = truncate_evidence(state.evidence[doc_id], state.budget)
    state.injected.append(doc_id)
    state.injected_chars += len(body)
    return DeaAction("inject", doc_id, format_evidence_block(doc_id, body))


def upfront_chars(retrieved: RankedList, evidence: Mapping[str, str], budget: int) -> int:
    """Characters an inject-everything-first baseline would put in the prompt."""
    return sum(len(truncate_evidence(evidence[d], budget)) for d in retrieved.doc_ids)


class DeaHook:
    """Stream hook splicing evidence in whenever the sentinel is emitted."""

    def __init__(self, state: DeaState, retrieved: RankedList):
        self.state = state
        self.retrieved = retrieved

    def on_token(self, session: DecodeSession, token: str) -> Optional[HookAction]:
        action = dea_step(self.state, self.retrieved, token)
        if action.kind == "continue":
            return None
        session.dea_injections = len(self.state.injected)
        session.injected_chars = self.state.injected_chars
        return HookAction("splice", action.text)


# ---------------------------------------------------------------------------
# orchestration

@dataclass(frozen=True)
class Caps:
    max_evidence: int = 3
    evidence_budget: int = 3000
    max_output_tokens: int = 5000
    gold_evidence: bool = False

    def __post_init__(self):
        if self.max_evidence < 1 or self.evidence_budget < 1 or self.max_output_tokens < 1:
            raise ValueError("caps must be positive")


@dataclass
class VerdictRecord:
    id: str
    predicted_label: str
    explanation: str
    conflict_resolved: bool
    evidence_used: list[str]
    reflections: int
    dea_injections: int
    injected_chars: int
    wall_ms: int
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "predicted_label": self.predicted_label,
            "explanation": self.explanation,
            "conflict_resolved": self.conflict_resolved,
            "evidence_used": list(self.evidence_used),
            "reflections": self.reflections,
            "dea_injections": self.dea_injections,
            "injected_chars": self.injected_chars,
            "wall_ms": self.wall_ms,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, row: dict) -> "VerdictRecord":
        if row.get("predicted_label") not in LABELS:
            raise ValueError(f"prediction {row.get('id')!r} has invalid label {row.get('predicted_label')!r}")
        return cls(
            id=row["id"],
            predicted_label=row["predicted_label"],
            explanation=row.get("explanation") or "",
            conflict_resolved=bool(row.get("conflict_resolved", False)),
            evidence_used=list(row.get("evidence_used", [])),
            reflections=int(row.get("reflections", 0)),
            dea_injections=int(row.get("dea_injections", 0)),
            injected_chars=int(row.get("injected_chars", 0)),
            wall_ms=int(row.get("wall_ms", 0)),
            flags=list(row.get("flags", [])),
        )


def _as_retriever(index: Union[RetrievalIndex, Retriever]) -> Retriever:
    return BM25Retriever(index) if isinstance(index, RetrievalIndex) else index


def run_claim(claim: ClaimSample, index: Union[RetrievalIndex, Retriever], backend: TokenBackend,
              cfg: RewardConfig, caps: Caps, evidence: Mapping[str, str],
              template: TriangulationTemplate = DEFAULT_TEMPLATE,
              clock: Callable[[], float] = time.perf_counter,
              trace_path=None) -> VerdictRecord:
    """Verify one claim end to end.

    Output that cannot be parsed is regenerated once; a second failure yields
    an NEI verdict with ``conflict_resolved=False``. Backend errors propagate.
    """
    start = clock()
    flags: list[str] = []
    if caps.gold_evidence:
        gold = [g for g in claim.gold_evidence_ids if g in evidence][:caps.max_evidence]
        retrieved = RankedList(claim.id, tuple((g, 0.0) for g in gold))
    else:
        retrieved = _as_retriever(index).retrieve(claim, caps.max_evidence)

    def elapsed_ms() -> int:
        return int(round((clock() - start) * 1000))

    if not retrieved.entries:
        return VerdictRecord(claim.id, "NEI", "", False, [], 0, 0, 0, elapsed_ms(), ["retrieval_empty"])

    prompt = render_prompt(claim, template, caps.max_evidence)
    parsed = None
    for attempt in range(2):
        state = DeaState(evidence, caps.max_evidence, caps.evidence_budget, template.evidence_request)
        _, session = generate(backend, prompt, cfg, [DeaHook(state, retrieved)], caps.max_output_tokens)
        if trace_path is not None:
            write_trace(session, trace_path)
        if session.length_capped:
            flags.append("length_capped")
        try:
            parsed = parse_verdict(session.text, template)
            break
        except VerdictParseError as exc:
            log.info("claim %s: unparseable output on attempt %d: %s", claim.id, attempt + 1, exc)
            flags.append("unparseable")
    if state.notices:
        flags.append("cap_reached_notice")

    record = VerdictRecord(
        id=claim.id,
        predicted_label="NEI",
        explanation="",
        conflict_resolved=False,
        evidence_used=list(state.injected),
        reflections=session.trigger_hits,
        dea_injections=len(state.injected),
        injected_chars=state.injected_chars,
        wall_ms=0,
        flags=flags,
    )
    if parsed is None:
        record.flags.append("fallback_nei")
    else:
        record.predicted_label = parsed.label
        record.explanation = parsed.explanation
        record.conflict_resolved = parsed.conflict == "no"
    record.wall_ms = elapsed_ms()
    return record


def trace_file(trace_dir, claim_id: str) -> Path:
    safe = re.sub(r"[^\w.\-]", "_", claim_id)
    return Path(trace_dir) / f"{safe}.trace.jsonl"


def run_many(claims: Sequence[ClaimSample], index, backend: TokenBackend, cfg: RewardConfig, caps: Caps,
             evidence: Mapping[str, str], parallel: int = 1,
             on_done: Optional[Callable[[VerdictRecord], None]] = None, trace_dir=None,
             **kwargs) -> list[VerdictRecord]:
    """Run claims with ``parallel`` workers; results come back (and ``on_done`` fires) in input order."""
    def one(claim):
        path = trace_file(trace_dir, claim.id) if trace_dir is not None else None
        return run_claim(claim, index, backend, cfg, caps, evidence, trace_path=path, **kwargs)

    out = []
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        for rec in pool.map(one, claims):
            if on_done:
                on_done(rec)
            out.append(rec)
    return out


def save_predictions(records, path, append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def load_predictions(path) -> list[VerdictRecord]:
    with open(path, encoding="utf-8") as fh:
        return [VerdictRecord.from_json(json.loads(line)) for line in fh if line.strip()]
