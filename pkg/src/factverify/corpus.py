"""Claim datasets and the evidence library: loading, validation, persistence."""

from __future__ import annotations

import datetime as dt
import json
import re
import unicodedata
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence

from . import LABELS

HOTSPOT_FIELDS = ("views", "discussions", "engagements", "posts")

_WS = re.compile(r"\s+")


class CorpusError(ValueError):
    """Validation failure while reading a dataset or evidence file."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True)
class HotspotIndicators:
    views: Optional[float] = None
    discussions: Optional[float] = None
    engagements: Optional[float] = None
    posts: Optional[float] = None

    def __post_init__(self):
        for name in HOTSPOT_FIELDS:
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"hotspot {name} must be >= 0, got {value}")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in HOTSPOT_FIELDS}


@dataclass(frozen=True)
class ClaimSample:
    id: str
    claim: str
    label: str
    gold_evidence_ids: tuple[str, ...]
    explanation: str = ""
    hotspot: Optional[HotspotIndicators] = None
    risk_index: Optional[int] = None
    claim_date: Optional[dt.date] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}; expected one of {', '.join(LABELS)}")
        if not self.gold_evidence_ids:
            raise ValueError("gold_evidence_ids must be non-empty")
        if self.risk_index is not None and not 1 <= self.risk_index <= 5:
            raise ValueError(f"risk_index must lie in [1, 5], got {self.risk_index}")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "claim": self.claim,
            "label": self.label,
            "gold_evidence_ids": list(self.gold_evidence_ids),
            "explanation": self.explanation,
            "hotspot": self.hotspot.as_dict() if self.hotspot is not None else None,
            "risk_index": self.risk_index,
            "claim_date": self.claim_date.isoformat() if self.claim_date else None,
        }


@dataclass(frozen=True)
class EvidenceDoc:
    id: str
    text: str
    url: Optional[str] = None
    published: Optional[dt.date] = None

    def __post_init__(self):
        if not normalize_text(self.text):
            raise ValueError(f"evidence {self.id!r} has empty text")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "url": self.url,
            "published": self.published.isoformat() if self.published else None,
        }


def normalize_text(text: str) -> str:
    """NFC-normalize, trim, and collapse internal whitespace runs to one space."""
    return _WS.sub(" ", unicodedata.normalize("NFC", text)).strip()


def parse_date(value: Any) -> Optional[dt.date]:
    """Parse an ISO 8601 date or datetime string; time-of-day is dropped."""
    if value is None or value == "":
        return None
    if not isinstance(value, str):
        raise ValueError(f"date must be an ISO 8601 string, got {value!r}")
    text = value.strip()
    try:
        return dt.date.fromisoformat(text[:10])
    except ValueError:
        pass
    try:
        return dt.datetime.fromisoformat(text.replace("Z", "+00:00")).date()
    except ValueError:
        raise ValueError(f"invalid ISO 8601 date {value!r}") from None


def _count(value: Any, name: str) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"hotspot {name} must be a number or null, got {value!r}")
    return value


def _parse_hotspot(raw: Any) -> Optional[HotspotIndicators]:
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ValueError("hotspot must be an object or null")
    unknown = set(raw) - set(HOTSPOT_FIELDS)
    if unknown:
        raise ValueError(f"unknown hotspot fields: {', '.join(sorted(unknown))}")
    return HotspotIndicators(**{name: _count(raw.get(name), name) for name in HOTSPOT_FIELDS})


def _require_str(record: dict, key: str) -> str:
    value = record.get(key)
    if not isinstance(value, str):
        raise ValueError(f"field {key!r} must be a string")
    return value


def claim_from_json(record: Any) -> ClaimSample:
    if not isinstance(record, dict):
        raise ValueError("record must be a JSON object")
    gold = record.get("gold_evidence_ids")
    if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
        raise ValueError("gold_evidence_ids must be a list of strings")
    risk = record.get("risk_index")
    if risk is not None and (isinstance(risk, bool) or not isinstance(risk, int)):
        raise ValueError(f"risk_index must be an integer, got {risk!r}")
    explanation = record.get("explanation") or ""
    if not isinstance(explanation, str):
        raise ValueError("explanation must be a string")
    return ClaimSample(
        id=_require_str(record, "id"),
        claim=_require_str(record, "claim"),
        label=_require_str(record, "label"),
        gold_evidence_ids=tuple(gold),
        explanation=explanation,
        hotspot=_parse_hotspot(record.get("hotspot")),
        risk_index=risk,
        claim_date=parse_date(record.get("claim_date")),
    )


def evidence_from_json(record: Any) -> EvidenceDoc:
    if not isinstance(record, dict):
        raise ValueError("record must be a JSON object")
    url = record.get("url")
    if url is not None and not isinstance(url, str):
        raise ValueError("url must be a string or null")
    return EvidenceDoc(
        id=_require_str(record, "id"),
        text=_require_str(record, "text"),
        url=url,
        published=parse_date(record.get("published")),
    )


def _iter_records(path: Path) -> Iterator[tuple[int, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON: {exc.msg}", lineno, str(path)) from None


def load_dataset(path, evidence_ids: Optional[Iterable[str]] = None) -> list[ClaimSample]:
    """Read ``claims.jsonl``. When ``evidence_ids`` is given, every gold id must resolve in it."""
    path = Path(path)
    known = set(evidence_ids) if evidence_ids is not None else None
    samples: list[ClaimSample] = []
    seen: set[str] = set()
    for lineno, record in _iter_records(path):
        try:
            sample = claim_from_json(record)
        except ValueError as exc:
            raise CorpusError(str(exc), lineno, str(path)) from None
        if sample.id in seen:
            raise CorpusError(f"duplicate claim id {sample.id!r}", lineno, str(path))
        if known is not None:
            missing = [g for g in sample.gold_evidence_ids if g not in known]
            if missing:
                raise CorpusError(
                    f"claim {sample.id!r} references unknown evidence {', '.join(missing)}", lineno, str(path)
                )
        seen.add(sample.id)
        samples.append(sample)
    return samples


def load_evidence_library(path) -> list[EvidenceDoc]:
    path = Path(path)
    docs: list[EvidenceDoc] = []
    seen: set[str] = set()
    for lineno, record in _iter_records(path):
        try:
            doc = evidence_from_json(record)
        except ValueError as exc:
            raise CorpusError(str(exc), lineno, str(path)) from None
        if doc.id in seen:
            raise CorpusError(f"duplicate evidence id {doc.id!r}", lineno, str(path))
        seen.add(doc.id)
        docs.append(doc)
    return docs


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def save_dataset(samples: Iterable[ClaimSample], path) -> None:
    _write_jsonl(path, (s.to_json() for s in samples))


def save_evidence_library(docs: Iterable[EvidenceDoc], path) -> None:
    _write_jsonl(path, (d.to_json() for d in docs))


def merge_dedup(libraries: Sequence[Sequence[EvidenceDoc]]) -> list[EvidenceDoc]:
    """Merge evidence lists, keeping one document per normalized text.

    The first list is treated as the gold library: its entries take precedence
    on text collisions and keep their ids. A later document whose id is already
    taken by a different text is kept under a suffixed id (``<id>~2``, ...).
    Output order is first occurrence.
    """
    by_text: dict[str, EvidenceDoc] = {}
    ids: set[str] = set()
    for library in libraries:
        for doc in library:
            key = normalize_text(doc.text)
            if key in by_text:
                continue
            if doc.id in ids:
                n = 2
                while f"{doc.id}~{n}" in ids:
                    n += 1
                doc = replace(doc, id=f"{doc.id}~{n}")
            by_text[key] = doc
            ids.add(doc.id)
    return list(by_text.values())
